//! Retrieval evaluation: descriptor extraction, Euclidean ranking with
//! protocol filters, average precision, CMC and the ablation table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::prepare_image;
use crate::checkpoint::Checkpoint;
use crate::dataset::{load_rgb, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{self, Ablation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub exclude_same_camera_same_id: bool,
    /// Also drop same-identity gallery entries wearing the query's clothes.
    pub cloth_change_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            exclude_same_camera_same_id: true,
            cloth_change_only: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        Ok(())
    }

    pub fn filter(&self) -> ProtocolFilter {
        ProtocolFilter {
            exclude_same_camera_same_id: self.exclude_same_camera_same_id,
            cloth_change_only: self.cloth_change_only,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolFilter {
    pub exclude_same_camera_same_id: bool,
    pub cloth_change_only: bool,
}

impl Default for ProtocolFilter {
    fn default() -> Self {
        EvalConfig::default().filter()
    }
}

impl ProtocolFilter {
    /// Whether gallery entry `g` is removed from `q`'s ranking.
    pub fn excludes(&self, q: &SampleMeta, g: &SampleMeta) -> bool {
        q.id == g.id
            && ((self.exclude_same_camera_same_id && q.cam == g.cam)
                || (self.cloth_change_only && q.clothes == g.clothes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: usize,
    pub cam: usize,
    pub clothes: usize,
}

/// Descriptors `(N, D)` with per-row metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub descriptors: Array2<f64>,
    pub meta: Vec<SampleMeta>,
    pub paths: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    paths: Vec<String>,
    ids: Vec<usize>,
    cams: Vec<usize>,
    clothes: Vec<usize>,
}

const DESCRIPTOR_MAGIC: &[u8; 8] = b"CCREIDDS";
const DESCRIPTOR_VERSION: u32 = 1;

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the binary matrix to `path` and the metadata to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, d) = self.descriptors.dim();
        let mut out = Vec::with_capacity(28 + 8 * n * d);
        out.extend_from_slice(DESCRIPTOR_MAGIC);
        out.extend_from_slice(&DESCRIPTOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for v in self.descriptors.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let sidecar = Sidecar {
            paths: self.paths.clone(),
            ids: self.meta.iter().map(|m| m.id).collect(),
            cams: self.meta.iter().map(|m| m.cam).collect(),
            clothes: self.meta.iter().map(|m| m.clothes).collect(),
        };
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 28 || &bytes[..8] != DESCRIPTOR_MAGIC {
            return Err(Error::InvalidInput(format!("{}: not a descriptor file", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != DESCRIPTOR_VERSION {
            return Err(Error::InvalidInput(format!("descriptor file version {version}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        if bytes.len() != 28 + 8 * n * d {
            return Err(Error::InvalidInput(format!("{}: size does not match header", path.display())));
        }
        let values = bytes[28..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let descriptors = Array2::from_shape_vec((n, d), values).expect("size checked");
        let side = Self::sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(side.display().to_string(), e))?;
        if [sc.paths.len(), sc.ids.len(), sc.cams.len(), sc.clothes.len()] != [n; 4] {
            return Err(Error::InvalidInput("descriptor sidecar length mismatch".into()));
        }
        let meta = (0..n)
            .map(|i| SampleMeta {
                id: sc.ids[i],
                cam: sc.cams[i],
                clothes: sc.clothes[i],
            })
            .collect();
        Ok(DescriptorSet {
            descriptors,
            meta,
            paths: sc.paths,
        })
    }
}

/// L2-normalized descriptors of every record in `split`.
pub fn extract_descriptors(ck: &Checkpoint, manifest: &DatasetManifest, split: Split) -> Result<DescriptorSet> {
    let cfg = &ck.config;
    let spec = cfg.model_spec(ck.num_identities);
    spec.validate()?;
    let expected = model::init_model(&spec, 0)?;
    for (name, t) in expected.iter() {
        match ck.params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint does not match its config: parameter `{name}` missing or misshapen"
                )))
            }
        }
    }
    let [h, w] = cfg.backbone.input_size;
    let records: Vec<_> = manifest.split(split).collect();
    let d = spec.descriptor_len();
    let mut descriptors = Array2::zeros((records.len(), d));
    let mut meta = Vec::with_capacity(records.len());
    let mut paths = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let img = prepare_image(&load_rgb(&rec.image_path, (h, w))?, &cfg.backbone)?;
        let v = model::descriptor(&ck.params, &spec, &img)?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("descriptor of {}", rec.image_path.display())));
        }
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for (dst, x) in descriptors.row_mut(i).iter_mut().zip(&v) {
            *dst = x * scale;
        }
        meta.push(SampleMeta {
            id: rec.identity_id,
            cam: rec.camera_id as usize,
            clothes: rec.clothes_id as usize,
        });
        paths.push(rec.image_path.display().to_string());
    }
    Ok(DescriptorSet {
        descriptors,
        meta,
        paths,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    /// Gallery indices surviving the filter, nearest first.
    pub ranking: Vec<usize>,
    pub average_precision: f64,
    /// 0-based rank of the first correct match.
    pub first_hit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub queries: Vec<QueryResult>,
    /// `cmc[k]` = fraction of evaluated queries with a match in the top `k + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries without any valid match after filtering.
    pub dropped_queries: Vec<usize>,
    /// Gallery entries removed by the filter, summed over evaluated queries.
    pub filtered_gallery_entries: usize,
}

impl RankingResult {
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Ranks the gallery for every query and scores the rankings.
pub fn evaluate(query: &DescriptorSet, gallery: &DescriptorSet, filter: ProtocolFilter) -> Result<RankingResult> {
    let (nq, dq) = query.descriptors.dim();
    let (ng, dg) = gallery.descriptors.dim();
    if dq != dg {
        return Err(Error::Shape(format!("query descriptors have D = {dq}, gallery D = {dg}")));
    }
    if query.meta.len() != nq || gallery.meta.len() != ng {
        return Err(Error::Shape("descriptor metadata length mismatch".into()));
    }
    let mut queries = Vec::new();
    let mut dropped = Vec::new();
    let mut filtered = 0;
    let mut hits_at = vec![0usize; ng.max(1)];
    for qi in 0..nq {
        let qm = &query.meta[qi];
        let keep: Vec<usize> = (0..ng).filter(|&g| !filter.excludes(qm, &gallery.meta[g])).collect();
        if !keep.iter().any(|&g| gallery.meta[g].id == qm.id) {
            dropped.push(qi);
            continue;
        }
        filtered += ng - keep.len();
        let dist: Vec<f64> = keep
            .iter()
            .map(|&g| euclidean(query.descriptors.row(qi), gallery.descriptors.row(g)))
            .collect();
        let mut order: Vec<usize> = (0..keep.len()).collect();
        // stable: equal distances keep ascending gallery index
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
        let ranking: Vec<usize> = order.into_iter().map(|i| keep[i]).collect();
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (pos, &g) in ranking.iter().enumerate() {
            if gallery.meta[g].id == qm.id {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first_hit.get_or_insert(pos);
            }
        }
        let first_hit = first_hit.expect("query has a valid match");
        hits_at[first_hit] += 1;
        queries.push(QueryResult {
            query: qi,
            ranking,
            average_precision: precision_sum / hits as f64,
            first_hit,
        });
    }
    if queries.is_empty() {
        return Err(Error::Evaluation(
            "no query has a valid gallery match after filtering".into(),
        ));
    }
    let n = queries.len() as f64;
    let mut cmc = Vec::with_capacity(hits_at.len());
    let mut acc = 0usize;
    for h in hits_at {
        acc += h;
        cmc.push(acc as f64 / n);
    }
    let map = queries.iter().map(|q| q.average_precision).sum::<f64>() / n;
    Ok(RankingResult {
        queries,
        cmc,
        map,
        dropped_queries: dropped,
        filtered_gallery_entries: filtered,
    })
}

/// Summary written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// First (up to) 20 CMC values.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub evaluated_queries: usize,
    pub dropped_queries: usize,
    pub gallery_size: usize,
    pub filtered_gallery_entries: usize,
    pub protocol: ProtocolFilter,
}

impl EvalReport {
    pub fn new(result: &RankingResult, num_queries: usize, gallery_size: usize, protocol: ProtocolFilter) -> Self {
        EvalReport {
            map: result.map,
            rank1: result.rank(1),
            rank5: result.rank(5),
            rank10: result.rank(10),
            cmc: result.cmc.iter().take(20).copied().collect(),
            num_queries,
            evaluated_queries: result.queries.len(),
            dropped_queries: result.dropped_queries.len(),
            gallery_size,
            filtered_gallery_entries: result.filtered_gallery_entries,
            protocol,
        }
    }
}

/// Extracts query and gallery descriptors and evaluates them.
pub fn evaluate_checkpoint(ck: &Checkpoint, manifest: &DatasetManifest, filter: ProtocolFilter) -> Result<EvalReport> {
    let q = extract_descriptors(ck, manifest, Split::Query)?;
    let g = extract_descriptors(ck, manifest, Split::Gallery)?;
    if q.is_empty() || g.is_empty() {
        return Err(Error::Evaluation("manifest needs both query and gallery records".into()));
    }
    let result = evaluate(&q, &g, filter)?;
    Ok(EvalReport::new(&result, q.len(), g.len(), filter))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mgr: bool,
    pub cdn: bool,
    pub psa: bool,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
}

/// One row per ablation variant, in ladder order (baseline, mgr, mgr+cdn, mgr+cdn+psa).
pub fn ablation_report(results: &[(String, EvalReport)]) -> Result<Vec<AblationRow>> {
    for (name, _) in results {
        if !Ablation::LADDER.iter().any(|a| a.label() == *name) {
            return Err(Error::Evaluation(format!("unknown ablation variant `{name}`")));
        }
    }
    Ablation::LADDER
        .iter()
        .map(|a| {
            let label = a.label();
            let (_, report) = results
                .iter()
                .find(|(n, _)| *n == label)
                .ok_or_else(|| Error::Evaluation(format!("missing ablation variant `{label}`")))?;
            Ok(AblationRow {
                variant: label,
                mgr: a.mgr,
                cdn: a.cdn,
                psa: a.psa,
                map: report.map,
                rank1: report.rank1,
            })
        })
        .collect()
}

/// Aligned plain-text rendering of the ablation rows.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>3} {:>3} {:>3} {:>7} {:>7}", "variant", "MGR", "CDN", "PSA", "mAP", "rank-1");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>3} {:>3} {:>3} {:>7.2} {:>7.2}",
            r.variant,
            mark(r.mgr),
            mark(r.cdn),
            mark(r.psa),
            100.0 * r.map,
            100.0 * r.rank1
        );
    }
    out
}
