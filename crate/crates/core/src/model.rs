//! Wiring of backbone, branches, capsule layers and part heads according to
//! the ablation flags, plus the batch objective with its gradients.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::{GradStore, Graph, ParamStore, Tensor, Var};
use crate::backbone::{self, fan_in_uniform, BackboneConfig};
use crate::cdn::{self, CdnConfig};
use crate::dataset::PartMap;
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::mgr::{self, BranchId, BRANCH_SIZE};
use crate::psa::{self, PsaConfig};

/// Which modules sit on top of the baseline (F1 + pooling + linear classifier).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub mgr: bool,
    pub cdn: bool,
    pub psa: bool,
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation { mgr: false, cdn: false, psa: false };
    pub const MGR: Ablation = Ablation { mgr: true, cdn: false, psa: false };
    pub const MGR_CDN: Ablation = Ablation { mgr: true, cdn: true, psa: false };
    pub const FULL: Ablation = Ablation { mgr: true, cdn: true, psa: true };
    /// Variants in the order they are reported.
    pub const LADDER: [Ablation; 4] = [Self::BASELINE, Self::MGR, Self::MGR_CDN, Self::FULL];

    pub fn validate(&self) -> Result<()> {
        if self.psa && !self.cdn {
            return Err(Error::Config(
                "ablation `psa` requires `cdn`: the semantic capsule has no consumer otherwise".into(),
            ));
        }
        Ok(())
    }

    pub fn branches(&self) -> &'static [BranchId] {
        if self.mgr {
            &BranchId::ALL
        } else {
            &BranchId::ALL[..1]
        }
    }

    /// Display name used in reports: `baseline`, `mgr`, `mgr+cdn`, ...
    pub fn label(&self) -> String {
        let on: Vec<&str> = [("mgr", self.mgr), ("cdn", self.cdn), ("psa", self.psa)]
            .into_iter()
            .filter_map(|(n, f)| f.then_some(n))
            .collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma- or plus-separated module list; `baseline`, `none` or empty for none.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "mgr" => a.mgr = true,
                "cdn" => a.cdn = true,
                "psa" => a.psa = true,
                "baseline" | "none" => {}
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation module `{other}` (expected mgr, cdn, psa or baseline)"
                    )))
                }
            }
        }
        Ok(a)
    }
}

impl Serialize for Ablation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Ablation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything that fixes the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub cdn: CdnConfig,
    pub psa: PsaConfig,
    pub ablation: Ablation,
    pub num_identities: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cdn.validate()?;
        self.psa.validate()?;
        self.ablation.validate()?;
        if self.num_identities < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 identities, got {}",
                self.num_identities
            )));
        }
        Ok(())
    }

    /// Length of the retrieval descriptor.
    pub fn descriptor_len(&self) -> usize {
        let per_branch = if self.ablation.cdn {
            self.cdn.attribute_capsules
        } else {
            self.backbone.out_channels
        };
        self.ablation.branches().len() * per_branch
    }
}

/// Creates every parameter of `spec` from `seed`.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    backbone::init_params(&spec.backbone, &mut store, &mut rng);
    let c = spec.backbone.out_channels;
    let a = spec.ablation;
    if a.cdn {
        for b in a.branches() {
            let prefix = spec.cdn.prefix(b.tag());
            if store.id(&format!("{prefix}.primary.weight")).is_none() {
                cdn::init_branch_params(&spec.cdn, &prefix, (BRANCH_SIZE, BRANCH_SIZE), c, a.psa, &mut store, &mut rng);
            }
            if a.psa {
                psa::init_params(&spec.psa, &format!("psa.{}", b.tag()), c, &mut store, &mut rng);
            }
        }
        let inputs = a.branches().len() * spec.cdn.attribute_capsules;
        cdn::init_identity_params(&spec.cdn, inputs, spec.num_identities, &mut store, &mut rng)?;
    } else {
        let d = spec.descriptor_len();
        store.insert(
            "classifier.weight",
            fan_in_uniform(&mut rng, &[spec.num_identities, d], 2 * d),
        );
        store.insert("classifier.bias", Tensor::zeros(vec![spec.num_identities]));
    }
    Ok(store)
}

/// Graph handles of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleVars {
    /// `(D,)` retrieval descriptor (unnormalized).
    pub descriptor: Var,
    /// `(M,)` identity-capsule lengths with CDN, classifier logits without.
    pub scores: Var,
    /// `(14, 14, 8)` part logits per active branch (PSA only).
    pub part_logits: Vec<(BranchId, Var)>,
    /// `(8,)` pooled semantic capsule per active branch (PSA only).
    pub semantic: Vec<Var>,
}

/// Records the forward pass of one prepared `(H, W, 3)` image.
pub fn forward_sample(g: &mut Graph, image: Var, spec: &ModelSpec) -> Result<SampleVars> {
    let a = spec.ablation;
    let fmap = backbone::toy_backbone_forward(g, image, &spec.backbone)?;
    let branches = mgr::partition_graph(g, fmap, a.branches())?;
    let mut part_logits = Vec::new();
    let mut semantic = Vec::new();
    if !a.cdn {
        let pooled: Vec<Var> = branches
            .iter()
            .map(|&b| g.global_avg_pool(b))
            .collect::<Result<_>>()?;
        let descriptor = g.concat(&pooled)?;
        let w = g.param("classifier.weight")?;
        let b = g.param("classifier.bias")?;
        let scores = g.linear(descriptor, w, b)?;
        return Ok(SampleVars {
            descriptor,
            scores,
            part_logits,
            semantic,
        });
    }
    let mut lengths = Vec::new();
    let mut capsules = Vec::new();
    for (&id, &branch) in a.branches().iter().zip(&branches) {
        let sem = if a.psa {
            let logits = psa::psa_graph(g, branch, &spec.psa, &format!("psa.{}", id.tag()))?;
            let s = g.softmax_mean_pool(logits)?;
            part_logits.push((id, logits));
            semantic.push(s);
            Some(s)
        } else {
            None
        };
        let out = cdn::attribute_graph(g, branch, sem, &spec.cdn, &spec.cdn.prefix(id.tag()))?;
        lengths.push(out.lengths);
        capsules.push(out.capsules);
    }
    let descriptor = g.concat(&lengths)?;
    let scores = cdn::identity_graph(g, &capsules, &spec.cdn)?.lengths;
    Ok(SampleVars {
        descriptor,
        scores,
        part_logits,
        semantic,
    })
}

/// Descriptor of one prepared image.
pub fn descriptor(params: &ParamStore, spec: &ModelSpec, image: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new(params);
    let x = g.input(image.clone());
    let out = forward_sample(&mut g, x, spec)?;
    Ok(g.value(out.descriptor).iter().copied().collect())
}

/// One training sample: prepared image and its full-resolution part map.
#[derive(Clone, Debug)]
pub struct SampleInput {
    pub image: Tensor,
    pub part_map: Option<PartMap>,
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub id: f64,
    pub tri: f64,
    pub part: f64,
}

fn rows(values: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = values.first().map_or(0, Vec::len);
    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    Array2::from_shape_vec((values.len(), d), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Forward pass, loss and (when `grads` is given) parameter gradients of a batch.
///
/// A batch without any valid triplet anchor contributes a zero triplet term.
pub fn batch_loss(
    params: &ParamStore,
    spec: &ModelSpec,
    loss_cfg: &LossConfig,
    batch: &[SampleInput],
    labels: &[usize],
    grads: Option<&mut GradStore>,
) -> Result<LossBreakdown> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::Shape(format!("{} samples, {} labels", batch.len(), labels.len())));
    }
    let mut graphs = Vec::with_capacity(batch.len());
    for s in batch {
        let mut g = Graph::new(params);
        let x = g.input(s.image.clone());
        let vars = forward_sample(&mut g, x, spec)?;
        graphs.push((g, vars));
    }
    let vec_of = |g: &Graph, v: Var| g.value(v).iter().copied().collect::<Vec<f64>>();
    let scores = rows(&graphs.iter().map(|(g, v)| vec_of(g, v.scores)).collect::<Vec<_>>())?;
    let descs = rows(&graphs.iter().map(|(g, v)| vec_of(g, v.descriptor)).collect::<Vec<_>>())?;

    let (l_id, g_scores) = if spec.ablation.cdn {
        losses::margin_loss(&scores, labels, &loss_cfg.margin)?
    } else {
        losses::softmax_cross_entropy(&scores, labels)?
    };
    let (l_tri, g_desc) = match losses::batch_hard_triplet(&descs, labels, &loss_cfg.triplet) {
        Ok(r) => r,
        Err(Error::DegenerateBatch) => (0.0, Array2::zeros(descs.dim())),
        Err(e) => return Err(e),
    };
    let (l_part, g_parts) = if spec.ablation.psa {
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for ((g, v), s) in graphs.iter().zip(batch) {
            let full = s
                .part_map
                .as_ref()
                .ok_or_else(|| Error::Dataset("part supervision needs a part map per image".into()))?;
            for &(id, var) in &v.part_logits {
                let l: Array3<f64> = g
                    .value(var)
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::Shape(e.to_string()))?;
                logits.push(l);
                targets.push(psa::part_target(full, id)?);
            }
        }
        let (l, gs) = losses::part_loss(&logits, &targets)?;
        (l, Some(gs))
    } else {
        (0.0, None)
    };
    let w = &loss_cfg.weights;
    let total = losses::total_loss(l_id, l_tri, l_part, w);
    let breakdown = LossBreakdown {
        total,
        id: l_id,
        tri: l_tri,
        part: l_part,
    };
    let Some(grads) = grads else {
        return Ok(breakdown);
    };
    let mut part_iter = g_parts.into_iter().flatten();
    for (i, (g, v)) in graphs.iter().enumerate() {
        let mut seeds = vec![
            (v.scores, (g_scores.row(i).to_owned() * w.lambda1).into_dyn()),
            (v.descriptor, (g_desc.row(i).to_owned() * w.lambda2).into_dyn()),
        ];
        for &(_, var) in &v.part_logits {
            let gp = part_iter.next().expect("one part gradient per branch");
            seeds.push((var, (gp * w.lambda3).into_dyn()));
        }
        g.backward(seeds, grads)?;
    }
    Ok(breakdown)
}
