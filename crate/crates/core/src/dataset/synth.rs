//! Synthetic pedestrians whose identity lives in body shape and whose
//! outfit lives in colour.
//!
//! Every identity gets a fixed silhouette (head radius, torso width and
//! length, arm and leg angles). Every `(identity, clothes)` pair gets its own
//! top and bottom colours. Background tint and pixel noise change per image.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{ManifestFile, ManifestRecord, Split};
use super::partmap::PartMap;
use super::{load_manifest, DatasetManifest};
use crate::error::{Error, Result};

pub const PART_BACKGROUND: u8 = 0;
pub const PART_HEAD: u8 = 1;
pub const PART_TORSO: u8 = 2;
pub const PART_LEFT_ARM: u8 = 3;
pub const PART_RIGHT_ARM: u8 = 4;
pub const PART_LEFT_LEG: u8 = 5;
pub const PART_RIGHT_LEG: u8 = 6;
pub const PART_FEET: u8 = 7;

const SKIN: [f64; 3] = [0.85, 0.67, 0.55];
const SHOES: [f64; 3] = [0.12, 0.10, 0.10];
const FOREGROUND_NOISE: f64 = 0.03;
const BACKGROUND_NOISE: f64 = 0.08;
const COLOR_JITTER: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub clothes_per_id: usize,
    pub images_per_combo: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub seed: u64,
    pub split: SynthSplit,
    /// Minimum RGB distance between two outfits of one identity.
    pub min_clothes_distance: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_ids: 8,
            clothes_per_id: 2,
            images_per_combo: 16,
            image_size: (64, 64),
            seed: 0,
            split: SynthSplit::default(),
            min_clothes_distance: 0.35,
        }
    }
}

/// How generated images are divided into train, query and gallery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthSplit {
    /// The first `num_ids - holdout` identities train; the rest supply the
    /// gallery (outfit 0) and queries (other outfits).
    DisjointIds { holdout: usize },
    /// Every identity trains in outfit 0, and the first half of the identities
    /// also train in their other outfits. For the second half those other
    /// outfits are never trained on and become the queries; the last
    /// `gallery_per_id` outfit-0 images of each such identity form the gallery.
    UnseenClothes { gallery_per_id: usize },
}

impl Default for SynthSplit {
    fn default() -> Self {
        SynthSplit::UnseenClothes { gallery_per_id: 4 }
    }
}

impl SynthSplit {
    fn assign(self, spec: &SynthSpec, id: usize, clothes: usize, index: usize) -> Split {
        match self {
            SynthSplit::DisjointIds { holdout } => {
                if id + holdout < spec.num_ids {
                    Split::Train
                } else if clothes == 0 {
                    Split::Gallery
                } else {
                    Split::Query
                }
            }
            SynthSplit::UnseenClothes { gallery_per_id } => {
                let bridge = id < spec.num_ids / 2;
                if bridge || (clothes == 0 && index + gallery_per_id < spec.images_per_combo) {
                    Split::Train
                } else if clothes == 0 {
                    Split::Gallery
                } else {
                    Split::Query
                }
            }
        }
    }
}

/// Identity-determined body geometry, as fractions of the image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyShape {
    pub head_radius: f64,
    pub torso_half_width: f64,
    pub torso_length: f64,
    pub arm_angle: f64,
    pub leg_angle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outfit {
    pub top: [f64; 3],
    pub bottom: [f64; 3],
}

fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    // splitmix64 over the tag sequence
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        z = z.wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    ChaCha8Rng::seed_from_u64(z)
}

/// Stratified shapes: along every parameter axis the identities occupy
/// distinct strata, so no two identities share a silhouette.
pub fn body_shapes(num_ids: usize, seed: u64) -> Vec<BodyShape> {
    let mut rng = stream(seed, &[1]);
    let ranges = [
        (0.055, 0.100),
        (0.090, 0.200),
        (0.240, 0.360),
        (0.100, 0.900),
        (0.020, 0.300),
    ];
    let columns: Vec<Vec<f64>> = ranges
        .iter()
        .map(|&(lo, hi)| {
            let mut strata: Vec<usize> = (0..num_ids).collect();
            strata.shuffle(&mut rng);
            strata
                .into_iter()
                .map(|s| {
                    let u: f64 = rng.gen_range(0.25..0.75);
                    lo + (hi - lo) * (s as f64 + u) / num_ids as f64
                })
                .collect()
        })
        .collect();
    (0..num_ids)
        .map(|i| BodyShape {
            head_radius: columns[0][i],
            torso_half_width: columns[1][i],
            torso_length: columns[2][i],
            arm_angle: columns[3][i],
            leg_angle: columns[4][i],
        })
        .collect()
}

fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Palette indices of the outfits of `identity`: `(identity + c) mod len`.
/// Outfits are worn by several people and a changed outfit is the usual
/// outfit of a neighbour, so colour never names a person and often names the
/// wrong one.
fn wardrobe_indices(identity: usize, count: usize, len: usize) -> Vec<usize> {
    (0..count).map(|c| (identity + c) % len).collect()
}

/// Outfits shared across the population: one per pair of identities, at least
/// one per outfit slot. Every outfit is then worn by a training identity in
/// each of its slots, so colour cannot stand in for identity. Top colours of outfits that meet in one wardrobe are at
/// least `min_distance` plus the jitter/noise margin apart.
pub fn palette(num_ids: usize, clothes_per_id: usize, min_distance: f64, seed: u64) -> Result<Vec<Outfit>> {
    let size = (num_ids / 2).max(clothes_per_id).max(1);
    let mut conflicts = vec![Vec::new(); size];
    for id in 0..num_ids {
        let w = wardrobe_indices(id, clothes_per_id, size);
        for &a in &w {
            conflicts[a].extend(w.iter().copied().filter(|&b| b < a));
        }
    }
    let mut rng = stream(seed, &[2]);
    let margin = 2.0 * (COLOR_JITTER + FOREGROUND_NOISE);
    let mut out: Vec<Outfit> = Vec::with_capacity(size);
    let mut attempts = 0;
    while out.len() < size {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidInput(format!(
                "cannot place {clothes_per_id} outfit colours {min_distance} apart"
            )));
        }
        let top = [0; 3].map(|_| rng.gen_range(0.05..0.95));
        let bottom = [0; 3].map(|_| rng.gen_range(0.05..0.95));
        if conflicts[out.len()]
            .iter()
            .all(|&b| color_distance(&out[b].top, &top) >= min_distance + margin)
        {
            out.push(Outfit { top, bottom });
        }
    }
    Ok(out)
}

pub fn wardrobe(identity: usize, count: usize, palette: &[Outfit]) -> Vec<Outfit> {
    wardrobe_indices(identity, count, palette.len())
        .into_iter()
        .map(|i| palette[i])
        .collect()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Part labels of a body rendered at `(height, width)`.
pub fn silhouette(shape: &BodyShape, (h, w): (usize, usize)) -> PartMap {
    let (hf, wf) = (h as f64, w as f64);
    let cx = wf / 2.0;
    let head_r = shape.head_radius * hf;
    let head_cy = 0.05 * hf + head_r;
    let torso_top = head_cy + 0.95 * head_r;
    let torso_bottom = torso_top + shape.torso_length * hf;
    let torso_hw = shape.torso_half_width * wf;
    let arm_r = 0.035 * wf;
    let arm_len = 0.30 * hf;
    let leg_r = 0.045 * wf;
    let foot_y = 0.90 * hf;
    let foot_r = 0.04 * hf;

    let mut labels = Array2::from_elem((h, w), PART_BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut label = PART_BACKGROUND;
            for (side, leg_label) in [(-1.0, PART_LEFT_LEG), (1.0, PART_RIGHT_LEG)] {
                let hip = (cx + side * 0.45 * torso_hw, torso_bottom);
                let len = (foot_y - torso_bottom) / shape.leg_angle.cos();
                let end = (
                    hip.0 + side * len * shape.leg_angle.sin(),
                    hip.1 + len * shape.leg_angle.cos(),
                );
                if segment_distance(p, hip, end) <= leg_r {
                    label = leg_label;
                }
                let foot = (end.0 + side * 0.02 * wf, end.1 + 0.02 * hf);
                if ((p.0 - foot.0).powi(2) + (p.1 - foot.1).powi(2)).sqrt() <= foot_r {
                    label = PART_FEET;
                }
            }
            if (p.0 - cx).abs() <= torso_hw && p.1 >= torso_top && p.1 <= torso_bottom {
                label = PART_TORSO;
            }
            for (side, arm_label) in [(-1.0, PART_LEFT_ARM), (1.0, PART_RIGHT_ARM)] {
                let shoulder = (cx + side * (torso_hw + 0.5 * arm_r), torso_top + 0.03 * hf);
                let hand = (
                    shoulder.0 + side * arm_len * shape.arm_angle.sin(),
                    shoulder.1 + arm_len * shape.arm_angle.cos(),
                );
                if segment_distance(p, shoulder, hand) <= arm_r {
                    label = arm_label;
                }
            }
            if ((p.0 - cx).powi(2) + (p.1 - head_cy).powi(2)).sqrt() <= head_r {
                label = PART_HEAD;
            }
            labels[[y, x]] = label;
        }
    }
    PartMap { labels }
}

/// Renders one RGB image (values in `[0, 1]`, `(h, w, 3)` row-major).
pub fn render(parts: &PartMap, outfit: &Outfit, rng: &mut impl Rng) -> Vec<f64> {
    let (h, w) = parts.size();
    let gray: f64 = rng.gen_range(0.25..0.75);
    let background = [0; 3].map(|_| gray + rng.gen_range(-0.05..0.05));
    let mut jitter = |c: [f64; 3]| c.map(|v| v + rng.gen_range(-COLOR_JITTER..COLOR_JITTER));
    let skin = jitter(SKIN);
    let top = jitter(outfit.top);
    let bottom = jitter(outfit.bottom);
    let shoes = jitter(SHOES);
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (base, noise) = match parts.labels[[y, x]] {
                PART_BACKGROUND => (background, BACKGROUND_NOISE),
                PART_HEAD | PART_LEFT_ARM | PART_RIGHT_ARM => (skin, FOREGROUND_NOISE),
                PART_TORSO => (top, FOREGROUND_NOISE),
                PART_FEET => (shoes, FOREGROUND_NOISE),
                _ => (bottom, FOREGROUND_NOISE),
            };
            for c in base {
                out.push((c + rng.gen_range(-noise..noise)).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn to_png(rgb: &[f64], (h, w): (usize, usize), path: &Path) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches size");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
}

pub fn image_file_name(id: usize, clothes: usize, index: usize) -> String {
    format!("{id:03}_{clothes:02}_{index:03}.png")
}

/// Writes `images/`, `parts/` and `manifest.json` under `out_dir` and
/// returns the loaded manifest.
pub fn generate_synthetic_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let (h, w) = spec.image_size;
    if h < 32 || w < 32 {
        return Err(Error::InvalidInput(format!(
            "image size {h}x{w} is smaller than 32x32"
        )));
    }
    if spec.num_ids == 0 || spec.clothes_per_id == 0 || spec.images_per_combo == 0 {
        return Err(Error::InvalidInput("all dataset counts must be at least 1".into()));
    }
    if let SynthSplit::DisjointIds { holdout } = spec.split {
        if holdout > spec.num_ids {
            return Err(Error::InvalidInput(format!(
                "cannot hold out {holdout} of {} identities",
                spec.num_ids
            )));
        }
    }

    let images_dir = out_dir.join("images");
    let parts_dir = out_dir.join("parts");
    for d in [&images_dir, &parts_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let shapes = body_shapes(spec.num_ids, spec.seed);
    let palette = palette(spec.num_ids, spec.clothes_per_id, spec.min_clothes_distance, spec.seed)?;
    let mut records = Vec::new();
    for (id, shape) in shapes.iter().enumerate() {
        let parts = silhouette(shape, spec.image_size);
        let wardrobe = wardrobe(id, spec.clothes_per_id, &palette);
        for (clothes, outfit) in wardrobe.iter().enumerate() {
            for index in 0..spec.images_per_combo {
                let name = image_file_name(id, clothes, index);
                let mut rng = stream(spec.seed, &[3, id as u64, clothes as u64, index as u64]);
                let rgb = render(&parts, outfit, &mut rng);
                to_png(&rgb, spec.image_size, &images_dir.join(&name))?;
                parts.save_png(&parts_dir.join(&name))?;
                let split = spec.split.assign(spec, id, clothes, index);
                records.push(ManifestRecord {
                    path: format!("images/{name}"),
                    id: id as u64,
                    cam: (clothes * 2 + index % 2) as u64,
                    clothes: clothes as u64,
                    split,
                });
            }
        }
    }
    let manifest_path = out_dir.join("manifest.json");
    ManifestFile {
        image_size: [h, w],
        records,
    }
    .write(&manifest_path)?;
    load_manifest(&manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_rgb, read_part_map};

    #[test]
    fn shapes_are_distinct_per_identity() {
        let shapes = body_shapes(8, 3);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(shapes[i].torso_half_width, shapes[j].torso_half_width);
            }
        }
    }

    #[test]
    fn silhouette_covers_all_parts() {
        let shape = body_shapes(1, 0)[0];
        let parts = silhouette(&shape, (64, 64));
        assert_eq!(parts.label_set(), (0..8).collect::<Vec<u8>>());
    }

    #[test]
    fn outfits_respect_minimum_distance() {
        let p = palette(20, 3, 0.35, 9).unwrap();
        for id in 0..20 {
            let o = wardrobe(id, 3, &p);
            for a in 0..3 {
                for b in a + 1..3 {
                    assert!(color_distance(&o[a].top, &o[b].top) >= 0.35);
                }
            }
        }
        assert!(palette(4, 40, 0.35, 9).is_err());
    }

    #[test]
    fn colours_are_shared_between_identities() {
        let p = palette(8, 2, 0.35, 0).unwrap();
        for id in 0..8 {
            let mine = wardrobe(id, 2, &p);
            let others = (0..8).filter(|&j| j != id).flat_map(|j| wardrobe(j, 2, &p));
            let shared: Vec<_> = others.filter(|o| mine.contains(o)).collect();
            assert_eq!(shared.len(), 6);
        }
    }

    #[test]
    fn rejects_tiny_images_and_zero_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            image_size: (31, 64),
            ..SynthSpec::default()
        };
        assert!(generate_synthetic_dataset(&spec, dir.path()).is_err());
        let spec = SynthSpec {
            images_per_combo: 0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic_dataset(&spec, dir.path()).is_err());
    }

    #[test]
    fn identity_shape_and_clothes_colour_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_ids: 3,
            images_per_combo: 3,
            image_size: (48, 40),
            split: SynthSplit::DisjointIds { holdout: 1 },
            ..SynthSpec::default()
        };
        let m = generate_synthetic_dataset(&spec, dir.path()).unwrap();
        assert_eq!(m.records.len(), 18);
        assert_eq!(m.num_identities, 2);
        for a in &m.records {
            for b in &m.records {
                if a.identity_id != b.identity_id {
                    continue;
                }
                let pa = read_part_map(&m.part_map_path(a, "parts")).unwrap();
                let pb = read_part_map(&m.part_map_path(b, "parts")).unwrap();
                let mask = |p: &PartMap| p.labels.mapv(|l| l != 0);
                assert_eq!(mask(&pa), mask(&pb));
                if a.clothes_id != b.clothes_id {
                    let ca = torso_mean(&load_rgb(&a.image_path, (48, 40)).unwrap(), &pa);
                    let cb = torso_mean(&load_rgb(&b.image_path, (48, 40)).unwrap(), &pb);
                    assert!(color_distance(&ca, &cb) >= spec.min_clothes_distance);
                }
            }
        }
    }

    #[test]
    fn unseen_clothes_split() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_ids: 4,
            images_per_combo: 5,
            image_size: (32, 32),
            split: SynthSplit::UnseenClothes { gallery_per_id: 2 },
            ..SynthSpec::default()
        };
        let m = generate_synthetic_dataset(&spec, dir.path()).unwrap();
        assert_eq!(m.num_identities, 4);
        let count = |s: Split| m.split(s).count();
        // ids 0, 1: 2 outfits × 5; ids 2, 3: 3 outfit-0 images each
        assert_eq!(count(Split::Train), 20 + 6);
        assert_eq!(count(Split::Gallery), 4);
        assert_eq!(count(Split::Query), 10);
        let trained: std::collections::HashSet<_> =
            m.split(Split::Train).map(|r| (r.identity_id, r.clothes_id)).collect();
        for q in m.split(Split::Query) {
            assert!(!trained.contains(&(q.identity_id, q.clothes_id)));
            assert!(trained.contains(&(q.identity_id, 0)));
        }
    }

    fn torso_mean(img: &ndarray::Array3<f64>, parts: &PartMap) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for ((y, x), &l) in parts.labels.indexed_iter() {
            if l == PART_TORSO {
                for c in 0..3 {
                    acc[c] += img[[y, x, c]];
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n)
    }
}
