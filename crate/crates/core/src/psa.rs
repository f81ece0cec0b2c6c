//! Per-branch part segmentation head and its pooled semantic capsule.
//!
//! `(7, 7, C)` → 2×2/stride-2 transposed conv → `(14, 14, hidden)` →
//! instance norm + ReLU → 2×2 same-padded conv → `(14, 14, 8)` part logits.

use ndarray::{Array1, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::backbone::fan_in_uniform;
use crate::dataset::{PartMap, NUM_PARTS};
use crate::error::{Error, Result};
use crate::mgr::{branch_row_mask, BranchId};

/// Spatial size of the part logits and targets.
pub const PART_GRID: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsaConfig {
    /// Channels after the transposed convolution.
    pub hidden_channels: usize,
    pub norm_eps: f64,
}

impl Default for PsaConfig {
    fn default() -> Self {
        PsaConfig {
            hidden_channels: 32,
            norm_eps: 1e-5,
        }
    }
}

impl PsaConfig {
    pub fn paper() -> Self {
        PsaConfig {
            hidden_channels: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 {
            return Err(Error::Config("psa.hidden_channels must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("psa.norm_eps must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_params(
    cfg: &PsaConfig,
    prefix: &str,
    in_channels: usize,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) {
    let h = cfg.hidden_channels;
    store.insert(
        format!("{prefix}.deconv.weight"),
        fan_in_uniform(rng, &[2, 2, in_channels, h], in_channels),
    );
    store.insert(format!("{prefix}.deconv.bias"), Tensor::zeros(vec![h]));
    store.insert(format!("{prefix}.norm.gamma"), Tensor::ones(vec![h]));
    store.insert(format!("{prefix}.norm.beta"), Tensor::zeros(vec![h]));
    store.insert(
        format!("{prefix}.conv.weight"),
        fan_in_uniform(rng, &[2, 2, h, NUM_PARTS], 4 * h),
    );
    store.insert(format!("{prefix}.conv.bias"), Tensor::zeros(vec![NUM_PARTS]));
}

/// Part logits `(2h, 2w, 8)` of a branch map `(h, w, C)`.
pub fn psa_graph(g: &mut Graph, branch: Var, cfg: &PsaConfig, prefix: &str) -> Result<Var> {
    let dw = g.param(&format!("{prefix}.deconv.weight"))?;
    let db = g.param(&format!("{prefix}.deconv.bias"))?;
    let up = g.deconv(branch, dw, Some(db))?;
    let gamma = g.param(&format!("{prefix}.norm.gamma"))?;
    let beta = g.param(&format!("{prefix}.norm.beta"))?;
    let normed = g.instance_norm(up, gamma, beta, cfg.norm_eps)?;
    let act = g.relu(normed);
    let cw = g.param(&format!("{prefix}.conv.weight"))?;
    let cb = g.param(&format!("{prefix}.conv.bias"))?;
    // even kernel: one extra row/column of zeros at the bottom/right keeps the size
    g.conv2d(act, cw, Some(cb), 1, (0, 0, 1, 1))
}

/// Evaluates the head on one `(h, w, C)` branch map.
pub fn psa_forward(branch: &Array3<f64>, params: &ParamStore, cfg: &PsaConfig, prefix: &str) -> Result<Array3<f64>> {
    let mut g = Graph::new(params);
    let x = g.input(branch.clone().into_dyn());
    let out = psa_graph(&mut g, x, cfg, prefix)?;
    g.value(out)
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Per-pixel softmax over parts, averaged over pixels: an 8-vector summing to 1.
pub fn pool_semantic(logits: &Array3<f64>) -> Result<Array1<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("part logits".into()));
    }
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let x = g.input(logits.clone().into_dyn());
    let p = g.softmax_mean_pool(x)?;
    g.value(p)
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Crops a full-resolution part map to `branch`'s pixel rows and resamples it to 14×14.
pub fn part_target(full: &PartMap, branch: BranchId) -> Result<PartMap> {
    let rows = branch_row_mask(branch, full.size().0);
    Ok(full
        .crop_rows(rows.start, rows.end)?
        .resize_nearest((PART_GRID, PART_GRID)))
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::{tensor, GradStore};
    use crate::gradcheck::{central_difference, relative_error};

    fn setup(cfg: &PsaConfig, cin: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(cfg, "psa.f1", cin, &mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn random(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn head_output_is_14_by_14_by_8() {
        let cfg = PsaConfig::default();
        let out = psa_forward(&random((7, 7, 16), 1), &setup(&cfg, 16, 0), &cfg, "psa.f1").unwrap();
        assert_eq!(out.dim(), (14, 14, 8));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let cfg = PsaConfig::default();
        let out = psa_forward(&Array3::zeros((7, 7, 4)), &setup(&cfg, 4, 1), &cfg, "psa.f1").unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_conv_scatters_kernel_by_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((2, 2, 3), |_| rng.gen_range(-1.0..1.0));
        let w = ndarray::Array4::from_shape_fn((2, 2, 3, 4), |_| rng.gen_range(-1.0..1.0));
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let xv = g.input(x.clone().into_dyn());
        let wv = g.input(w.clone().into_dyn());
        let y = g.deconv(xv, wv, None).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), [4, 4, 4]);
        for iy in 0..2 {
            for ix in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        for o in 0..4 {
                            let mut acc = 0.0;
                            for c in 0..3 {
                                acc += x[[iy, ix, c]] * w[[dy, dx, c, o]];
                            }
                            let got = y[[2 * iy + dy, 2 * ix + dx, o]];
                            assert!((got - acc).abs() < 1e-14);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn semantic_pooling_cases() {
        let uniform = pool_semantic(&Array3::zeros((14, 14, 8))).unwrap();
        assert!(uniform.iter().all(|&v| (v - 0.125).abs() < 1e-15));

        let mut dominant = Array3::zeros((14, 14, 8));
        dominant.slice_mut(ndarray::s![.., .., 2]).fill(1e4);
        let p = pool_semantic(&dominant).unwrap();
        for (k, &v) in p.iter().enumerate() {
            let expect = if k == 2 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-6);
        }

        let logits = random((14, 14, 8), 3) * 5.0;
        let p = pool_semantic(&logits).unwrap();
        let mut oracle = [0.0; 8];
        for y in 0..14 {
            for x in 0..14 {
                let m = (0..8).map(|k| logits[[y, x, k]]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..8).map(|k| (logits[[y, x, k]] - m).exp()).sum();
                for k in 0..8 {
                    oracle[k] += (logits[[y, x, k]] - m).exp() / z / 196.0;
                }
            }
        }
        for k in 0..8 {
            assert!((p[k] - oracle[k]).abs() < 1e-12);
        }
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert!(pool_semantic(&Array3::from_elem((2, 2, 8), f64::NAN)).is_err());
    }

    #[test]
    fn part_targets_crop_branch_rows() {
        let labels = Array2::from_shape_fn((64, 32), |(y, x)| if y >= 32 { 6 } else { (x % 3) as u8 });
        let map = PartMap::new(labels).unwrap();
        let whole = part_target(&map, BranchId::F1).unwrap();
        assert_eq!(whole, map.resize_nearest((14, 14)));
        let bottom = part_target(&map, BranchId::F3).unwrap();
        assert_eq!(bottom.size(), (14, 14));
        assert!(bottom.labels.iter().all(|&l| l == 6));
        for b in BranchId::ALL {
            let t = part_target(&map, b).unwrap();
            assert!(t.label_set().iter().all(|l| map.label_set().contains(l)));
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let cfg = PsaConfig {
            hidden_channels: 6,
            ..PsaConfig::default()
        };
        let mut store = setup(&cfg, 5, 4);
        // non-trivial affine so every path of the norm is exercised
        let gid = store.id("psa.f1.norm.gamma").unwrap();
        store.value_mut(gid).iter_mut().enumerate().for_each(|(i, v)| *v = 0.7 + 0.1 * i as f64);
        let x = random((7, 7, 5), 5).into_dyn();
        let proj = random((14, 14, 8), 6).into_dyn();
        let objective = |store: &ParamStore, x: &Tensor| {
            let mut g = Graph::new(store);
            let xv = g.input(x.clone());
            let out = psa_graph(&mut g, xv, &cfg, "psa.f1").unwrap();
            g.value(out).iter().zip(proj.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grads = GradStore::new(&store);
        let input_grad: Vec<f64> = {
            let mut g = Graph::new(&store);
            let xv = g.input_with_grad(x.clone());
            let out = psa_graph(&mut g, xv, &cfg, "psa.f1").unwrap();
            let ig = g.backward(vec![(out, proj.clone())], &mut grads).unwrap();
            ig.get(xv).unwrap().iter().copied().collect()
        };
        let xs: Vec<f64> = x.iter().copied().collect();
        let numeric = central_difference(|p| objective(&store, &tensor(&[7, 7, 5], p.to_vec())), &xs, 1e-5);
        assert!(relative_error(&input_grad, &numeric) < 1e-4);
        for name in ["psa.f1.deconv.weight", "psa.f1.norm.gamma", "psa.f1.norm.beta", "psa.f1.conv.weight"] {
            let id = store.id(name).unwrap();
            let analytic: Vec<f64> = grads.get(id).unwrap().iter().take(24).copied().collect();
            let base: Vec<f64> = store.value(id).iter().take(24).copied().collect();
            let numeric = central_difference(
                |p| {
                    for (d, s) in store.value_mut(id).iter_mut().zip(p) {
                        *d = *s;
                    }
                    objective(&store, &x)
                },
                &base,
                1e-5,
            );
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
