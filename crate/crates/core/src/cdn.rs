//! Capsule layers that turn a branch map into a clothing-insensitive
//! descriptor made of capsule lengths.
//!
//! Per branch: a `2×2`/stride-2 convolution with `8·32` output channels is
//! regrouped into `3·3·32 = 288` eight-dimensional primary capsules (plus the
//! optional semantic capsule), squashed, transformed by per-pair matrices,
//! combined by softmax-normalized coupling coefficients, squashed again and
//! read out as lengths.

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::kernels::{squash_factor, squash_vjp};
use crate::autograd::{tensor, Graph, ParamStore, Tensor, Var};
use crate::backbone::fan_in_uniform;
use crate::error::{Error, Result};

/// Dimension of primary capsules (number of parallel convolutions).
pub const PRIMARY_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdnConfig {
    /// Channels of each parallel primary convolution.
    pub capsule_channels: usize,
    /// Attribute capsules per branch (`J_out`).
    pub attribute_capsules: usize,
    /// Dimension of attribute capsules (`d_out`).
    pub attribute_dim: usize,
    pub identity_dim: usize,
    /// 1 = static learned coupling; each extra pass adds agreement logits.
    pub routing_iterations: usize,
    pub squash_output: bool,
    /// Coupling logits of shape `(N, J)` instead of `(N,)`.
    pub per_output_coupling: bool,
    /// Share transforms across capsules of the same primary channel.
    pub share_transform_groups: bool,
    pub share_cdn_across_branches: bool,
}

impl Default for CdnConfig {
    fn default() -> Self {
        CdnConfig {
            capsule_channels: 32,
            attribute_capsules: 64,
            attribute_dim: 8,
            identity_dim: 8,
            routing_iterations: 1,
            squash_output: true,
            per_output_coupling: false,
            share_transform_groups: false,
            share_cdn_across_branches: false,
        }
    }
}

impl CdnConfig {
    /// `J_out = 1024`, `d_out = 24`.
    pub fn paper() -> Self {
        CdnConfig {
            attribute_capsules: 1024,
            attribute_dim: 24,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cdn.capsule_channels", self.capsule_channels),
            ("cdn.attribute_capsules", self.attribute_capsules),
            ("cdn.attribute_dim", self.attribute_dim),
            ("cdn.identity_dim", self.identity_dim),
            ("cdn.routing_iterations", self.routing_iterations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Parameter prefix of `branch_tag`'s capsule layers.
    pub fn prefix(&self, branch_tag: &str) -> String {
        if self.share_cdn_across_branches {
            "cdn.shared".into()
        } else {
            format!("cdn.{branch_tag}")
        }
    }
}

/// Capsule squash `v·‖v‖/(1+‖v‖²)`; zero maps to zero.
pub fn squash(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("squash input contains NaN".into()));
    }
    let sq: f64 = v.iter().map(|x| x * x).sum();
    if sq.is_infinite() {
        // saturated: unit vector in the direction of v
        let m = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let scaled: Vec<f64> = v.iter().map(|x| x / m).collect();
        let n = scaled.iter().map(|x| x * x).sum::<f64>().sqrt();
        return Ok(scaled.iter().map(|x| x / n).collect());
    }
    let f = squash_factor(sq);
    Ok(v.iter().map(|x| x * f).collect())
}

/// Jacobian `∂squash(v)_r / ∂v_c`, the same expression used by backprop.
pub fn squash_jacobian(v: &[f64]) -> Array2<f64> {
    let d = v.len();
    let mut jac = Array2::zeros((d, d));
    let mut row = vec![0.0; d];
    for r in 0..d {
        let mut e = vec![0.0; d];
        e[r] = 1.0;
        row.iter_mut().for_each(|x| *x = 0.0);
        squash_vjp(v, &e, &mut row);
        jac.row_mut(r).assign(&Array1::from(row.clone()));
    }
    jac
}

/// Primary capsule count for a `(h, w)` branch map.
pub fn primary_count(cfg: &CdnConfig, (h, w): (usize, usize)) -> usize {
    (h / 2) * (w / 2) * cfg.capsule_channels
}

/// Transform group of each input capsule: its primary channel, with the
/// semantic capsule in a group of its own.
fn transform_groups(cfg: &CdnConfig, primary: usize, with_semantic: bool) -> Option<Vec<usize>> {
    cfg.share_transform_groups.then(|| {
        let mut g: Vec<usize> = (0..primary).map(|i| i % cfg.capsule_channels).collect();
        if with_semantic {
            g.push(cfg.capsule_channels);
        }
        g
    })
}

fn transform_slots(cfg: &CdnConfig, inputs: usize, with_semantic: bool) -> usize {
    if cfg.share_transform_groups {
        cfg.capsule_channels + usize::from(with_semantic)
    } else {
        inputs
    }
}

fn init_capsule_layer(
    cfg: &CdnConfig,
    prefix: &str,
    slots: usize,
    inputs: usize,
    (outputs, d_out, d_in): (usize, usize, usize),
    store: &mut ParamStore,
    rng: &mut impl Rng,
) {
    // U(±sqrt(3·N/d_in)): the softmax-weighted sum over N inputs starts with
    // roughly unit norm for unit-length inputs, keeping squash off its flat
    // region near zero
    let bound = (3.0 * inputs as f64 / d_in as f64).sqrt();
    let n = slots * outputs * d_out * d_in;
    store.insert(
        format!("{prefix}.transform"),
        tensor(&[slots, outputs, d_out, d_in], (0..n).map(|_| rng.gen_range(-bound..bound)).collect()),
    );
    let coupling = if cfg.per_output_coupling {
        Tensor::zeros(vec![inputs, outputs])
    } else {
        Tensor::zeros(vec![inputs])
    };
    store.insert(format!("{prefix}.coupling"), coupling);
}

/// Creates the primary convolution and attribute-capsule parameters of one branch.
pub fn init_branch_params(
    cfg: &CdnConfig,
    prefix: &str,
    branch_size: (usize, usize),
    in_channels: usize,
    with_semantic: bool,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) {
    let cout = PRIMARY_DIM * cfg.capsule_channels;
    store.insert(
        format!("{prefix}.primary.weight"),
        fan_in_uniform(rng, &[2, 2, in_channels, cout], 4 * in_channels),
    );
    store.insert(format!("{prefix}.primary.bias"), Tensor::zeros(vec![cout]));
    let primary = primary_count(cfg, branch_size);
    let inputs = primary + usize::from(with_semantic);
    init_capsule_layer(
        cfg,
        &format!("{prefix}.attr"),
        transform_slots(cfg, inputs, with_semantic),
        inputs,
        (cfg.attribute_capsules, cfg.attribute_dim, PRIMARY_DIM),
        store,
        rng,
    );
}

/// Creates the identity-capsule layer over `num_inputs` attribute capsules.
pub fn init_identity_params(
    cfg: &CdnConfig,
    num_inputs: usize,
    num_identities: usize,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<()> {
    if num_identities < 2 {
        return Err(Error::Config(format!(
            "identity capsules need at least 2 identities, got {num_identities}"
        )));
    }
    let flat = CdnConfig {
        share_transform_groups: false,
        ..cfg.clone()
    };
    init_capsule_layer(
        &flat,
        "cdn.identity",
        num_inputs,
        num_inputs,
        (num_identities, cfg.identity_dim, cfg.attribute_dim),
        store,
        rng,
    );
    Ok(())
}

/// `(h, w, C)` branch map → `(288, 8)` primary capsules (unsquashed).
///
/// Capsule `p·32 + c` collects channel `c` of every parallel map at spatial
/// site `p`; its component `m` is output channel `m·32 + c`.
pub fn primary_capsules_graph(g: &mut Graph, branch: Var, cfg: &CdnConfig, prefix: &str) -> Result<Var> {
    let s = g.shape(branch).to_vec();
    if s.len() != 3 || s[2] == 0 {
        return Err(Error::Shape(format!("branch map must be (H, W, C>0), got {s:?}")));
    }
    let w = g.param(&format!("{prefix}.primary.weight"))?;
    let b = g.param(&format!("{prefix}.primary.bias"))?;
    let conv = g.conv2d(branch, w, Some(b), 2, (0, 0, 0, 0))?;
    let cs = g.shape(conv).to_vec();
    let ch = cfg.capsule_channels;
    let sites = cs[0] * cs[1];
    let mut index = Vec::with_capacity(sites * ch * PRIMARY_DIM);
    for p in 0..sites {
        for c in 0..ch {
            for m in 0..PRIMARY_DIM {
                index.push(p * PRIMARY_DIM * ch + m * ch + c);
            }
        }
    }
    g.gather(conv, index, &[sites * ch, PRIMARY_DIM])
}

/// Output of one capsule layer.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleOutput {
    /// `(J, d)` output capsules (squashed when configured).
    pub capsules: Var,
    /// `(J,)` capsule lengths.
    pub lengths: Var,
}

/// Transform, couple and read out `inputs: (N, d_in)` (already squashed).
///
/// `transform: (G, J, d_out, d_in)`, `coupling: (N,)` or `(N, J)` logits.
pub fn capsule_layer_graph(
    g: &mut Graph,
    inputs: Var,
    transform: Var,
    coupling: Var,
    groups: Option<Vec<usize>>,
    cfg: &CdnConfig,
) -> Result<CapsuleOutput> {
    let pred = g.capsule_predict(inputs, transform, groups)?;
    let j = g.shape(pred)[1];
    let c = g.softmax_axis0(coupling)?;
    let mut s = g.weighted_sum(pred, c)?;
    if cfg.routing_iterations > 1 {
        let mut logits = if g.shape(coupling).len() == 1 {
            g.tile_cols(coupling, j)?
        } else {
            coupling
        };
        for _ in 1..cfg.routing_iterations {
            let out = g.squash_rows(s)?;
            let a = g.agreement(pred, out)?;
            logits = g.add(logits, a)?;
            let c = g.softmax_axis0(logits)?;
            s = g.weighted_sum(pred, c)?;
        }
    }
    let capsules = if cfg.squash_output { g.squash_rows(s)? } else { s };
    let lengths = g.row_norms(capsules)?;
    Ok(CapsuleOutput { capsules, lengths })
}

/// Attribute capsules of one branch, with the optional `(8,)` semantic capsule appended.
pub fn attribute_graph(
    g: &mut Graph,
    branch: Var,
    semantic: Option<Var>,
    cfg: &CdnConfig,
    prefix: &str,
) -> Result<CapsuleOutput> {
    let primary = primary_capsules_graph(g, branch, cfg, prefix)?;
    let n_primary = g.shape(primary)[0];
    let bank = match semantic {
        Some(sem) => {
            let row = g.reshape(sem, &[1, PRIMARY_DIM])?;
            g.concat(&[primary, row])?
        }
        None => primary,
    };
    let bank = g.squash_rows(bank)?;
    let w = g.param(&format!("{prefix}.attr.transform"))?;
    let u = g.param(&format!("{prefix}.attr.coupling"))?;
    let groups = transform_groups(cfg, n_primary, semantic.is_some());
    capsule_layer_graph(g, bank, w, u, groups, cfg)
}

/// Identity capsule lengths `(M,)` over the concatenated attribute capsules.
pub fn identity_graph(g: &mut Graph, attributes: &[Var], cfg: &CdnConfig) -> Result<CapsuleOutput> {
    let all = g.concat(attributes)?;
    let w = g.param("cdn.identity.transform")?;
    let u = g.param("cdn.identity.coupling")?;
    if g.shape(w)[1] < 2 {
        return Err(Error::Config("identity capsules need at least 2 identities".into()));
    }
    capsule_layer_graph(g, all, w, u, None, cfg)
}

fn run_layer(
    bank: &Array2<f64>,
    transform: &Array4<f64>,
    coupling: &ArrayD<f64>,
    cfg: &CdnConfig,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let v = g.input(bank.clone().into_dyn());
    let w = g.input(transform.clone().into_dyn());
    let u = g.input(coupling.clone());
    let out = capsule_layer_graph(&mut g, v, w, u, None, cfg)?;
    let caps = g.value(out.capsules).clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?;
    let lens = g.value(out.lengths).clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?;
    Ok((caps, lens))
}

/// Attribute capsules `(J, d_out)` and their lengths for a squashed bank `(N, d_in)`.
pub fn attribute_capsules(
    bank: &Array2<f64>,
    transform: &Array4<f64>,
    coupling: &ArrayD<f64>,
    cfg: &CdnConfig,
) -> Result<(Array2<f64>, Array1<f64>)> {
    run_layer(bank, transform, coupling, cfg)
}

/// Identity-capsule lengths `(M,)` over the concatenation of per-branch attribute capsules.
pub fn identity_capsules(
    branch_capsules: &[Array2<f64>],
    transform: &Array4<f64>,
    coupling: &ArrayD<f64>,
    cfg: &CdnConfig,
) -> Result<Array1<f64>> {
    if transform.dim().1 < 2 {
        return Err(Error::Config("identity capsules need at least 2 identities".into()));
    }
    let views: Vec<_> = branch_capsules.iter().map(|a| a.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(run_layer(&all, transform, coupling, cfg)?.1)
}
