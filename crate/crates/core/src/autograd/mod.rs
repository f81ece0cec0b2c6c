//! A small reverse-mode tape over dense `f64` tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every operation
//! applied during a forward pass, and replays them backwards to accumulate
//! parameter gradients into a [`GradStore`]. One graph is built per sample.

pub mod kernels;

use std::collections::HashMap;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use kernels::ConvGeom;

pub type Tensor = ArrayD<f64>;

pub(crate) fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("tensor shape and data length agree")
}

fn slice(t: &Tensor) -> &[f64] {
    t.as_slice().expect("tensors are kept in standard layout")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let value = value.as_standard_layout().into_owned();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return ParamId(i);
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.values.push(value);
        ParamId(i)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.values[id.0])
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Name of the first parameter holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }
}

/// Parameter gradients aligned with a [`ParamStore`]'s ids.
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn new(params: &ParamStore) -> Self {
        GradStore {
            grads: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    fn add(&mut self, id: ParamId, g: Tensor) {
        accumulate(&mut self.grads[id.0], g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => *t += &g,
        None => *slot = Some(g),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Deconv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    Relu(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mix {
        x: Var,
        rows: Array2<f64>,
        cols: Array2<f64>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    SquashRows(Var),
    CapsulePredict {
        v: Var,
        w: Var,
        groups: Option<Vec<usize>>,
    },
    SoftmaxAxis0(Var),
    WeightedSum {
        pred: Var,
        c: Var,
    },
    Agreement {
        pred: Var,
        out: Var,
    },
    Add(Var, Var),
    TileCols(Var),
    RowNorms(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxMeanPool {
        x: Var,
        probs: Vec<f64>,
    },
    GlobalAvgPool(Var),
}

enum Kind {
    Param(ParamId),
    Input,
    Op(Op),
}

struct Node {
    value: Option<Tensor>,
    kind: Kind,
    requires_grad: bool,
}

/// Gradients with respect to graph inputs created by [`Graph::input_with_grad`].
pub struct InputGrads {
    grads: HashMap<usize, Tensor>,
}

impl InputGrads {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var.0)
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        self.nodes.push(Node {
            value: None,
            kind: Kind::Param(id),
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value.as_standard_layout().into_owned()),
            kind: Kind::Input,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.kind) {
            (Some(t), _) => t,
            (None, Kind::Param(id)) => self.params.value(*id),
            _ => unreachable!("op nodes always hold a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        slice(self.value(v))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.requires(*p));
        self.nodes.push(Node {
            value: Some(value),
            kind: Kind::Op(op),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn expect_rank(&self, v: Var, rank: usize, what: &str) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::Shape(format!(
                "{what}: expected rank {rank}, got shape {s:?}"
            )));
        }
        Ok(s)
    }

    /// 2-D convolution over an `(H, W, C_in)` map with a `(kh, kw, C_in, C_out)` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize, usize, usize),
    ) -> Result<Var> {
        let xs = self.expect_rank(x, 3, "conv2d input")?.to_vec();
        let ws = self.expect_rank(w, 4, "conv2d kernel")?.to_vec();
        if ws[2] != xs[2] {
            return Err(Error::Shape(format!(
                "conv2d: input channels {} vs kernel {:?}",
                xs[2], ws
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[3]] {
                return Err(Error::Shape("conv2d bias".into()));
            }
        }
        let geom = ConvGeom::new((xs[0], xs[1], xs[2]), (ws[0], ws[1], ws[3]), stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {ws:?} larger than input {xs:?}")))?;
        let out = kernels::conv2d_forward(
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let t = tensor(&[geom.out_h, geom.out_w, geom.cout], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Transposed convolution with kernel size equal to stride.
    pub fn deconv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.expect_rank(x, 3, "deconv input")?.to_vec();
        let ws = self.expect_rank(w, 4, "deconv kernel")?.to_vec();
        if ws[0] != ws[1] || ws[2] != xs[2] {
            return Err(Error::Shape(format!("deconv: kernel {ws:?} vs input {xs:?}")));
        }
        let k = ws[0];
        let out = kernels::deconv_forward(
            self.data(x),
            (xs[0], xs[1], xs[2]),
            self.data(w),
            k,
            ws[3],
            b.map(|b| self.data(b)),
        );
        let t = tensor(&[xs[0] * k, xs[1] * k, ws[3]], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Deconv { x, w, b, k }, &parents))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).mapv(|v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    /// Multiplies the last axis of `x` by the per-channel vector `s`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(s) != [c] {
            return Err(Error::Shape("channel_scale".into()));
        }
        let sd = self.data(s).to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.as_slice_mut().unwrap().chunks_exact_mut(c) {
            for (v, s) in chunk.iter_mut().zip(&sd) {
                *v *= s;
            }
        }
        Ok(self.push(t, Op::ChannelScale { x, s }, &[x, s]))
    }

    /// Per-channel normalization over the spatial positions of one `(H, W, C)` map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.expect_rank(x, 3, "instance_norm")?.to_vec();
        let c = xs[2];
        let n = xs[0] * xs[1];
        let xd = self.data(x);
        let mut mean = vec![0.0; c];
        for pix in xd.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(pix) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for pix in xd.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(pix).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64 + eps).sqrt()).collect();
        let mut normalized = xd.to_vec();
        for pix in normalized.chunks_exact_mut(c) {
            for ((v, m), is) in pix.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * is;
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = normalized.clone();
        for pix in out.chunks_exact_mut(c) {
            for ((v, g), b) in pix.iter_mut().zip(g).zip(b) {
                *v = *v * g + b;
            }
        }
        let t = tensor(&xs, out);
        Ok(self.push(
            t,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Separable linear resampling of an `(H, W, C)` map by `rows: (H', H)` and `cols: (W', W)`.
    pub fn mix(&mut self, x: Var, rows: Array2<f64>, cols: Array2<f64>) -> Result<Var> {
        let xs = self.expect_rank(x, 3, "mix")?.to_vec();
        if rows.ncols() != xs[0] || cols.ncols() != xs[1] {
            return Err(Error::Shape(format!(
                "mix: matrices {:?}/{:?} vs input {xs:?}",
                rows.dim(),
                cols.dim()
            )));
        }
        let out = kernels::mix_forward(self.data(x), (xs[0], xs[1], xs[2]), &rows, &cols);
        let t = tensor(&[rows.nrows(), cols.nrows(), xs[2]], out);
        Ok(self.push(t, Op::Mix { x, rows, cols }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?}",
                src.shape()
            )));
        }
        let t = tensor(shape, slice(src).to_vec());
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `out.flat[k] = x.flat[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.data(x);
        if index.len() != shape.iter().product::<usize>() || index.iter().any(|&i| i >= src.len())
        {
            return Err(Error::Shape("gather index".into()));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let t = tensor(shape, out);
        Ok(self.push(t, Op::Gather { x, index }, &[x]))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape(format!("concat: {s:?} vs tail {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.data(x));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = tensor(&shape, out);
        Ok(self.push(t, Op::Concat(xs.to_vec()), xs))
    }

    /// Applies the capsule squash to every row of an `(N, d)` matrix.
    pub fn squash_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 2, "squash_rows")?.to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(s[1]) {
            let f = kernels::squash_factor(row.iter().map(|v| v * v).sum());
            row.iter_mut().for_each(|v| *v *= f);
        }
        let t = tensor(&s, out);
        Ok(self.push(t, Op::SquashRows(x), &[x]))
    }

    /// Per-pair capsule predictions `pred[i, j] = W[group(i), j] · v[i]`.
    ///
    /// `v: (N, d_in)`, `w: (G, J, d_out, d_in)`; `groups` maps each input
    /// capsule to its transform (identity when `None`, which requires `G = N`).
    pub fn capsule_predict(
        &mut self,
        v: Var,
        w: Var,
        groups: Option<Vec<usize>>,
    ) -> Result<Var> {
        let vs = self.expect_rank(v, 2, "capsule input")?.to_vec();
        let ws = self.expect_rank(w, 4, "capsule transform")?.to_vec();
        let (n, din) = (vs[0], vs[1]);
        let (g, j, dout) = (ws[0], ws[1], ws[2]);
        if ws[3] != din {
            return Err(Error::Shape(format!(
                "capsule transform {ws:?} vs capsules {vs:?}"
            )));
        }
        match &groups {
            Some(map) if map.len() != n || map.iter().any(|&k| k >= g) => {
                return Err(Error::Shape("capsule group map".into()))
            }
            None if g != n => {
                return Err(Error::Shape(format!(
                    "capsule transform has {g} input slots for {n} capsules"
                )))
            }
            _ => {}
        }
        let (vd, wd) = (self.data(v), self.data(w));
        let mut out = vec![0.0; n * j * dout];
        for i in 0..n {
            let gi = groups.as_ref().map_or(i, |m| m[i]);
            let vi = &vd[i * din..][..din];
            for jj in 0..j {
                let wij = &wd[(gi * j + jj) * dout * din..][..dout * din];
                let o = &mut out[(i * j + jj) * dout..][..dout];
                for (r, o) in o.iter_mut().enumerate() {
                    *o = kernels_dot(&wij[r * din..][..din], vi);
                }
            }
        }
        let t = tensor(&[n, j, dout], out);
        Ok(self.push(t, Op::CapsulePredict { v, w, groups }, &[v, w]))
    }

    /// Softmax over axis 0 of an `(N,)` or `(N, J)` array.
    pub fn softmax_axis0(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = match s.len() {
            1 => 1,
            2 => s[1],
            _ => return Err(Error::Shape("softmax_axis0".into())),
        };
        let mut out = self.data(x).to_vec();
        for c in 0..cols {
            let m = (0..s[0]).map(|i| out[i * cols + c]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..s[0] {
                let e = (out[i * cols + c] - m).exp();
                out[i * cols + c] = e;
                z += e;
            }
            for i in 0..s[0] {
                out[i * cols + c] /= z;
            }
        }
        let t = tensor(&s, out);
        Ok(self.push(t, Op::SoftmaxAxis0(x), &[x]))
    }

    /// `s[j] = Σ_i c[i, j] · pred[i, j]` with `c` of shape `(N,)` (shared across `j`) or `(N, J)`.
    pub fn weighted_sum(&mut self, pred: Var, c: Var) -> Result<Var> {
        let ps = self.expect_rank(pred, 3, "weighted_sum")?.to_vec();
        let (n, j, d) = (ps[0], ps[1], ps[2]);
        let cs = self.shape(c);
        let per_output = match cs {
            [m] if *m == n => false,
            [m, k] if *m == n && *k == j => true,
            _ => return Err(Error::Shape(format!("coupling {cs:?} vs predictions {ps:?}"))),
        };
        let (pd, cd) = (self.data(pred), self.data(c));
        let mut out = vec![0.0; j * d];
        for i in 0..n {
            for jj in 0..j {
                let ci = if per_output { cd[i * j + jj] } else { cd[i] };
                kernels_axpy(ci, &pd[(i * j + jj) * d..][..d], &mut out[jj * d..][..d]);
            }
        }
        let t = tensor(&[j, d], out);
        Ok(self.push(t, Op::WeightedSum { pred, c }, &[pred, c]))
    }

    /// Routing agreement `a[i, j] = ⟨pred[i, j], out[j]⟩`.
    pub fn agreement(&mut self, pred: Var, out: Var) -> Result<Var> {
        let ps = self.expect_rank(pred, 3, "agreement")?.to_vec();
        let (n, j, d) = (ps[0], ps[1], ps[2]);
        if self.shape(out) != [j, d] {
            return Err(Error::Shape("agreement".into()));
        }
        let (pd, od) = (self.data(pred), self.data(out));
        let mut a = vec![0.0; n * j];
        for i in 0..n {
            for jj in 0..j {
                a[i * j + jj] = kernels_dot(&pd[(i * j + jj) * d..][..d], &od[jj * d..][..d]);
            }
        }
        let t = tensor(&[n, j], a);
        Ok(self.push(t, Op::Agreement { pred, out }, &[pred, out]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape("add".into()));
        }
        let t = self.value(a) + self.value(b);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// `(N,) -> (N, cols)` by repetition.
    pub fn tile_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let n = self.expect_rank(x, 1, "tile_cols")?[0];
        let xd = self.data(x);
        let out = (0..n * cols).map(|k| xd[k / cols]).collect();
        let t = tensor(&[n, cols], out);
        Ok(self.push(t, Op::TileCols(x), &[x]))
    }

    /// Euclidean norm of each row of an `(N, d)` matrix.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 2, "row_norms")?.to_vec();
        let out = self
            .data(x)
            .chunks_exact(s[1])
            .map(|r| kernels_dot(r, r).sqrt())
            .collect();
        let t = tensor(&[s[0]], out);
        Ok(self.push(t, Op::RowNorms(x), &[x]))
    }

    /// `W x + b` with `W: (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.expect_rank(x, 1, "linear input")?[0];
        let ws = self.expect_rank(w, 2, "linear weight")?.to_vec();
        if ws[1] != n || self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!("linear: weight {ws:?} vs input {n}")));
        }
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let out = (0..ws[0])
            .map(|o| bd[o] + kernels_dot(&wd[o * n..][..n], xd))
            .collect();
        let t = tensor(&[ws[0]], out);
        Ok(self.push(t, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Per-pixel softmax over the last axis of `(H, W, K)`, averaged over pixels.
    pub fn softmax_mean_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 3, "softmax_mean_pool")?.to_vec();
        let k = s[2];
        let pixels = s[0] * s[1];
        let mut probs = self.data(x).to_vec();
        let mut out = vec![0.0; k];
        for pix in probs.chunks_exact_mut(k) {
            softmax_in_place(pix);
            kernels_axpy(1.0 / pixels as f64, pix, &mut out);
        }
        let t = tensor(&[k], out);
        Ok(self.push(t, Op::SoftmaxMeanPool { x, probs }, &[x]))
    }

    /// `(H, W, C) -> (C,)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 3, "global_avg_pool")?.to_vec();
        let c = s[2];
        let mut out = vec![0.0; c];
        for pix in self.data(x).chunks_exact(c) {
            kernels_axpy(1.0, pix, &mut out);
        }
        let n = (s[0] * s[1]) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let t = tensor(&[c], out);
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    /// Propagates `seeds` (output gradients) back through the tape.
    ///
    /// Parameter gradients are added into `grads`; gradients for inputs
    /// created with [`Graph::input_with_grad`] are returned.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>, grads: &mut GradStore) -> Result<InputGrads> {
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} for value {:?}",
                    g.shape(),
                    self.shape(v)
                )));
            }
            accumulate(&mut node_grads[v.0], g.as_standard_layout().into_owned());
        }
        let mut inputs = HashMap::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            match &node.kind {
                Kind::Param(id) => grads.add(*id, g),
                Kind::Input => {
                    inputs.insert(idx, g);
                }
                Kind::Op(op) => {
                    for (parent, pg) in self.op_backward(idx, op, &g) {
                        if self.requires(parent) {
                            accumulate(&mut node_grads[parent.0], pg);
                        }
                    }
                }
            }
        }
        Ok(InputGrads { grads: inputs })
    }

    fn op_backward(&self, idx: usize, op: &Op, g: &Tensor) -> Vec<(Var, Tensor)> {
        let gd = slice(g);
        let out_value = self.nodes[idx].value.as_ref().expect("op value");
        match op {
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.requires(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = vec![0.0; self.value(*w).len()];
                let mut db = b.map(|_| vec![0.0; geom.cout]);
                kernels::conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    gd,
                    geom,
                    dx.as_deref_mut(),
                    &mut dw,
                    db.as_deref_mut(),
                );
                let mut res = vec![(*w, tensor(self.shape(*w), dw))];
                if let Some(dx) = dx {
                    res.push((*x, tensor(self.shape(*x), dx)));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    res.push((*b, tensor(&[geom.cout], db)));
                }
                res
            }
            Op::Deconv { x, w, b, k } => {
                let xs = self.shape(*x);
                let cout = self.shape(*w)[3];
                let mut dx = self.requires(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = vec![0.0; self.value(*w).len()];
                let mut db = b.map(|_| vec![0.0; cout]);
                kernels::deconv_backward(
                    self.data(*x),
                    (xs[0], xs[1], xs[2]),
                    self.data(*w),
                    *k,
                    cout,
                    gd,
                    dx.as_deref_mut(),
                    &mut dw,
                    db.as_deref_mut(),
                );
                let mut res = vec![(*w, tensor(self.shape(*w), dw))];
                if let Some(dx) = dx {
                    res.push((*x, tensor(xs, dx)));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    res.push((*b, tensor(&[cout], db)));
                }
                res
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.iter_mut().zip(slice(out_value)) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![(*x, dx)]
            }
            Op::ChannelScale { x, s } => {
                let xd = self.data(*x);
                let sd = self.data(*s);
                let c = sd.len();
                let mut dx = gd.to_vec();
                let mut ds = vec![0.0; c];
                for (pix, (dpix, xpix)) in gd
                    .chunks_exact(c)
                    .zip(dx.chunks_exact_mut(c).zip(xd.chunks_exact(c)))
                {
                    for ch in 0..c {
                        dpix[ch] = pix[ch] * sd[ch];
                        ds[ch] += pix[ch] * xpix[ch];
                    }
                }
                vec![
                    (*x, tensor(self.shape(*x), dx)),
                    (*s, tensor(&[c], ds)),
                ]
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = (gd.len() / c) as f64;
                let gam = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for (gp, xp) in gd.chunks_exact(c).zip(normalized.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += gp[ch] * xp[ch];
                        dbeta[ch] += gp[ch];
                        let dxh = gp[ch] * gam[ch];
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * xp[ch];
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for ((dp, gp), xp) in dx
                    .chunks_exact_mut(c)
                    .zip(gd.chunks_exact(c))
                    .zip(normalized.chunks_exact(c))
                {
                    for ch in 0..c {
                        let dxh = gp[ch] * gam[ch];
                        dp[ch] = inv_std[ch] / n
                            * (n * dxh - sum_dxhat[ch] - xp[ch] * sum_dxhat_xhat[ch]);
                    }
                }
                vec![
                    (*x, tensor(self.shape(*x), dx)),
                    (*gamma, tensor(&[c], dgamma)),
                    (*beta, tensor(&[c], dbeta)),
                ]
            }
            Op::Mix { x, rows, cols } => {
                let xs = self.shape(*x);
                let dx = kernels::mix_backward(gd, (xs[0], xs[1], xs[2]), rows, cols);
                vec![(*x, tensor(xs, dx))]
            }
            Op::Reshape(x) => vec![(*x, tensor(self.shape(*x), gd.to_vec()))],
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&i, &d) in index.iter().zip(gd) {
                    dx[i] += d;
                }
                vec![(*x, tensor(self.shape(*x), dx))]
            }
            Op::Concat(xs) => {
                let mut off = 0;
                xs.iter()
                    .map(|&x| {
                        let n = self.value(x).len();
                        let part = tensor(self.shape(x), gd[off..off + n].to_vec());
                        off += n;
                        (x, part)
                    })
                    .collect()
            }
            Op::SquashRows(x) => {
                let s = self.shape(*x);
                let d = s[1];
                let mut dx = vec![0.0; gd.len()];
                for ((v, gr), o) in self
                    .data(*x)
                    .chunks_exact(d)
                    .zip(gd.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    kernels::squash_vjp(v, gr, o);
                }
                vec![(*x, tensor(s, dx))]
            }
            Op::CapsulePredict { v, w, groups } => {
                let vs = self.shape(*v);
                let ws = self.shape(*w);
                let (n, din) = (vs[0], vs[1]);
                let (j, dout) = (ws[1], ws[2]);
                let (vd, wd) = (self.data(*v), self.data(*w));
                let mut dv = vec![0.0; vd.len()];
                let mut dw = vec![0.0; wd.len()];
                for i in 0..n {
                    let gi = groups.as_ref().map_or(i, |m| m[i]);
                    let vi = &vd[i * din..][..din];
                    for jj in 0..j {
                        let woff = (gi * j + jj) * dout * din;
                        let gij = &gd[(i * j + jj) * dout..][..dout];
                        for (r, &gr) in gij.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            kernels_axpy(gr, &wd[woff + r * din..][..din], &mut dv[i * din..][..din]);
                            kernels_axpy(gr, vi, &mut dw[woff + r * din..][..din]);
                        }
                    }
                }
                vec![(*v, tensor(vs, dv)), (*w, tensor(ws, dw))]
            }
            Op::SoftmaxAxis0(x) => {
                let s = self.shape(*x);
                let cols = if s.len() == 1 { 1 } else { s[1] };
                let y = slice(out_value);
                let mut dx = vec![0.0; y.len()];
                for c in 0..cols {
                    let dotp: f64 = (0..s[0]).map(|i| y[i * cols + c] * gd[i * cols + c]).sum();
                    for i in 0..s[0] {
                        let k = i * cols + c;
                        dx[k] = y[k] * (gd[k] - dotp);
                    }
                }
                vec![(*x, tensor(s, dx))]
            }
            Op::WeightedSum { pred, c } => {
                let ps = self.shape(*pred);
                let (n, j, d) = (ps[0], ps[1], ps[2]);
                let cs = self.shape(*c);
                let per_output = cs.len() == 2;
                let (pd, cd) = (self.data(*pred), self.data(*c));
                let mut dp = vec![0.0; pd.len()];
                let mut dc = vec![0.0; cd.len()];
                for i in 0..n {
                    for jj in 0..j {
                        let ck = if per_output { i * j + jj } else { i };
                        let gj = &gd[jj * d..][..d];
                        let off = (i * j + jj) * d;
                        kernels_axpy(cd[ck], gj, &mut dp[off..off + d]);
                        dc[ck] += kernels_dot(&pd[off..off + d], gj);
                    }
                }
                vec![(*pred, tensor(ps, dp)), (*c, tensor(cs, dc))]
            }
            Op::Agreement { pred, out } => {
                let ps = self.shape(*pred);
                let (n, j, d) = (ps[0], ps[1], ps[2]);
                let (pd, od) = (self.data(*pred), self.data(*out));
                let mut dp = vec![0.0; pd.len()];
                let mut dout = vec![0.0; od.len()];
                for i in 0..n {
                    for jj in 0..j {
                        let gij = gd[i * j + jj];
                        let off = (i * j + jj) * d;
                        kernels_axpy(gij, &od[jj * d..][..d], &mut dp[off..off + d]);
                        kernels_axpy(gij, &pd[off..off + d], &mut dout[jj * d..][..d]);
                    }
                }
                vec![
                    (*pred, tensor(ps, dp)),
                    (*out, tensor(self.shape(*out), dout)),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::TileCols(x) => {
                let n = self.shape(*x)[0];
                let cols = gd.len() / n.max(1);
                let dx = gd.chunks_exact(cols).map(|r| r.iter().sum()).collect();
                vec![(*x, tensor(&[n], dx))]
            }
            Op::RowNorms(x) => {
                let s = self.shape(*x);
                let d = s[1];
                let norms = slice(out_value);
                let mut dx = self.data(*x).to_vec();
                for (row, (&nrm, &gr)) in dx.chunks_exact_mut(d).zip(norms.iter().zip(gd)) {
                    let scale = if nrm > 0.0 { gr / nrm } else { 0.0 };
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*x, tensor(s, dx))]
            }
            Op::Linear { x, w, b } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let n = xd.len();
                let mut dx = vec![0.0; n];
                let mut dw = vec![0.0; wd.len()];
                for (o, &go) in gd.iter().enumerate() {
                    kernels_axpy(go, &wd[o * n..][..n], &mut dx);
                    kernels_axpy(go, xd, &mut dw[o * n..][..n]);
                }
                vec![
                    (*x, tensor(&[n], dx)),
                    (*w, tensor(self.shape(*w), dw)),
                    (*b, g.clone()),
                ]
            }
            Op::SoftmaxMeanPool { x, probs } => {
                let k = gd.len();
                let pixels = (probs.len() / k) as f64;
                let mut dx = vec![0.0; probs.len()];
                for (p, d) in probs.chunks_exact(k).zip(dx.chunks_exact_mut(k)) {
                    let pg = kernels_dot(p, gd);
                    for c in 0..k {
                        d[c] = p[c] * (gd[c] - pg) / pixels;
                    }
                }
                vec![(*x, tensor(self.shape(*x), dx))]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let c = s[2];
                let n = (s[0] * s[1]) as f64;
                let mut dx = vec![0.0; s.iter().product()];
                for pix in dx.chunks_exact_mut(c) {
                    for (d, gv) in pix.iter_mut().zip(gd) {
                        *d = gv / n;
                    }
                }
                vec![(*x, tensor(s, dx))]
            }
        }
    }
}

#[inline]
fn kernels_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn kernels_axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable in-place softmax.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    v.iter_mut().for_each(|x| *x /= z);
}
