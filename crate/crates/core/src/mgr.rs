//! Multigranular partitioning of the backbone map into one whole, two
//! halves and three thirds.
//!
//! The map is first pooled to 6 rows (divisible by both 2 and 3), sliced,
//! and each slice pooled back to the common `7 × 7` branch size.

use std::fmt;
use std::ops::Range;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};

/// Rows of the intermediate map every branch is cut from.
pub const POOLED_ROWS: usize = 6;
/// Spatial size of every branch.
pub const BRANCH_SIZE: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchId {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
}

impl BranchId {
    pub const ALL: [BranchId; 6] = [
        BranchId::F1,
        BranchId::F2,
        BranchId::F3,
        BranchId::F4,
        BranchId::F5,
        BranchId::F6,
    ];

    /// Row span in sixths of the image height.
    pub fn sixths(self) -> Range<usize> {
        match self {
            BranchId::F1 => 0..6,
            BranchId::F2 => 0..3,
            BranchId::F3 => 3..6,
            BranchId::F4 => 0..2,
            BranchId::F5 => 2..4,
            BranchId::F6 => 4..6,
        }
    }

    /// `(start_fraction, end_fraction)` of the image height.
    pub fn row_range(self) -> (f64, f64) {
        let s = self.sixths();
        (s.start as f64 / 6.0, s.end as f64 / 6.0)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        ["f1", "f2", "f3", "f4", "f5", "f6"][self.index()]
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F{}", self.index() + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchFeature {
    pub branch_id: BranchId,
    pub row_range: (f64, f64),
    /// `(7, 7, C_f)`.
    pub data: Array3<f64>,
}

/// Adaptive average pooling by exact fractional overlap.
///
/// Output cell `i` covers `[i·n/m, (i+1)·n/m)` of the input axis; each input
/// cell contributes in proportion to its overlap. Every row sums to 1 and
/// every column to `m/n`. Works for up- and down-sampling.
pub fn adaptive_pool_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    // integer arithmetic in units of 1/(in_len·out_len)
    for i in 0..out_len {
        let lo = i * in_len;
        let hi = (i + 1) * in_len;
        for r in 0..in_len {
            let (a, b) = (r * out_len, (r + 1) * out_len);
            let overlap = hi.min(b).saturating_sub(lo.max(a));
            if overlap > 0 {
                m[[i, r]] = overlap as f64 / in_len as f64;
            }
        }
    }
    m
}

/// Slice-and-repool matrix `(7, 6)` taking the pooled rows of `branch` back
/// to `BRANCH_SIZE` rows.
pub fn slice_matrix(branch: BranchId) -> Array2<f64> {
    let span = branch.sixths();
    let up = adaptive_pool_matrix(span.len(), BRANCH_SIZE);
    let mut m = Array2::zeros((BRANCH_SIZE, POOLED_ROWS));
    m.slice_mut(ndarray::s![.., span]).assign(&up);
    m
}

/// Branch maps for `branches`, recorded on the graph.
pub fn partition_graph(g: &mut Graph, feature: Var, branches: &[BranchId]) -> Result<Vec<Var>> {
    let shape = g.shape(feature).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("feature map must be (H, W, C), got {shape:?}")));
    }
    if shape[0] < 3 {
        return Err(Error::InvalidInput(format!(
            "feature map height {} is below 3",
            shape[0]
        )));
    }
    let pooled = g.mix(
        feature,
        adaptive_pool_matrix(shape[0], POOLED_ROWS),
        adaptive_pool_matrix(shape[1], BRANCH_SIZE),
    )?;
    branches
        .iter()
        .map(|&b| g.mix(pooled, slice_matrix(b), Array2::eye(BRANCH_SIZE)))
        .collect()
}

/// Splits a feature map into the six granularity branches.
pub fn partition(feature: &FeatureMap) -> Result<Vec<BranchFeature>> {
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let f = g.input(feature.data.clone().into_dyn());
    let vars = partition_graph(&mut g, f, &BranchId::ALL)?;
    vars.into_iter()
        .zip(BranchId::ALL)
        .map(|(v, b)| {
            let data = g
                .value(v)
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Shape(e.to_string()))?;
            Ok(BranchFeature {
                branch_id: b,
                row_range: b.row_range(),
                data,
            })
        })
        .collect()
}

/// Pixel rows `[floor(start·h), ceil(end·h))` covered by `branch`.
pub fn branch_row_mask(branch: BranchId, image_height: usize) -> Range<usize> {
    let s = branch.sixths();
    let start = s.start * image_height / 6;
    let end = (s.end * image_height).div_ceil(6);
    start..end
}
