//! Training objectives: capsule margin loss, batch-hard triplet loss, part
//! cross-entropy and their weighted sum. Every loss returns its value and
//! the gradient with respect to its input.

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autograd::softmax_in_place;
use crate::dataset::{PartMap, NUM_PARTS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.8,
            lambda2: 0.1,
            lambda3: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// `m+ = M/(M-1)`, `m- = 1/M` with `M` identity classes.
    PaperFormula,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_neg: f64,
    pub mode: MarginMode,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        MarginLossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_neg: 0.5,
            mode: MarginMode::Fixed,
        }
    }
}

impl MarginLossConfig {
    /// `(m+, m-)` for `classes` identity classes.
    pub fn margins(&self, classes: usize) -> (f64, f64) {
        match self.mode {
            MarginMode::Fixed => (self.m_plus, self.m_minus),
            MarginMode::PaperFormula => {
                let n = classes as f64;
                (n / (n - 1.0), 1.0 / n)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub alpha: f64,
    pub distance: Distance,
    /// L2-normalize features before measuring distances.
    pub normalize: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            alpha: 0.3,
            distance: Distance::Euclidean,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub margin: MarginLossConfig,
    pub triplet: TripletConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.lambda1, w.lambda2, w.lambda3].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        let m = &self.margin;
        if m.mode == MarginMode::Fixed && !(0.0 < m.m_minus && m.m_minus < m.m_plus) {
            return Err(Error::Config("margin loss needs 0 < m_minus < m_plus".into()));
        }
        if !(m.lambda_neg >= 0.0) {
            return Err(Error::Config("losses.margin.lambda_neg must be nonnegative".into()));
        }
        if !(self.triplet.alpha >= 0.0) {
            return Err(Error::Config("losses.triplet.alpha must be nonnegative".into()));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, limit: classes }),
        None => Ok(()),
    }
}

/// Capsule margin loss over identity lengths `(B, M)`, averaged over the batch.
pub fn margin_loss(lengths: &Array2<f64>, labels: &[usize], cfg: &MarginLossConfig) -> Result<(f64, Array2<f64>)> {
    let (b, m) = lengths.dim();
    check_labels(labels, b, m)?;
    let (mp, mm) = cfg.margins(m);
    let mut grad = Array2::zeros((b, m));
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for n in 0..m {
            let l = lengths[[i, n]];
            if n == y {
                let h = (mp - l).max(0.0);
                total += h * h;
                grad[[i, n]] = -2.0 * h / b as f64;
            } else {
                let h = (l - mm).max(0.0);
                total += cfg.lambda_neg * h * h;
                grad[[i, n]] = 2.0 * cfg.lambda_neg * h / b as f64;
            }
        }
    }
    Ok((total / b as f64, grad))
}

/// Mean softmax cross-entropy of `(B, M)` logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, m) = logits.dim();
    check_labels(labels, b, m)?;
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let probs = row.as_slice_mut().expect("standard layout");
        softmax_in_place(probs);
        total -= probs[y].max(f64::MIN_POSITIVE).ln();
        probs[y] -= 1.0;
        probs.iter_mut().for_each(|p| *p /= b as f64);
    }
    Ok((total / b as f64, grad))
}

fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>, kind: Distance) -> f64 {
    match kind {
        Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Distance::Cosine => 1.0 - a.dot(&b),
    }
}

/// `(B, B)` pairwise distances. Cosine distances assume unit rows.
pub fn pairwise_distances(features: &Array2<f64>, kind: Distance) -> Array2<f64> {
    let b = features.nrows();
    Array2::from_shape_fn((b, b), |(i, j)| distance(features.row(i), features.row(j), kind))
}

/// Hardest positive (largest distance, same label, other index) and hardest
/// negative (smallest distance, other label) of every anchor; ties go to the
/// lowest index. `None` when the anchor has no positive or no negative.
pub fn mine_batch_hard(dist: &Array2<f64>, labels: &[usize]) -> Vec<Option<(usize, usize)>> {
    let b = labels.len();
    (0..b)
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.map_or(true, |p| dist[[a, j]] > dist[[a, p]]) {
                        pos = Some(j);
                    }
                } else if neg.map_or(true, |n| dist[[a, j]] < dist[[a, n]]) {
                    neg = Some(j);
                }
            }
            Some((pos?, neg?))
        })
        .collect()
}

/// Batch-hard loss from a distance matrix; also returns the mined pairs.
pub fn batch_hard_from_distances(
    dist: &Array2<f64>,
    labels: &[usize],
    alpha: f64,
) -> Result<(f64, Vec<Option<(usize, usize)>>)> {
    let mined = mine_batch_hard(dist, labels);
    let valid: Vec<(usize, usize, usize)> = mined
        .iter()
        .enumerate()
        .filter_map(|(a, m)| m.map(|(p, n)| (a, p, n)))
        .collect();
    if valid.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let loss = valid
        .iter()
        .map(|&(a, p, n)| (alpha + dist[[a, p]] - dist[[a, n]]).max(0.0))
        .sum::<f64>()
        / valid.len() as f64;
    Ok((loss, mined))
}

/// Batch-hard triplet loss over `(B, D)` features, averaged over valid anchors.
pub fn batch_hard_triplet(features: &Array2<f64>, labels: &[usize], cfg: &TripletConfig) -> Result<(f64, Array2<f64>)> {
    let (b, d) = features.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} features", labels.len())));
    }
    if b < 2 {
        return Err(Error::DegenerateBatch);
    }
    let unit = cfg.normalize || cfg.distance == Distance::Cosine;
    let norms: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt().max(1e-12))
        .collect();
    let x = if unit {
        Array2::from_shape_fn((b, d), |(i, k)| features[[i, k]] / norms[i])
    } else {
        features.clone()
    };
    let dist = pairwise_distances(&x, cfg.distance);
    let (loss, mined) = batch_hard_from_distances(&dist, labels, cfg.alpha)?;
    let valid = mined.iter().flatten().count() as f64;

    let mut gx = Array2::<f64>::zeros((b, d));
    let mut add_pair = |i: usize, j: usize, scale: f64| match cfg.distance {
        Distance::Euclidean => {
            let dij = dist[[i, j]];
            if dij > 0.0 {
                for k in 0..d {
                    let g = scale * (x[[i, k]] - x[[j, k]]) / dij;
                    gx[[i, k]] += g;
                    gx[[j, k]] -= g;
                }
            }
        }
        Distance::Cosine => {
            for k in 0..d {
                gx[[i, k]] -= scale * x[[j, k]];
                gx[[j, k]] -= scale * x[[i, k]];
            }
        }
    };
    for (a, m) in mined.iter().enumerate() {
        if let Some((p, n)) = *m {
            if cfg.alpha + dist[[a, p]] - dist[[a, n]] > 0.0 {
                add_pair(a, p, 1.0 / valid);
                add_pair(a, n, -1.0 / valid);
            }
        }
    }
    if !unit {
        return Ok((loss, gx));
    }
    let mut grad = Array2::zeros((b, d));
    for i in 0..b {
        let proj: f64 = (0..d).map(|k| gx[[i, k]] * x[[i, k]]).sum();
        for k in 0..d {
            grad[[i, k]] = (gx[[i, k]] - x[[i, k]] * proj) / norms[i];
        }
    }
    Ok((loss, grad))
}

/// Mean per-pixel cross-entropy of part logits `(14, 14, 8)` against their targets.
pub fn part_loss(logits: &[Array3<f64>], targets: &[PartMap]) -> Result<(f64, Vec<Array3<f64>>)> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} part logit maps for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut pixels = 0usize;
    for (l, t) in logits.iter().zip(targets) {
        let (h, w, k) = l.dim();
        if (h, w) != t.size() || k != NUM_PARTS {
            return Err(Error::Shape(format!("part logits {:?} vs target {:?}", l.dim(), t.size())));
        }
        pixels += h * w;
    }
    if pixels == 0 {
        return Err(Error::Shape("empty part batch".into()));
    }
    let scale = 1.0 / pixels as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, t) in logits.iter().zip(targets) {
        let mut g = l.as_standard_layout().into_owned();
        let flat = g.as_slice_mut().expect("standard layout");
        for (probs, &y) in flat.chunks_exact_mut(NUM_PARTS).zip(t.labels.iter()) {
            let y = y as usize;
            if y >= NUM_PARTS {
                return Err(Error::LabelOutOfRange { label: y, limit: NUM_PARTS });
            }
            softmax_in_place(probs);
            total -= probs[y].max(f64::MIN_POSITIVE).ln();
            probs[y] -= 1.0;
            probs.iter_mut().for_each(|p| *p *= scale);
        }
        grads.push(g);
    }
    Ok((total * scale, grads))
}

/// `λ1·L_id + λ2·L_tri + λ3·L_part`.
pub fn total_loss(l_id: f64, l_tri: f64, l_part: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_id + w.lambda2 * l_tri + w.lambda3 * l_part
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{central_difference, relative_error};

    fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
    }

    fn flat(a: &Array2<f64>) -> Vec<f64> {
        a.iter().copied().collect()
    }

    fn from_flat(shape: (usize, usize), v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn margin_loss_examples() {
        let cfg = MarginLossConfig::default();
        let l = ndarray::array![[0.9, 0.1]];
        assert_eq!(margin_loss(&l, &[0], &cfg).unwrap().0, 0.0);
        let l = ndarray::array![[0.0, 1.0]];
        assert!((margin_loss(&l, &[0], &cfg).unwrap().0 - 1.215).abs() < 1e-12);
        let paper = MarginLossConfig {
            mode: MarginMode::PaperFormula,
            ..cfg
        };
        assert_eq!(paper.margins(2), (2.0, 0.5));
        assert!(matches!(
            margin_loss(&l, &[2], &cfg),
            Err(Error::LabelOutOfRange { label: 2, limit: 2 })
        ));
    }

    #[test]
    fn margin_loss_gradient() {
        let lengths = random(4, 5, 0.0, 1.0, 1);
        let labels = [0, 3, 4, 1];
        let cfg = MarginLossConfig::default();
        let (_, g) = margin_loss(&lengths, &labels, &cfg).unwrap();
        let numeric = central_difference(
            |x| margin_loss(&from_flat((4, 5), x), &labels, &cfg).unwrap().0,
            &flat(&lengths),
            1e-6,
        );
        assert!(relative_error(&flat(&g), &numeric) < 1e-5);
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        let logits = random(3, 4, -2.0, 2.0, 2);
        let labels = [1, 0, 3];
        let (v, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: f64 = logits.row(i).iter().map(|x| x.exp()).sum();
            oracle -= (logits[[i, y]].exp() / z).ln() / 3.0;
        }
        assert!((v - oracle).abs() < 1e-12);
        let numeric = central_difference(
            |x| softmax_cross_entropy(&from_flat((3, 4), x), &labels).unwrap().0,
            &flat(&logits),
            1e-6,
        );
        assert!(relative_error(&flat(&g), &numeric) < 1e-6);
    }

    #[test]
    fn triplet_examples() {
        let cfg = TripletConfig {
            normalize: false,
            ..TripletConfig::default()
        };
        let clusters = ndarray::array![[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]];
        assert_eq!(batch_hard_triplet(&clusters, &[0, 0, 1, 1], &cfg).unwrap().0, 0.0);
        let same = Array2::from_elem((4, 3), 0.5);
        let (l, _) = batch_hard_triplet(&same, &[0, 0, 1, 1], &TripletConfig::default()).unwrap();
        assert!((l - 0.3).abs() < 1e-12);
        assert!(matches!(
            batch_hard_triplet(&same, &[0, 1, 2, 3], &cfg),
            Err(Error::DegenerateBatch)
        ));
        assert!(matches!(
            batch_hard_triplet(&same, &[0, 0, 0, 0], &cfg),
            Err(Error::DegenerateBatch)
        ));
    }

    /// Extreme distance value first, then the first index attaining it.
    fn mining_oracle(dist: &Array2<f64>, labels: &[usize]) -> Vec<Option<(usize, usize)>> {
        let b = labels.len();
        (0..b)
            .map(|a| {
                let pos: Vec<usize> = (0..b).filter(|&j| j != a && labels[j] == labels[a]).collect();
                let neg: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[a]).collect();
                if pos.is_empty() || neg.is_empty() {
                    return None;
                }
                let far = pos.iter().map(|&j| dist[[a, j]]).fold(f64::NEG_INFINITY, f64::max);
                let near = neg.iter().map(|&j| dist[[a, j]]).fold(f64::INFINITY, f64::min);
                let p = *pos.iter().find(|&&j| dist[[a, j]] == far).unwrap();
                let n = *neg.iter().find(|&&j| dist[[a, j]] == near).unwrap();
                Some((p, n))
            })
            .collect()
    }

    #[test]
    fn mining_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let b = rng.gen_range(2..=32);
            let classes = rng.gen_range(1..=6);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
            // coarse features so that ties are frequent
            let feats = Array2::from_shape_fn((b, 3), |_| rng.gen_range(0..3) as f64);
            let dist = pairwise_distances(&feats, Distance::Euclidean);
            assert_eq!(mine_batch_hard(&dist, &labels), mining_oracle(&dist, &labels));
        }
    }

    #[test]
    fn triplet_gradient_all_modes() {
        let feats = random(8, 4, -1.0, 1.0, 4);
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        for (distance, normalize) in [
            (Distance::Euclidean, true),
            (Distance::Euclidean, false),
            (Distance::Cosine, true),
        ] {
            let cfg = TripletConfig {
                alpha: 0.5,
                distance,
                normalize,
            };
            let (_, g) = batch_hard_triplet(&feats, &labels, &cfg).unwrap();
            let numeric = central_difference(
                |x| batch_hard_triplet(&from_flat((8, 4), x), &labels, &cfg).unwrap().0,
                &flat(&feats),
                1e-6,
            );
            let err = relative_error(&flat(&g), &numeric);
            assert!(err < 1e-5, "{distance:?}/{normalize}: {err}");
        }
    }

    #[test]
    fn part_loss_examples_and_oracle() {
        let targets: Vec<PartMap> = (0..2)
            .map(|s| PartMap::new(Array2::from_shape_fn((14, 14), |(y, x)| ((y * 3 + x + s) % 8) as u8)).unwrap())
            .collect();
        let perfect: Vec<Array3<f64>> = targets
            .iter()
            .map(|t| Array3::from_shape_fn((14, 14, 8), |(y, x, k)| if t.labels[[y, x]] as usize == k { 1e4 } else { 0.0 }))
            .collect();
        assert!(part_loss(&perfect, &targets).unwrap().0 < 1e-3);
        let uniform = vec![Array3::zeros((14, 14, 8)); 2];
        assert!((part_loss(&uniform, &targets).unwrap().0 - 8f64.ln()).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<Array3<f64>> = (0..2)
            .map(|_| Array3::from_shape_fn((14, 14, 8), |_| rng.gen_range(-3.0..3.0)))
            .collect();
        let (v, grads) = part_loss(&logits, &targets).unwrap();
        let mut oracle = 0.0;
        for (l, t) in logits.iter().zip(&targets) {
            for y in 0..14 {
                for x in 0..14 {
                    let z: f64 = (0..8).map(|k| l[[y, x, k]].exp()).sum();
                    oracle -= (l[[y, x, t.labels[[y, x]] as usize]].exp() / z).ln();
                }
            }
        }
        assert!((v - oracle / 392.0).abs() < 1e-10);

        let xs: Vec<f64> = logits.iter().flat_map(|l| l.iter().copied()).collect();
        let numeric = central_difference(
            |x| {
                let ls: Vec<Array3<f64>> = x
                    .chunks(14 * 14 * 8)
                    .map(|c| Array3::from_shape_vec((14, 14, 8), c.to_vec()).unwrap())
                    .collect();
                part_loss(&ls, &targets).unwrap().0
            },
            &xs,
            1e-5,
        );
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        assert!(relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w), 1.0);
        assert_eq!(total_loss(2.5, 0.0, 0.0, &w), 0.8 * 2.5);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        assert_eq!(total_loss(3.0, 7.0, 11.0, &zero), 0.0);
    }

    fn random_problem(seed: u64, b: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
        let mut dist = Array2::from_shape_fn((b, b), |_| rng.gen_range(0.0..2.0));
        for i in 0..b {
            dist[[i, i]] = 0.0;
        }
        (dist, labels)
    }

    proptest! {
        #[test]
        fn margin_loss_is_nonnegative_and_zero_exactly_when_satisfied(
            seed in 0u64..10_000, label in 0usize..4,
        ) {
            let lengths = random(1, 4, 0.0, 1.0, seed);
            let cfg = MarginLossConfig::default();
            let (l, _) = margin_loss(&lengths, &[label], &cfg).unwrap();
            prop_assert!(l >= 0.0);
            let satisfied = (0..4).all(|n| if n == label { lengths[[0, n]] >= 0.9 } else { lengths[[0, n]] <= 0.1 });
            prop_assert_eq!(l == 0.0, satisfied);
        }

        #[test]
        fn mining_is_invariant_to_constant_shift(seed in 0u64..10_000, shift in -5.0f64..5.0) {
            let (dist, labels) = random_problem(seed, 9);
            let shifted = dist.mapv(|d| d + shift);
            prop_assert_eq!(mine_batch_hard(&dist, &labels), mine_batch_hard(&shifted, &labels));
        }

        #[test]
        fn triplet_is_monotone_in_mined_distances(seed in 0u64..10_000, delta in 0.0f64..1.0) {
            let (dist, labels) = random_problem(seed, 9);
            let (base, _) = batch_hard_from_distances(&dist, &labels, 0.3).unwrap();
            prop_assert!(base >= 0.0);
            let farther_neg = Array2::from_shape_fn(dist.dim(), |(i, j)| {
                dist[[i, j]] + if labels[i] != labels[j] { delta } else { 0.0 }
            });
            prop_assert!(batch_hard_from_distances(&farther_neg, &labels, 0.3).unwrap().0 <= base + 1e-12);
            let farther_pos = Array2::from_shape_fn(dist.dim(), |(i, j)| {
                dist[[i, j]] + if labels[i] == labels[j] && i != j { delta } else { 0.0 }
            });
            prop_assert!(batch_hard_from_distances(&farther_pos, &labels, 0.3).unwrap().0 >= base - 1e-12);
        }
    }
}
