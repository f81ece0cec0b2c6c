//! Feature extractor contract and the default toy convolutional backbone.
//!
//! Any extractor producing an `(out_height, out_width, out_channels)` map
//! fits downstream. The toy network is four 3×3 convolution stages (strides
//! 2, 2, 2, 1) with ReLU, a per-channel output gate, and adaptive average
//! pooling to the configured grid.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{tensor, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::mgr::adaptive_pool_matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Network input `(height, width)`; images are resized to it.
    pub input_size: [usize; 2],
    pub out_height: usize,
    pub out_width: usize,
    pub out_channels: usize,
    /// Widths of the first three convolution stages.
    pub hidden_channels: [usize; 3],
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Checkpoint whose `backbone.*` arrays replace the initial weights.
    pub pretrained_weights_path: Option<String>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: [64, 64],
            out_height: 7,
            out_width: 7,
            out_channels: 64,
            hidden_channels: [16, 32, 64],
            mean: [0.5; 3],
            std: [0.5; 3],
            pretrained_weights_path: None,
        }
    }
}

impl BackboneConfig {
    /// 224×224 input, 7×7×1024 output.
    pub fn paper() -> Self {
        BackboneConfig {
            input_size: [224, 224],
            out_channels: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels < 8 {
            return Err(Error::Config("backbone.out_channels must be at least 8".into()));
        }
        if self.out_height < 2 || self.out_width < 2 {
            return Err(Error::Config("backbone output grid must be at least 2x2".into()));
        }
        if self.input_size.iter().any(|&s| s < 8) {
            return Err(Error::Config("backbone.input_size must be at least 8x8".into()));
        }
        if self.hidden_channels.contains(&0) {
            return Err(Error::Config("backbone.hidden_channels must be positive".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("backbone.std must be positive".into()));
        }
        Ok(())
    }

    fn stage_channels(&self) -> [(usize, usize, usize); 4] {
        let [a, b, c] = self.hidden_channels;
        [(3, a, 2), (a, b, 2), (b, c, 2), (c, self.out_channels, 1)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `(H_f, W_f, C_f)`.
    pub data: Array3<f64>,
    pub source_image_size: (usize, usize),
}

/// Uniform `±sqrt(6 / fan_in)`.
pub(crate) fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

pub fn init_params(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) {
    for (i, (cin, cout, _)) in cfg.stage_channels().into_iter().enumerate() {
        store.insert(
            format!("backbone.conv{}.weight", i + 1),
            fan_in_uniform(rng, &[3, 3, cin, cout], 9 * cin),
        );
        store.insert(format!("backbone.conv{}.bias", i + 1), Tensor::zeros(vec![cout]));
    }
    store.insert("backbone.scale", Tensor::ones(vec![cfg.out_channels]));
}

/// Normalizes an RGB image with the configured mean/std, resizing it first.
pub fn prepare_image(image: &Array3<f64>, cfg: &BackboneConfig) -> Result<Tensor> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected an RGB image, got {c} channels")));
    }
    let [th, tw] = cfg.input_size;
    let resized = if (h, w) == (th, tw) {
        image.clone()
    } else {
        let rows = adaptive_pool_matrix(h, th);
        let cols = adaptive_pool_matrix(w, tw);
        let data = crate::autograd::kernels::mix_forward(
            image.as_standard_layout().as_slice().unwrap(),
            (h, w, 3),
            &rows,
            &cols,
        );
        Array3::from_shape_vec((th, tw, 3), data).unwrap()
    };
    let mut out = resized;
    for mut pix in out.lanes_mut(ndarray::Axis(2)) {
        for ch in 0..3 {
            pix[ch] = (pix[ch] - cfg.mean[ch]) / cfg.std[ch];
        }
    }
    Ok(out.into_dyn())
}

/// Toy backbone on a prepared `(H, W, 3)` input.
pub fn toy_backbone_forward(g: &mut Graph, image: Var, cfg: &BackboneConfig) -> Result<Var> {
    let mut x = image;
    for (i, (_, _, stride)) in cfg.stage_channels().into_iter().enumerate() {
        let w = g.param(&format!("backbone.conv{}.weight", i + 1))?;
        let b = g.param(&format!("backbone.conv{}.bias", i + 1))?;
        let conv = g.conv2d(x, w, Some(b), stride, (1, 1, 1, 1))?;
        x = g.relu(conv);
    }
    let scale = g.param("backbone.scale")?;
    let gated = g.channel_scale(x, scale)?;
    let s = g.shape(gated).to_vec();
    g.mix(
        gated,
        adaptive_pool_matrix(s[0], cfg.out_height),
        adaptive_pool_matrix(s[1], cfg.out_width),
    )
}

/// Runs the backbone on one RGB image (values in `[0, 1]`).
pub fn extract_features(
    image: &Array3<f64>,
    cfg: &BackboneConfig,
    params: &ParamStore,
) -> Result<FeatureMap> {
    cfg.validate()?;
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter `{name}`")));
    }
    let prepared = prepare_image(image, cfg)?;
    let mut g = Graph::new(params);
    let x = g.input(prepared);
    let f = toy_backbone_forward(&mut g, x, cfg)?;
    let data = g
        .value(f)
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FeatureMap {
        data,
        source_image_size: (image.dim().0, image.dim().1),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::GradStore;
    use crate::gradcheck::{central_difference, relative_error};

    fn setup(cfg: &BackboneConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn toy_config_output_shape() {
        let cfg = BackboneConfig::default();
        let f = extract_features(&image(64, 64, 1), &cfg, &setup(&cfg, 0)).unwrap();
        assert_eq!(f.data.dim(), (7, 7, 64));
        assert!(f.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_does_not_depend_on_input_size() {
        let cfg = BackboneConfig::default();
        let params = setup(&cfg, 0);
        for (h, w) in [(32, 32), (80, 48), (64, 64)] {
            let f = extract_features(&image(h, w, 2), &cfg, &params).unwrap();
            assert_eq!(f.data.dim(), (7, 7, 64));
        }
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_map() {
        let cfg = BackboneConfig {
            mean: [0.0; 3],
            std: [1.0; 3],
            ..BackboneConfig::default()
        };
        let f = extract_features(&Array3::zeros((64, 64, 3)), &cfg, &setup(&cfg, 3)).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let cfg = BackboneConfig::default();
        let params = setup(&cfg, 4);
        let img = image(64, 64, 5);
        let a = extract_features(&img, &cfg, &params).unwrap();
        let b = extract_features(&img, &cfg, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_rgb_and_nan_weights() {
        let cfg = BackboneConfig::default();
        let mut params = setup(&cfg, 6);
        assert!(extract_features(&Array3::zeros((64, 64, 1)), &cfg, &params).is_err());
        let id = params.id("backbone.conv2.weight").unwrap();
        params.value_mut(id)[[0, 0, 0, 0]] = f64::NAN;
        assert!(matches!(
            extract_features(&image(64, 64, 1), &cfg, &params),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn doubling_scale_doubles_gated_channel() {
        let cfg = BackboneConfig::default();
        let mut params = setup(&cfg, 7);
        let img = image(64, 64, 8);
        let before = extract_features(&img, &cfg, &params).unwrap();
        let id = params.id("backbone.scale").unwrap();
        params.value_mut(id)[[5]] *= 2.0;
        let after = extract_features(&img, &cfg, &params).unwrap();
        for ((y, x, c), &v) in after.data.indexed_iter() {
            let expect = if c == 5 { 2.0 } else { 1.0 } * before.data[[y, x, c]];
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let cfg = BackboneConfig {
            input_size: [32, 32],
            hidden_channels: [4, 6, 8],
            out_channels: 8,
            ..BackboneConfig::default()
        };
        let mut params = setup(&cfg, 9);
        let img = prepare_image(&image(32, 32, 10), &cfg).unwrap();
        let id = params.id("backbone.conv2.weight").unwrap();
        let analytic: Vec<f64> = {
            let mut g = Graph::new(&params);
            let x = g.input(img.clone());
            let f = toy_backbone_forward(&mut g, x, &cfg).unwrap();
            let n = g.value(f).len() as f64;
            let mut grads = GradStore::new(&params);
            g.backward(vec![(f, Tensor::from_elem(g.shape(f), 1.0 / n))], &mut grads)
                .unwrap();
            grads.get(id).unwrap().iter().take(40).copied().collect()
        };
        let base: Vec<f64> = params.value(id).iter().copied().collect();
        let numeric = central_difference(
            |x| {
                for (d, s) in params.value_mut(id).iter_mut().zip(x) {
                    *d = *s;
                }
                let mut g = Graph::new(&params);
                let input = g.input(img.clone());
                let f = toy_backbone_forward(&mut g, input, &cfg).unwrap();
                g.value(f).mean().unwrap()
            },
            &base[..40],
            1e-4,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }
}
