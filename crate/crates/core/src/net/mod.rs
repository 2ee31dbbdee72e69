//! Per-pixel descriptor network: a small symmetric encoder-decoder with skip
//! concatenations and a unit-normalized `D`-dimensional output.
//!
//! Encoder level `l` applies `conv3x3 -> SiLU` after `l` 2x2 average pools.
//! Each decoder level upsamples with a learnable 2x2 stride-2 transposed
//! convolution, concatenates the encoder features of the same resolution and
//! applies `conv3x3 -> SiLU`. A 1x1 head maps to `D` channels, followed by
//! per-pixel L2 normalization.

pub mod layers;
mod loss;
mod train;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use layers::Act;

pub use loss::{
    angular_softmax_loss, loss_and_gradients, pixel_accuracy, Example, Gradients,
    LossLayerParams, LossOutput,
};
pub use train::{evaluate, train, EpochStats, Method, OptimConfig, TrainingLog};

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub depth: usize,
    /// Channel count per level, `depth + 1` entries (full resolution first).
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            feature_dim: 32,
            depth: 2,
            channels: vec![16, 32, 32],
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || self.height % unit != 0 || self.width % unit != 0 {
            return Err(Error::InvalidArgument(format!(
                "input {}x{} must be a positive multiple of 2^depth = {unit}",
                self.height, self.width
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidArgument("feature dimension must be at least 2".into()));
        }
        if self.channels.len() != self.depth + 1 || self.channels.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "need {} positive channel counts, got {:?}",
                self.depth + 1,
                self.channels
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let ch = &self.channels;
        let mut out = Vec::new();
        for l in 0..=self.depth {
            let c_in = if l == 0 { 3 } else { ch[l - 1] };
            out.push((format!("enc{l}.weight"), vec![3, 3, c_in, ch[l]]));
            out.push((format!("enc{l}.bias"), vec![ch[l]]));
        }
        for l in (0..self.depth).rev() {
            out.push((format!("up{l}.weight"), vec![2, 2, ch[l + 1], ch[l]]));
            out.push((format!("up{l}.bias"), vec![ch[l]]));
            out.push((format!("dec{l}.weight"), vec![3, 3, 2 * ch[l], ch[l]]));
            out.push((format!("dec{l}.bias"), vec![ch[l]]));
        }
        out.push(("head.weight".into(), vec![ch[0], self.feature_dim]));
        out.push(("head.bias".into(), vec![self.feature_dim]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named network parameters in [`NetConfig::parameter_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    pub config: NetConfig,
    pub tensors: Vec<Tensor>,
}

impl NetWeights {
    /// He-style Gaussian initialization with zero biases.
    pub fn init(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; len]
                } else {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                    let std = (gain / fan_in as f64).sqrt();
                    (0..len)
                        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                        .collect()
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds weights from named tensors, checking names and shapes.
    pub fn from_tensors(config: NetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter tensors",
                expected: shapes.len(),
                got: tensors.len(),
            });
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            let len: usize = shape.iter().product();
            if &t.name != name || &t.shape != shape || t.data.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("tensor {name} has non-finite entries")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn slot(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }
}

/// Index of each tensor inside [`NetWeights::tensors`].
struct Layout {
    depth: usize,
}

impl Layout {
    fn enc(&self, l: usize) -> usize {
        2 * l
    }
    fn up(&self, l: usize) -> usize {
        2 * (self.depth + 1) + 4 * (self.depth - 1 - l)
    }
    fn dec(&self, l: usize) -> usize {
        self.up(l) + 2
    }
    fn head(&self) -> usize {
        2 * (self.depth + 1) + 4 * self.depth
    }
}

/// Network input: RGB in `[-0.5, 0.5]`, HWC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput(pub(crate) Act);

impl NetInput {
    pub fn from_image(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self(Act {
            h,
            w,
            c: 3,
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0 - 0.5).collect(),
        })
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::DimensionMismatch {
                what: "input pixels",
                expected: height * width * 3,
                got: data.len(),
            });
        }
        Ok(Self(Act {
            h: height,
            w: width,
            c: 3,
            data,
        }))
    }

    pub fn height(&self) -> usize {
        self.0.h
    }

    pub fn width(&self) -> usize {
        self.0.w
    }
}

/// `H x W` grid of unit `D`-vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Largest deviation of a pixel norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        self.data
            .chunks_exact(self.dim)
            .map(|v| (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct ForwardCache {
    enc_pre: Vec<Act>,
    enc_out: Vec<Act>,
    enc_col: Vec<Vec<f64>>,
    pooled: Vec<Act>,
    dec_in: Vec<Act>,
    dec_cat: Vec<Act>,
    dec_col: Vec<Vec<f64>>,
    dec_pre: Vec<Act>,
    head_in: Act,
    norms: Vec<f64>,
    out: Act,
}

pub(crate) fn forward_cached(weights: &NetWeights, input: &NetInput) -> Result<ForwardCache> {
    let cfg = &weights.config;
    if input.0.h != cfg.height || input.0.w != cfg.width {
        return Err(Error::InvalidArgument(format!(
            "input is {}x{}, network expects {}x{}",
            input.0.h, input.0.w, cfg.height, cfg.width
        )));
    }
    let lay = Layout { depth: cfg.depth };
    let mut enc_pre = Vec::new();
    let mut enc_out: Vec<Act> = Vec::new();
    let mut enc_col = Vec::new();
    let mut pooled = Vec::new();
    for l in 0..=cfg.depth {
        let src = if l == 0 {
            input.0.clone()
        } else {
            let p = layers::avg_pool(&enc_out[l - 1]);
            pooled.push(p.clone());
            p
        };
        let (pre, col) = layers::conv3x3(&src, weights.slot(lay.enc(l)), weights.slot(lay.enc(l) + 1));
        enc_out.push(layers::silu(&pre));
        enc_pre.push(pre);
        enc_col.push(col);
    }
    // decoder caches are indexed by level l
    let mut dec_in = vec![Act::zeros(0, 0, 0); cfg.depth];
    let mut dec_cat = vec![Act::zeros(0, 0, 0); cfg.depth];
    let mut dec_col = vec![Vec::new(); cfg.depth];
    let mut dec_pre = vec![Act::zeros(0, 0, 0); cfg.depth];
    let mut u = enc_out[cfg.depth].clone();
    for l in (0..cfg.depth).rev() {
        let up = layers::deconv2x2(&u, weights.slot(lay.up(l)), weights.slot(lay.up(l) + 1));
        let cat = layers::concat(&up, &enc_out[l]);
        let (pre, col) = layers::conv3x3(&cat, weights.slot(lay.dec(l)), weights.slot(lay.dec(l) + 1));
        dec_in[l] = u;
        u = layers::silu(&pre);
        dec_cat[l] = cat;
        dec_col[l] = col;
        dec_pre[l] = pre;
    }
    let head = layers::conv1x1(&u, weights.slot(lay.head()), weights.slot(lay.head() + 1));
    let (out, norms) = layers::normalize(&head);
    Ok(ForwardCache {
        enc_pre,
        enc_out,
        enc_col,
        pooled,
        dec_in,
        dec_cat,
        dec_col,
        dec_pre,
        head_in: u,
        norms,
        out,
    })
}

/// Backpropagates `dfeat` (gradient w.r.t. the normalized features) and
/// accumulates into `grads`.
pub(crate) fn backward(weights: &NetWeights, cache: &ForwardCache, dfeat: &Act, grads: &mut [Vec<f64>]) {
    let cfg = &weights.config;
    let lay = Layout { depth: cfg.depth };
    let dhead = layers::normalize_backward(&cache.out, &cache.norms, dfeat);
    let (hw_, hb_) = split_pair(grads, lay.head());
    let mut du = layers::conv1x1_backward(&cache.head_in, &dhead, weights.slot(lay.head()), hw_, hb_);
    // gradients flowing into encoder outputs through skips
    let mut denc: Vec<Option<Act>> = vec![None; cfg.depth + 1];
    for l in 0..cfg.depth {
        let dpre = layers::silu_backward(&cache.dec_pre[l], &du);
        let c_in = cache.dec_cat[l].c;
        let (dw, db) = split_pair(grads, lay.dec(l));
        let dcat = layers::conv3x3_backward(&cache.dec_col[l], &dpre, weights.slot(lay.dec(l)), c_in, dw, db);
        let (dup, dskip) = layers::split(&dcat, cfg.channels[l]);
        denc[l] = Some(dskip);
        let (dw, db) = split_pair(grads, lay.up(l));
        du = layers::deconv2x2_backward(&cache.dec_in[l], &dup, weights.slot(lay.up(l)), dw, db);
    }
    // du now holds the gradient w.r.t. the bottleneck output
    let mut carry = du;
    for l in (0..=cfg.depth).rev() {
        if let Some(skip) = denc[l].take() {
            for (c, s) in carry.data.iter_mut().zip(&skip.data) {
                *c += s;
            }
        }
        let dpre = layers::silu_backward(&cache.enc_pre[l], &carry);
        let c_in = if l == 0 { 3 } else { cfg.channels[l - 1] };
        let (dw, db) = split_pair(grads, lay.enc(l));
        let dsrc = layers::conv3x3_backward(&cache.enc_col[l], &dpre, weights.slot(lay.enc(l)), c_in, dw, db);
        if l > 0 {
            debug_assert_eq!(dsrc.h, cache.pooled[l - 1].h);
            carry = layers::avg_pool_backward(&dsrc);
            debug_assert_eq!(carry.c, cache.enc_out[l - 1].c);
        }
    }
}

fn split_pair(grads: &mut [Vec<f64>], i: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = grads.split_at_mut(i + 1);
    (&mut a[i], &mut b[0])
}

/// Per-pixel unit descriptors for one image.
pub fn forward(weights: &NetWeights, input: &NetInput) -> Result<FeatureMap> {
    let cache = forward_cached(weights, input)?;
    Ok(FeatureMap {
        height: cache.out.h,
        width: cache.out.w,
        dim: cache.out.c,
        data: cache.out.data,
    })
}

/// Convenience wrapper for an 8-bit RGB image.
pub fn extract_features(weights: &NetWeights, image: &RgbImage) -> Result<FeatureMap> {
    forward(weights, &NetInput::from_image(image))
}

/// Bilinear descriptor at a continuous location, renormalized to unit length.
///
/// The image covers `[-0.5, W - 0.5) x [-0.5, H - 0.5)`; locations outside it
/// return the zero vector. If the blend cancels out, the nearest pixel's
/// vector is returned.
pub fn sample_feature(fmap: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let (w, h) = (fmap.width as f64, fmap.height as f64);
    if !(x >= -0.5 && x < w - 0.5 && y >= -0.5 && y < h - 0.5) {
        return vec![0.0; fmap.dim];
    }
    let cx = x.clamp(0.0, w - 1.0);
    let cy = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(fmap.width - 1), (y0 + 1).min(fmap.height - 1));
    let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
    if fx == 0.0 && fy == 0.0 {
        return fmap.pixel(x0, y0).to_vec();
    }
    let mut v = vec![0.0; fmap.dim];
    for (px, py, wgt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if wgt != 0.0 {
            for (a, b) in v.iter_mut().zip(fmap.pixel(px, py)) {
                *a += wgt * b;
            }
        }
    }
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n < layers::NORM_GUARD {
        return fmap.pixel(cx.round() as usize, cy.round() as usize).to_vec();
    }
    v.iter_mut().for_each(|a| *a /= n);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetConfig {
        NetConfig {
            height: 16,
            width: 16,
            feature_dim: 6,
            depth: 2,
            channels: vec![4, 6, 6],
            seed: 3,
        }
    }

    fn noise_input(h: usize, w: usize, seed: u64) -> NetInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3)
            .map(|_| 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        NetInput::from_raw(h, w, data).unwrap()
    }

    #[test]
    fn output_shape_and_unit_norm() {
        let cfg = small_config();
        let w = NetWeights::init(&cfg).unwrap();
        let f = forward(&w, &noise_input(16, 16, 1)).unwrap();
        assert_eq!((f.height, f.width, f.dim), (16, 16, 6));
        assert!(f.max_norm_error() <= 1e-12);

        let bad = noise_input(8, 16, 1);
        assert!(forward(&w, &bad).is_err());
    }

    #[test]
    fn zero_weights_hit_the_guard() {
        let cfg = small_config();
        let mut w = NetWeights::init(&cfg).unwrap();
        for t in &mut w.tensors {
            t.data.fill(0.0);
        }
        let f = forward(&w, &noise_input(16, 16, 2)).unwrap();
        for px in f.data.chunks_exact(6) {
            assert_eq!(px, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let w = NetWeights::init(&cfg).unwrap();
        let a = forward(&w, &noise_input(16, 16, 5)).unwrap();
        let b = forward(&NetWeights::init(&cfg).unwrap(), &noise_input(16, 16, 5)).unwrap();
        assert_eq!(a, b);
        let c = forward(&w, &noise_input(16, 16, 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.height = 18;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.feature_dim = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.channels.pop();
        assert!(cfg.validate().is_err());
    }

    fn two_pixel_map() -> FeatureMap {
        let s = 0.5f64.sqrt();
        FeatureMap {
            height: 1,
            width: 2,
            dim: 2,
            data: vec![1.0, 0.0, s, s],
        }
    }

    #[test]
    fn sampling_rules() {
        let f = two_pixel_map();
        assert_eq!(sample_feature(&f, 1.0, 0.0), f.pixel(1, 0).to_vec());
        assert_eq!(sample_feature(&f, -5.0, -5.0), vec![0.0, 0.0]);
        let mid = sample_feature(&f, 0.5, 0.0);
        let s = 0.5f64.sqrt();
        let (u, v) = ((1.0 + s) / 2.0, s / 2.0);
        let n = (u * u + v * v).sqrt();
        assert!((mid[0] - u / n).abs() < 1e-15 && (mid[1] - v / n).abs() < 1e-15);
        let norm: f64 = sample_feature(&f, 0.3, 0.2).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_names_follow_layout() {
        let cfg = small_config();
        let shapes = cfg.parameter_shapes();
        let lay = Layout { depth: cfg.depth };
        assert_eq!(shapes[lay.enc(2)].0, "enc2.weight");
        assert_eq!(shapes[lay.up(1)].0, "up1.weight");
        assert_eq!(shapes[lay.dec(0)].0, "dec0.weight");
        assert_eq!(shapes[lay.head()].0, "head.weight");
        assert_eq!(shapes.len(), lay.head() + 2);
    }
}
