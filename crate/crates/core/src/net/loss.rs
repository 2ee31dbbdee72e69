//! Angular softmax (m = 1) over a bank of segmentations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::Act;
use super::{backward, forward_cached, FeatureMap, NetInput, NetWeights};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::render::{LabeledImage, SENTINEL_NONE};

/// Unit class vectors `h_j` for one segmentation, `K x D` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLayerParams {
    pub num_classes: usize,
    pub dim: usize,
    pub vectors: Vec<f64>,
}

impl LossLayerParams {
    pub fn new(num_classes: usize, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument("class layer needs K >= 1 and D >= 1".into()));
        }
        crate::error::check_dim("class vectors", num_classes * dim, vectors.len())?;
        let mut p = Self {
            num_classes,
            dim,
            vectors,
        };
        p.renormalize();
        Ok(p)
    }

    pub fn random<R: Rng>(num_classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let v = (0..num_classes * dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Self::new(num_classes, dim, v)
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.vectors[j * self.dim..(j + 1) * self.dim]
    }

    /// Projects every row back onto the unit sphere.
    pub fn renormalize(&mut self) {
        for row in self.vectors.chunks_exact_mut(self.dim) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < super::layers::NORM_GUARD {
                row.fill(0.0);
                row[0] = 1.0;
            } else {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    pub fn max_row_norm_error(&self) -> f64 {
        self.vectors
            .chunks_exact(self.dim)
            .map(|r| (r.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// One training image with a label map per segmentation.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: NetInput,
    pub labels: Vec<LabeledImage>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub net: Vec<Vec<f64>>,
    pub layers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub gradients: Gradients,
    /// Correctly classified labeled pixels, summed over segmentations.
    pub correct: usize,
    pub labeled: usize,
}

struct SegLoss {
    loss: f64,
    correct: usize,
    count: usize,
}

fn check_labels(fmap_h: usize, fmap_w: usize, labels: &LabeledImage, layer: &LossLayerParams) -> Result<()> {
    if labels.width != fmap_w || labels.height != fmap_h {
        return Err(Error::InvalidArgument(format!(
            "label map {}x{} does not match features {}x{}",
            labels.width, labels.height, fmap_w, fmap_h
        )));
    }
    if let Some(&bad) = labels
        .labels
        .iter()
        .find(|&&l| l != SENTINEL_NONE && l as usize >= layer.num_classes)
    {
        return Err(Error::OutOfRange {
            what: "patch label",
            index: bad as usize,
            len: layer.num_classes,
        });
    }
    Ok(())
}

/// Loss of one segmentation. With `grads`, writes `dF` (scaled by `weight`)
/// into `dfeat` and accumulates `weight * dH` into `dh`.
fn segment_loss(
    feats: &[f64],
    dim: usize,
    labels: &[u32],
    layer: &LossLayerParams,
    weight: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> SegLoss {
    let pix: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != SENTINEL_NONE)
        .map(|(i, _)| i)
        .collect();
    let n = pix.len();
    if n == 0 {
        return SegLoss {
            loss: 0.0,
            correct: 0,
            count: 0,
        };
    }
    let k = layer.num_classes;
    let mut fp = Vec::with_capacity(n * dim);
    for &i in &pix {
        fp.extend_from_slice(&feats[i * dim..(i + 1) * dim]);
    }
    let mut z = vec![0.0; n * k];
    gemm(n, dim, k, &fp, false, &layer.vectors, true, 0.0, &mut z);
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, &i) in pix.iter().enumerate() {
        let row = &mut z[r * k..(r + 1) * k];
        let t = labels[i] as usize;
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == t {
            correct += 1;
        }
        let m = row[best];
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += m + sum.ln() - row[t];
        // turn the row into dl/dz for this pixel
        let scale = weight / n as f64;
        for v in row.iter_mut() {
            *v = (*v - m).exp() / sum * scale;
        }
        row[t] -= scale;
    }
    if let Some((dfeat, dh)) = grads {
        let mut dfp = vec![0.0; n * dim];
        gemm(n, k, dim, &z, false, &layer.vectors, false, 0.0, &mut dfp);
        for (r, &i) in pix.iter().enumerate() {
            dfeat[i * dim..(i + 1) * dim].copy_from_slice(&dfp[r * dim..(r + 1) * dim]);
        }
        gemm(k, n, dim, &z, true, &fp, false, 1.0, dh);
    }
    SegLoss {
        loss: loss / n as f64,
        correct,
        count: n,
    }
}

/// Mean per-pixel angular softmax loss over labeled pixels; 0 if none.
pub fn angular_softmax_loss(fmap: &FeatureMap, labels: &LabeledImage, layer: &LossLayerParams) -> Result<f64> {
    check_labels(fmap.height, fmap.width, labels, layer)?;
    crate::error::check_dim("feature dimension", layer.dim, fmap.dim)?;
    let s = segment_loss(&fmap.data, fmap.dim, &labels.labels, layer, 1.0, None);
    if s.count == 0 {
        log::debug!("angular softmax loss over an empty pixel set");
    }
    Ok(s.loss)
}

/// `(correct, labeled)` counts of argmax patch classification.
pub fn pixel_accuracy(fmap: &FeatureMap, labels: &LabeledImage, layer: &LossLayerParams) -> Result<(usize, usize)> {
    check_labels(fmap.height, fmap.width, labels, layer)?;
    crate::error::check_dim("feature dimension", layer.dim, fmap.dim)?;
    let s = segment_loss(&fmap.data, fmap.dim, &labels.labels, layer, 1.0, None);
    Ok((s.correct, s.count))
}

/// Batch loss `mean_images sum_s w_s l_s` and its exact gradients.
///
/// `seg_weights` may be empty, meaning all ones.
pub fn loss_and_gradients(
    weights: &NetWeights,
    layers: &[LossLayerParams],
    seg_weights: &[f64],
    batch: &[Example],
) -> Result<LossOutput> {
    if !seg_weights.is_empty() {
        crate::error::check_dim("segmentation weights", layers.len(), seg_weights.len())?;
    }
    let dim = weights.config.feature_dim;
    for l in layers {
        crate::error::check_dim("class vector dimension", dim, l.dim)?;
    }
    let mut grads = Gradients {
        net: weights.zeros_like(),
        layers: layers.iter().map(|l| vec![0.0; l.vectors.len()]).collect(),
    };
    let mut total = 0.0;
    let mut correct = 0;
    let mut labeled = 0;
    let inv_b = 1.0 / batch.len().max(1) as f64;
    for ex in batch {
        crate::error::check_dim("label maps per image", layers.len(), ex.labels.len())?;
        let cache = forward_cached(weights, &ex.input)?;
        let (h, w) = (cache.out.h, cache.out.w);
        let mut dfeat = Act::zeros(h, w, dim);
        let mut scratch = vec![0.0; h * w * dim];
        let mut any = false;
        for (s, (layer, lab)) in layers.iter().zip(&ex.labels).enumerate() {
            check_labels(h, w, lab, layer)?;
            let ws = seg_weights.get(s).copied().unwrap_or(1.0) * inv_b;
            scratch.fill(0.0);
            let r = segment_loss(
                &cache.out.data,
                dim,
                &lab.labels,
                layer,
                ws,
                Some((&mut scratch, &mut grads.layers[s])),
            );
            total += ws * r.loss;
            correct += r.correct;
            labeled += r.count;
            if r.count > 0 {
                any = true;
                for (a, b) in dfeat.data.iter_mut().zip(&scratch) {
                    *a += b;
                }
            }
        }
        if any {
            backward(weights, &cache, &dfeat, &mut grads.net);
        }
    }
    if !total.is_finite() {
        let parameter = weights
            .tensors
            .iter()
            .zip(&grads.net)
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(t, _)| t.name.clone())
            .unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite {
            location: "loss_and_gradients".into(),
            parameter,
        });
    }
    Ok(LossOutput {
        loss: total,
        gradients: grads,
        correct,
        labeled,
    })
}
