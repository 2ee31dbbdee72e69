//! Mini-batch SGD with momentum over the network and the class layers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{loss_and_gradients, Example, LossLayerParams};
use super::{NetConfig, NetWeights};
use crate::error::{Error, Result};

/// Update rule. For `Adam`, `momentum` is the first-moment decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Per-segmentation loss weights; empty means all ones.
    pub seg_weights: Vec<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 4,
            epochs: 20,
            seed: 0,
            seg_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// `initial` and `final_eval` are full passes with frozen parameters; the
/// per-epoch entries average the minibatch values seen during the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub initial: EpochStats,
    pub epochs: Vec<EpochStats>,
    pub final_eval: EpochStats,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# epoch mean_loss accuracy\n");
        s += &format!("initial {:.9} {:.6}\n", self.initial.mean_loss, self.initial.accuracy);
        for e in &self.epochs {
            s += &format!("{} {:.9} {:.6}\n", e.epoch, e.mean_loss, e.accuracy);
        }
        s += &format!("final {:.9} {:.6}\n", self.final_eval.mean_loss, self.final_eval.accuracy);
        s
    }
}

/// Mean loss and pixel accuracy over `examples` without updating anything.
pub fn evaluate(
    weights: &NetWeights,
    layers: &[LossLayerParams],
    seg_weights: &[f64],
    examples: &[Example],
    epoch: usize,
) -> Result<EpochStats> {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut labeled = 0;
    for ex in examples {
        let fmap = super::forward(weights, &ex.input)?;
        for (s, (layer, lab)) in layers.iter().zip(&ex.labels).enumerate() {
            let w = seg_weights.get(s).copied().unwrap_or(1.0);
            loss += w * super::angular_softmax_loss(&fmap, lab, layer)?;
            let (c, n) = super::pixel_accuracy(&fmap, lab, layer)?;
            correct += c;
            labeled += n;
        }
    }
    Ok(EpochStats {
        epoch,
        mean_loss: loss / examples.len().max(1) as f64,
        accuracy: correct as f64 / labeled.max(1) as f64,
    })
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-tensor optimizer state: velocity (or first moment) and second moment.
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Slot {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], optim: &OptimConfig, t: i32) {
        let (lr, mu) = (optim.learning_rate, optim.momentum);
        match optim.method {
            Method::SgdMomentum => {
                for ((p, m), g) in params.iter_mut().zip(self.m.iter_mut()).zip(grad) {
                    *m = mu * *m - lr * g;
                    *p += *m;
                }
            }
            Method::Adam => {
                let c1 = 1.0 - mu.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, m), v), g) in params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()).zip(grad) {
                    *m = mu * *m + (1.0 - mu) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Trains a fresh network and one class layer per entry of `num_classes`.
pub fn train(
    config: &NetConfig,
    examples: &[Example],
    num_classes: &[usize],
    optim: &OptimConfig,
) -> Result<(NetWeights, Vec<LossLayerParams>, TrainingLog)> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    if optim.batch_size == 0 || !(optim.learning_rate > 0.0) || !(0.0..1.0).contains(&optim.momentum) {
        return Err(Error::InvalidArgument(format!("bad optimizer settings {optim:?}")));
    }
    let mut weights = NetWeights::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut layers = num_classes
        .iter()
        .map(|&k| LossLayerParams::random(k, config.feature_dim, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let sw = &optim.seg_weights;
    let initial = evaluate(&weights, &layers, sw, examples, 0)?;
    log::info!("initial loss {:.6} accuracy {:.4}", initial.mean_loss, initial.accuracy);

    let mut slots_net: Vec<Slot> = weights.tensors.iter().map(|t| Slot::new(t.data.len())).collect();
    let mut slots_layers: Vec<Slot> = layers.iter().map(|l| Slot::new(l.vectors.len())).collect();
    let mut step = 0;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epochs = Vec::with_capacity(optim.epochs);
    for epoch in 1..=optim.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut labeled = 0;
        for (b, chunk) in order.chunks(optim.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let out = loss_and_gradients(&weights, &layers, sw, &batch).map_err(|e| match e {
                Error::NonFinite { parameter, .. } => Error::NonFinite {
                    location: format!("epoch {epoch} batch {b}"),
                    parameter,
                },
                other => other,
            })?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            labeled += out.labeled;
            step += 1;
            for ((t, s), g) in weights.tensors.iter_mut().zip(&mut slots_net).zip(&out.gradients.net) {
                s.step(&mut t.data, g, optim, step);
            }
            for ((l, s), g) in layers.iter_mut().zip(&mut slots_layers).zip(&out.gradients.layers) {
                s.step(&mut l.vectors, g, optim, step);
                l.renormalize();
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / examples.len() as f64,
            accuracy: correct as f64 / labeled.max(1) as f64,
        };
        log::info!("epoch {epoch} loss {:.6} accuracy {:.4}", stats.mean_loss, stats.accuracy);
        epochs.push(stats);
    }
    let final_eval = evaluate(&weights, &layers, sw, examples, optim.epochs)?;
    Ok((
        weights,
        layers,
        TrainingLog {
            initial,
            epochs,
            final_eval,
        },
    ))
}
