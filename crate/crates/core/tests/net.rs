use dff_core::net::{
    angular_softmax_loss, forward, loss_and_gradients, sample_feature, train, Example, FeatureMap, LossLayerParams,
    Method, NetConfig, NetInput, NetWeights, OptimConfig,
};
use dff_core::render::{LabeledImage, SENTINEL_NONE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_config(seed: u64) -> NetConfig {
    NetConfig {
        height: 16,
        width: 16,
        feature_dim: 32,
        depth: 2,
        channels: vec![16, 32, 32],
        seed,
    }
}

fn random_example(rng: &mut ChaCha8Rng, ks: &[usize], unlabeled: f64) -> Example {
    let data = (0..16 * 16 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let labels = ks
        .iter()
        .map(|&k| LabeledImage {
            width: 16,
            height: 16,
            labels: (0..256)
                .map(|_| {
                    if rng.gen_bool(unlabeled) {
                        SENTINEL_NONE
                    } else {
                        rng.gen_range(0..k as u32)
                    }
                })
                .collect(),
        })
        .collect();
    Example {
        input: NetInput::from_raw(16, 16, data).unwrap(),
        labels,
    }
}

fn setup(seed: u64, ks: &[usize], unlabeled: f64) -> (NetWeights, Vec<LossLayerParams>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = (0..2).map(|_| random_example(&mut rng, ks, unlabeled)).collect();
    let layers = ks.iter().map(|&k| LossLayerParams::random(k, 32, &mut rng).unwrap()).collect();
    (NetWeights::init(&desk_config(seed)).unwrap(), layers, batch)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn gradients_match_central_differences() {
    let ks = [8, 6, 8];
    let (weights, layers, batch) = setup(4, &ks, 0.2);
    let out = loss_and_gradients(&weights, &layers, &[], &batch).unwrap();
    let loss_at = |w: &NetWeights, l: &[LossLayerParams]| loss_and_gradients(w, l, &[], &batch).unwrap().loss;
    let step = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for t in 0..weights.tensors.len() {
        for _ in 0..12 {
            let i = rng.gen_range(0..weights.tensors[t].data.len());
            let mut w = weights.clone();
            w.tensors[t].data[i] += step;
            let lp = loss_at(&w, &layers);
            w.tensors[t].data[i] -= 2.0 * step;
            let lm = loss_at(&w, &layers);
            worst = worst.max(rel_err((lp - lm) / (2.0 * step), out.gradients.net[t][i]));
            checked += 1;
        }
    }
    for s in 0..layers.len() {
        for _ in 0..12 {
            let i = rng.gen_range(0..layers[s].vectors.len());
            let mut l = layers.clone();
            l[s].vectors[i] += step;
            let lp = loss_at(&weights, &l);
            l[s].vectors[i] -= 2.0 * step;
            let lm = loss_at(&weights, &l);
            worst = worst.max(rel_err((lp - lm) / (2.0 * step), out.gradients.layers[s][i]));
            checked += 1;
        }
    }
    assert!(checked >= 200);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn unlabeled_images_have_zero_gradient() {
    let (weights, layers, batch) = setup(5, &[4, 4], 1.0);
    let out = loss_and_gradients(&weights, &layers, &[], &batch).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.gradients.net.iter().flatten().all(|&g| g == 0.0));
    assert!(out.gradients.layers.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn segmentation_weight_scales_its_gradient() {
    let (weights, layers, batch) = setup(6, &[5, 5], 0.1);
    let strip = |b: &[Example], keep: usize| -> Vec<Example> {
        b.iter()
            .map(|e| {
                let mut e = e.clone();
                let other = 1 - keep;
                e.labels[other].labels.fill(SENTINEL_NONE);
                e
            })
            .collect()
    };
    let only0 = strip(&batch, 0);
    let one = loss_and_gradients(&weights, &layers, &[1.0, 1.0], &only0).unwrap();
    let two = loss_and_gradients(&weights, &layers, &[2.0, 1.0], &only0).unwrap();
    assert!((two.loss - 2.0 * one.loss).abs() <= 1e-12 * one.loss.abs());
    for (a, b) in one.gradients.net.iter().flatten().zip(two.gradients.net.iter().flatten()) {
        assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1e-300) + 1e-18);
    }
    for (a, b) in one.gradients.layers[0].iter().zip(&two.gradients.layers[0]) {
        assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs() + 1e-18);
    }
    // total is the sum of the per-segmentation losses
    let both = loss_and_gradients(&weights, &layers, &[], &batch).unwrap();
    let s1 = loss_and_gradients(&weights, &layers, &[], &strip(&batch, 1)).unwrap();
    assert!((both.loss - one.loss - s1.loss).abs() < 1e-12);
}

fn naive_loss(fmap: &FeatureMap, labels: &LabeledImage, layer: &LossLayerParams) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for y in 0..fmap.height {
        for x in 0..fmap.width {
            let t = labels.labels[y * fmap.width + x];
            if t == SENTINEL_NONE {
                continue;
            }
            let f = fmap.pixel(x, y);
            let dots: Vec<f64> = (0..layer.num_classes)
                .map(|j| layer.row(j).iter().zip(f).map(|(a, b)| a * b).sum())
                .collect();
            let denom: f64 = dots.iter().map(|d| d.exp()).sum();
            total += -(dots[t as usize].exp() / denom).ln();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[test]
fn loss_matches_scalar_loop_and_is_relabeling_invariant() {
    let (weights, layers, batch) = setup(7, &[9], 0.3);
    let fmap = forward(&weights, &batch[0].input).unwrap();
    let lab = &batch[0].labels[0];
    let fast = angular_softmax_loss(&fmap, lab, &layers[0]).unwrap();
    assert!((fast - naive_loss(&fmap, lab, &layers[0])).abs() < 1e-12);

    let perm: Vec<usize> = vec![3, 0, 8, 5, 1, 7, 2, 6, 4];
    let mut vectors = vec![0.0; layers[0].vectors.len()];
    for (old, &new) in perm.iter().enumerate() {
        vectors[new * 32..(new + 1) * 32].copy_from_slice(layers[0].row(old));
    }
    let permuted = LossLayerParams::new(9, 32, vectors).unwrap();
    let relabeled = LabeledImage {
        width: 16,
        height: 16,
        labels: lab
            .labels
            .iter()
            .map(|&l| if l == SENTINEL_NONE { l } else { perm[l as usize] as u32 })
            .collect(),
    };
    let again = angular_softmax_loss(&fmap, &relabeled, &permuted).unwrap();
    assert!((again - fast).abs() < 1e-12);
}

/// With unscaled cosine logits every score lies in [-1, 1], so the loss of a
/// pixel is at least `ln(1 + (K-1) e^-2)`.
fn cosine_softmax_floor(k: usize) -> f64 {
    (1.0 + (k as f64 - 1.0) * (-2.0f64).exp()).ln()
}

#[test]
fn toy_set_loss_decreases_toward_its_floor() {
    toy_set_training(OptimConfig::default());
}

#[test]
fn toy_set_trains_with_sgd_momentum() {
    toy_set_training(OptimConfig {
        method: Method::SgdMomentum,
        learning_rate: 0.2,
        ..OptimConfig::default()
    });
}

fn toy_set_training(base: OptimConfig) {
    let k = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = desk_config(21);
    // blocky label maps, one colour per patch, so the task is learnable
    let palette: Vec<[f64; 3]> = (0..k).map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).collect();
    let examples: Vec<Example> = (0..4)
        .map(|_| {
            let labels: Vec<u32> = (0..256)
                .map(|i| {
                    let (x, y) = (i % 16, i / 16);
                    ((x / 4 + 2 * (y / 8) + rng.gen_range(0..2)) % k) as u32
                })
                .collect();
            let data = labels.iter().flat_map(|&l| palette[l as usize]).collect();
            Example {
                input: NetInput::from_raw(16, 16, data).unwrap(),
                labels: vec![LabeledImage {
                    width: 16,
                    height: 16,
                    labels,
                }],
            }
        })
        .collect();
    let optim = OptimConfig {
        epochs: 200,
        seed: 2,
        ..base
    };
    let (_, _, log) = train(&cfg, &examples, &[k], &optim).unwrap();
    let floor = cosine_softmax_floor(k);
    assert!(floor > 0.2 * (k as f64).ln());
    assert!(log.final_eval.mean_loss < log.initial.mean_loss);
    assert!(log.final_eval.mean_loss >= floor - 1e-9);
    assert!(log.final_eval.accuracy > 0.9, "{:?}", log.final_eval);
    // a regular simplex of class vectors bounds what a balanced set can reach
    let simplex = (1.0 + (k as f64 - 1.0) * (-(k as f64) / (k as f64 - 1.0)).exp()).ln();
    let covered = (log.initial.mean_loss - log.final_eval.mean_loss) / (log.initial.mean_loss - simplex);
    assert!(covered > 0.5, "covered {covered} {:?} {:?}", log.initial, log.final_eval);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn sampled_features_are_unit(seed in 0u64..1000, x in -0.5f64..15.49, y in -0.5f64..15.49) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..16 * 16 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let input = NetInput::from_raw(16, 16, data).unwrap();
        let fmap = forward(&NetWeights::init(&desk_config(seed)).unwrap(), &input).unwrap();
        prop_assert!(fmap.max_norm_error() <= 1e-6);
        let v = sample_feature(&fmap, x, y);
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() <= 1e-6);
    }
}
