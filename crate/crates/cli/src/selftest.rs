//! Small oracle checks runnable from the installed binary.

use anyhow::{bail, ensure, Result};
use dff_core::container::TensorContainer;
use dff_core::descent::ridge_solve;
use dff_core::face_model::{CameraParams, FaceMesh};
use dff_core::matching::dense_match;
use dff_core::net::{angular_softmax_loss, forward, FeatureMap, LossLayerParams, NetConfig, NetInput, NetWeights};
use dff_core::render::{rasterize, LabeledImage, SENTINEL_NONE};
use nalgebra::{DMatrix, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = (&'static str, fn() -> Result<()>);

const CHECKS: &[Check] = &[
    ("loss closed form", loss_closed_form),
    ("ridge normal equations", ridge_toy),
    ("rasterizer coverage", raster_coverage),
    ("descriptor unit norm", unit_norm),
    ("dense self-match", self_match),
    ("container round trip", container_round_trip),
];

pub fn run() -> Result<()> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e:#}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} self-checks failed", CHECKS.len());
    }
    println!("all {} self-checks passed", CHECKS.len());
    Ok(())
}

/// One pixel whose feature equals class 0 among `k` orthogonal classes.
fn loss_closed_form() -> Result<()> {
    let k = 4;
    let mut h = vec![0.0; k * k];
    for i in 0..k {
        h[i * k + i] = 1.0;
    }
    let layer = LossLayerParams::new(k, k, h)?;
    let fmap = FeatureMap { height: 1, width: 1, dim: k, data: vec![1.0, 0.0, 0.0, 0.0] };
    let labels = LabeledImage { width: 1, height: 1, labels: vec![0] };
    let got = angular_softmax_loss(&fmap, &labels, &layer)?;
    let want = -(1f64.exp() / (1f64.exp() + (k - 1) as f64)).ln();
    ensure!((got - want).abs() < 1e-12, "loss {got}, expected {want}");
    let none = LabeledImage { width: 1, height: 1, labels: vec![SENTINEL_NONE] };
    ensure!(angular_softmax_loss(&fmap, &none, &layer)? == 0.0, "empty pixel set must give 0");
    Ok(())
}

/// Three samples, two features, one target, `λ = 0.5`, against a direct
/// solve of the augmented 3x3 normal equations.
fn ridge_toy() -> Result<()> {
    let f = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
    let t = DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 4.0]);
    let lambda = 0.5;
    let (r, b) = ridge_solve(&f, &t, lambda)?;
    let mut a = Matrix4::zeros();
    let mut rhs = Vector4::zeros();
    for i in 0..3 {
        let x = Vector3::new(f[(i, 0)], f[(i, 1)], 1.0);
        let xx = x * x.transpose();
        for p in 0..3 {
            rhs[p] += x[p] * t[(i, 0)];
            for q in 0..3 {
                a[(p, q)] += xx[(p, q)];
            }
        }
    }
    for p in 0..3 {
        a[(p, p)] += lambda;
    }
    a[(3, 3)] = 1.0;
    let sol = a.lu().solve(&rhs).ok_or_else(|| anyhow::anyhow!("oracle system singular"))?;
    let err = (r[(0, 0)] - sol[0]).abs().max((r[(0, 1)] - sol[1]).abs()).max((b[0] - sol[2]).abs());
    ensure!(err < 1e-12, "ridge solution off by {err}");
    Ok(())
}

/// A single triangle must cover exactly the pixel centres inside it.
fn raster_coverage() -> Result<()> {
    let mesh = FaceMesh {
        vertices: vec![Vector3::new(2.3, 1.1, 0.0), Vector3::new(13.7, 4.2, 0.0), Vector3::new(5.5, 12.9, 0.0)],
        triangles: vec![[0, 1, 2]],
    };
    let w = CameraParams { s: 1.0, alpha: 0.0, beta: 0.0, gamma: 0.0, tx: 0.0, ty: 0.0 };
    let buf = rasterize(&mesh, &w, 16, 16);
    let q: Vec<(f64, f64)> = mesh.triangles[0].iter().map(|&i| {
        let p = w.project(&mesh.vertices[i]);
        (p.x, p.y)
    }).collect();
    let edge = |a: (f64, f64), b: (f64, f64), x: f64, y: f64| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
    for y in 0..16 {
        for x in 0..16 {
            let (xf, yf) = (x as f64, y as f64);
            let e = [edge(q[0], q[1], xf, yf), edge(q[1], q[2], xf, yf), edge(q[2], q[0], xf, yf)];
            let inside = e.iter().all(|&v| v > 1e-9) || e.iter().all(|&v| v < -1e-9);
            let strictly_outside = e.iter().any(|&v| v > 1e-9) && e.iter().any(|&v| v < -1e-9);
            let covered = buf.triangle_at(x, y) == 0;
            ensure!(!(inside && !covered), "pixel ({x}, {y}) inside but not covered");
            ensure!(!(strictly_outside && covered), "pixel ({x}, {y}) outside but covered");
        }
    }
    Ok(())
}

fn unit_norm() -> Result<()> {
    let cfg = NetConfig { height: 16, width: 16, feature_dim: 8, depth: 2, channels: vec![4, 6, 6], seed: 3 };
    let weights = NetWeights::init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = (0..16 * 16 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let fmap = forward(&weights, &NetInput::from_raw(16, 16, data)?)?;
    let err = fmap.max_norm_error();
    ensure!(err < 1e-9, "norm error {err}");
    Ok(())
}

fn self_match() -> Result<()> {
    let (w, h, d) = (6, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut data = Vec::with_capacity(w * h * d);
    for _ in 0..w * h {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    let fmap = FeatureMap { height: h, width: w, dim: d, data };
    let mask = vec![true; w * h];
    let m = dense_match(&fmap, &mask, &fmap, &mask, 12.0)?;
    ensure!(m.matches.pairs.len() == w * h, "only {} of {} pixels matched", m.matches.pairs.len(), w * h);
    ensure!(m.matches.pairs.iter().all(|p| p.source == p.target), "a pixel matched elsewhere");
    Ok(())
}

fn container_round_trip() -> Result<()> {
    let mut c = TensorContainer::new();
    c.push_f64("a", &[2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 3.5])?;
    c.push_u32("b", &[3], &[0, 7, u32::MAX])?;
    c.push_text("c", "hello")?;
    let bytes = c.to_bytes();
    let back = TensorContainer::from_bytes(&bytes)?;
    ensure!(back == c, "decoded container differs");
    ensure!(back.to_bytes() == bytes, "re-encoded bytes differ");
    Ok(())
}
