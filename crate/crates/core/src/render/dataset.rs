use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{render_image, RenderedSample};
use crate::error::{Error, Result};
use crate::face_model::{
    project_points, AlbedoParams, CameraParams, MorphableModel, ShapeParams,
};

/// Sampling ranges for synthetic training faces.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    /// Absolute yaw limit in degrees (uniform in `[-yaw, yaw]`).
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    /// Range of the projected face height as a fraction of image height.
    pub height_fraction: (f64, f64),
    /// Per-entry RMS of the albedo perturbation.
    pub albedo_rms: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            max_yaw_deg: 90.0,
            max_pitch_deg: 20.0,
            max_roll_deg: 20.0,
            height_fraction: (0.6, 0.9),
            albedo_rms: 0.06,
        }
    }
}

/// Projected 68 and 160 landmarks for shape `p` under camera `w`.
pub fn reproject_landmarks(
    model: &MorphableModel,
    p: &ShapeParams,
    w: &CameraParams,
) -> Result<(Vec<Vector2<f64>>, Vec<Vector2<f64>>)> {
    let lm68 = model.vertices_of(p, &model.landmarks68)?;
    let lm160 = model.vertices_of(p, &model.landmarks160)?;
    Ok((project_points(&lm68, w), project_points(&lm160, w)))
}

fn gaussian(rng: &mut ChaCha8Rng, var: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * var.sqrt()
}

fn symmetric(rng: &mut ChaCha8Rng, limit_deg: f64) -> f64 {
    if limit_deg <= 0.0 {
        0.0
    } else {
        rng.gen_range(-limit_deg..=limit_deg).to_radians()
    }
}

/// Draws one sample; sample `index` uses its own stream of the seeded
/// generator so samples are independent of generation order.
fn sample_one(model: &MorphableModel, seed: u64, index: u64, cfg: &DatasetConfig) -> Result<RenderedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let p = ShapeParams {
        id: DVector::from_iterator(model.num_id(), model.id_eigen.iter().map(|&v| gaussian(&mut rng, v))),
        exp: DVector::from_iterator(model.num_exp(), model.exp_eigen.iter().map(|&v| gaussian(&mut rng, v))),
    };
    let alb_sigma = cfg.albedo_rms * (model.mean_albedo.len() as f64).sqrt();
    let a = AlbedoParams {
        alb: DVector::from_fn(model.alb_basis.ncols(), |_, _| gaussian(&mut rng, alb_sigma * alb_sigma)),
    };
    let yaw = symmetric(&mut rng, cfg.max_yaw_deg);
    let pitch = symmetric(&mut rng, cfg.max_pitch_deg);
    let roll = symmetric(&mut rng, cfg.max_roll_deg);

    let unit = CameraParams {
        s: 1.0,
        alpha: pitch,
        beta: yaw,
        gamma: roll,
        tx: 0.0,
        ty: 0.0,
    };
    let mesh = model.synthesize_shape(&p)?;
    let proj = project_points(&mesh.vertices, &unit);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for q in &proj {
        x0 = x0.min(q.x);
        x1 = x1.max(q.x);
        y0 = y0.min(q.y);
        y1 = y1.max(q.y);
    }
    let (w_px, h_px) = (cfg.width as f64, cfg.height as f64);
    let frac = rng.gen_range(cfg.height_fraction.0..=cfg.height_fraction.1);
    let mut s = frac * h_px / (y1 - y0);
    s = s.min(0.95 * w_px / (x1 - x0));
    let tx_range = (-s * x0, w_px - 1.0 - s * x1);
    let ty_range = (-s * y0, h_px - 1.0 - s * y1);
    let tx = rng.gen_range(tx_range.0..=tx_range.1.max(tx_range.0));
    let ty = rng.gen_range(ty_range.0..=ty_range.1.max(ty_range.0));
    let camera = CameraParams { s, tx, ty, ..unit };

    // uniform on the hemisphere facing the camera
    let light = loop {
        let v = Vector3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            let mut l: Vector3<f64> = v / n;
            l.z = l.z.abs();
            break l;
        }
    };
    render_image(model, &p, &a, &camera, &light, cfg.width, cfg.height)
}

/// Deterministic synthetic dataset of `count` rendered faces.
pub fn generate_dataset(
    model: &MorphableModel,
    count: usize,
    seed: u64,
    cfg: &DatasetConfig,
) -> Result<Vec<RenderedSample>> {
    if cfg.width == 0 || cfg.height == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let (lo, hi) = cfg.height_fraction;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!("bad height fraction range {lo}..{hi}")));
    }
    (0..count as u64).map(|i| sample_one(model, seed, i, cfg)).collect()
}
