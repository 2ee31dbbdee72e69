//! Learning the cascade of generic descent directions.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{
    descent_step, initialize, landmark_state, shape_normal_equations, stack_descriptors, stack_points, unstack_points,
    AlignConfig, DescentStage, FaceBox, LandmarkState,
};
use crate::error::{check_dim, Error, Result};
use crate::eval::nme_bbox;
use crate::face_model::{CameraParams, MorphableModel, ShapeParams, NUM_LANDMARKS};
use crate::linalg::{gemm, solve_spd, solve_spd_vec};
use crate::net::FeatureMap;

/// Ridge weights; `None` means `1e-3 * N` for `N` training samples (images
/// times boxes per image).
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionConfig {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub stages: usize,
    /// Margin of the training face boxes around the true landmarks, per side.
    pub box_margin: f64,
    /// Initial boxes per training image: the margin box plus
    /// `boxes_per_image - 1` randomly perturbed copies.
    pub boxes_per_image: usize,
    /// Perturbation range as a fraction of the box size: the center moves by
    /// up to this much per axis and the size scales by up to `1 +/- box_jitter`.
    pub box_jitter: f64,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            lambda1: None,
            lambda2: None,
            stages: 3,
            box_margin: 0.1,
            boxes_per_image: 5,
            box_jitter: 0.05,
            seed: 0,
        }
    }
}

impl RegressionConfig {
    pub fn lambdas(&self, n: usize) -> (f64, f64) {
        let d = 1e-3 * n as f64;
        (self.lambda1.unwrap_or(d), self.lambda2.unwrap_or(d))
    }
}

/// Minimizes `sum_i |y_i - R f_i - b|^2 + lambda (|R|_F^2 + |b|^2)`.
///
/// `features` is `N x F`, `targets` is `N x T`; returns `R` (`T x F`) and
/// `b`. Solves in the primal `(F+1)`-dimensional or the dual
/// `N`-dimensional form, whichever is smaller.
pub fn ridge_solve(features: &DMatrix<f64>, targets: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = features.nrows();
    let f = features.ncols();
    let t = targets.ncols();
    if n == 0 {
        return Err(Error::InvalidArgument("ridge regression needs at least one sample".into()));
    }
    check_dim("target rows", n, targets.nrows())?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge weight {lambda} must be nonnegative")));
    }
    // augmented design A = [F 1], row-major N x (F+1)
    let fa = f + 1;
    let mut a = vec![0.0; n * fa];
    for i in 0..n {
        for j in 0..f {
            a[i * fa + j] = features[(i, j)];
        }
        a[i * fa + f] = 1.0;
    }
    let y: Vec<f64> = (0..n).flat_map(|i| (0..t).map(move |j| (i, j))).map(|(i, j)| targets[(i, j)]).collect();
    // coefficient matrix W, (F+1) x T row-major
    let w = if n >= fa || lambda == 0.0 {
        if n < fa {
            return Err(Error::Singular("ridge normal matrix (rank deficient at lambda = 0)"));
        }
        let mut g = vec![0.0; fa * fa];
        gemm(fa, n, fa, &a, true, &a, false, 0.0, &mut g);
        let mut rhs = vec![0.0; fa * t];
        gemm(fa, n, t, &a, true, &y, false, 0.0, &mut rhs);
        let mut gm = DMatrix::from_row_slice(fa, fa, &g);
        for i in 0..fa {
            gm[(i, i)] += lambda;
        }
        let sol = solve_spd(gm, &DMatrix::from_row_slice(fa, t, &rhs), "ridge normal matrix")?;
        if lambda == 0.0 && sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("ridge normal matrix (rank deficient at lambda = 0)"));
        }
        sol
    } else {
        // W = A^T (A A^T + lambda I)^-1 Y
        let mut k = vec![0.0; n * n];
        gemm(n, fa, n, &a, false, &a, true, 0.0, &mut k);
        let mut km = DMatrix::from_row_slice(n, n, &k);
        for i in 0..n {
            km[(i, i)] += lambda;
        }
        let alpha = solve_spd(km, &DMatrix::from_row_slice(n, t, &y), "ridge dual matrix")?;
        let alpha_rows: Vec<f64> = (0..n).flat_map(|i| (0..t).map(move |j| (i, j))).map(|(i, j)| alpha[(i, j)]).collect();
        let mut wv = vec![0.0; fa * t];
        gemm(fa, n, t, &a, true, &alpha_rows, false, 0.0, &mut wv);
        DMatrix::from_row_slice(fa, t, &wv)
    };
    let r = w.rows(0, f).transpose();
    let b = w.row(f).transpose();
    Ok((r, b))
}

/// Stage regressions from the current per-image states to the truth.
pub fn learn_stage(
    features: &DMatrix<f64>,
    states: &[LandmarkState],
    truth_x: &[DVector<f64>],
    truth_w: &[CameraParams],
    cfg: &RegressionConfig,
) -> Result<DescentStage> {
    let n = states.len();
    check_dim("feature rows", n, features.nrows())?;
    check_dim("true landmark sets", n, truth_x.len())?;
    check_dim("true cameras", n, truth_w.len())?;
    let mut dx = DMatrix::zeros(n, 2 * NUM_LANDMARKS);
    let mut dw = DMatrix::zeros(n, 6);
    for i in 0..n {
        check_dim("true landmarks", 2 * NUM_LANDMARKS, truth_x[i].len())?;
        let d = &truth_x[i] - states[i].x_vector();
        dx.row_mut(i).copy_from(&d.transpose());
        let (a, b) = (truth_w[i].to_array(), states[i].w.to_array());
        for k in 0..6 {
            dw[(i, k)] = a[k] - b[k];
        }
    }
    let (l1, l2) = cfg.lambdas(n);
    let (r_x, b_x) = ridge_solve(features, &dx, l1)?;
    let (r_w, b_w) = ridge_solve(features, &dw, l2)?;
    Ok(DescentStage { r_x, b_x, r_w, b_w })
}

/// Shared shape that best explains every image's landmark targets under its
/// own camera, with landmark weight `omega_lan / N`.
pub fn update_generic_shape(
    model: &MorphableModel,
    targets: &[DVector<f64>],
    cameras: &[CameraParams],
    cfg: &AlignConfig,
) -> Result<ShapeParams> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no training images for the generic shape".into()));
    }
    check_dim("cameras", targets.len(), cameras.len())?;
    let pairs: Vec<_> = targets.iter().zip(cameras).collect();
    let (a, b) = shape_normal_equations(model, &pairs, cfg.omega_lan / targets.len() as f64, cfg.omega_reg)?;
    let p = solve_spd_vec(a, &b, "generic shape normal matrix")?;
    Ok(ShapeParams::from_vector(&p, model.num_id()))
}

/// One training image for the cascade.
#[derive(Debug, Clone)]
pub struct CascadeSample<'a> {
    pub features: &'a FeatureMap,
    pub truth_landmarks: &'a [Vector2<f64>],
    pub truth_camera: CameraParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeLog {
    /// Mean training NME at initialization and after each stage.
    pub train_nme: Vec<f64>,
    pub generic_shapes: Vec<ShapeParams>,
}

fn mean_nme(states: &[LandmarkState], samples: &[CascadeSample]) -> Result<f64> {
    let mut total = 0.0;
    for (s, smp) in states.iter().zip(samples) {
        let bbox = FaceBox::around(smp.truth_landmarks, 0.0)?;
        total += nme_bbox(&s.x, smp.truth_landmarks, &vec![true; s.x.len()], &bbox)?;
    }
    Ok(total / states.len() as f64)
}

/// Learns `cfg.stages` stages on precomputed descriptor maps.
pub fn learn_cascade(
    model: &MorphableModel,
    samples: &[CascadeSample],
    align_cfg: &AlignConfig,
    cfg: &RegressionConfig,
) -> Result<(Vec<DescentStage>, CascadeLog)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no cascade training samples".into()));
    }
    align_cfg.validate()?;
    if cfg.boxes_per_image == 0 || !(0.0..1.0).contains(&cfg.box_jitter) {
        return Err(Error::InvalidArgument(format!(
            "bad box augmentation: {} boxes per image, jitter {}",
            cfg.boxes_per_image, cfg.box_jitter
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut expanded = Vec::with_capacity(samples.len() * cfg.boxes_per_image);
    let mut boxes = Vec::with_capacity(expanded.capacity());
    for s in samples {
        let bbox = FaceBox::around(s.truth_landmarks, cfg.box_margin)?;
        for b in 0..cfg.boxes_per_image {
            boxes.push(if b == 0 { bbox } else { jitter_box(&bbox, cfg.box_jitter, &mut rng) });
            expanded.push(s.clone());
        }
    }
    let samples = &expanded[..];
    let n = samples.len();
    let mut states = samples
        .iter()
        .zip(&boxes)
        .map(|(s, bbox)| initialize(model, bbox, s.features.width, s.features.height, align_cfg))
        .collect::<Result<Vec<_>>>()?;
    let truth_x: Vec<DVector<f64>> = samples.iter().map(|s| stack_points(s.truth_landmarks)).collect();
    let truth_w: Vec<CameraParams> = samples.iter().map(|s| s.truth_camera).collect();
    let mut log = CascadeLog {
        train_nme: vec![mean_nme(&states, samples)?],
        generic_shapes: Vec::new(),
    };
    let mut stages = Vec::with_capacity(cfg.stages);
    for k in 0..cfg.stages {
        let stacks = samples
            .iter()
            .zip(&states)
            .map(|(s, st)| stack_descriptors(s.features, st))
            .collect::<Result<Vec<_>>>()?;
        let flen = stacks[0].len();
        let features = DMatrix::from_fn(n, flen, |i, j| stacks[i][j]);
        let stage = learn_stage(&features, &states, &truth_x, &truth_w, cfg)?;
        let mut targets = Vec::with_capacity(n);
        let mut cameras = Vec::with_capacity(n);
        for (st, f) in states.iter().zip(&stacks) {
            let (t, w) = descent_step(st, f, &stage)?;
            targets.push(t);
            cameras.push(w);
        }
        let p_bar = update_generic_shape(model, &targets, &cameras, align_cfg)?;
        states = samples
            .iter()
            .zip(&cameras)
            .map(|(s, w)| landmark_state(model, p_bar.clone(), *w, s.features.width, s.features.height, align_cfg))
            .collect::<Result<Vec<_>>>()?;
        let nme = mean_nme(&states, samples)?;
        log::info!("stage {k}: training NME {nme:.5}");
        log.train_nme.push(nme);
        log.generic_shapes.push(p_bar);
        stages.push(stage);
    }
    Ok((stages, log))
}

fn jitter_box(b: &FaceBox, jitter: f64, rng: &mut ChaCha8Rng) -> FaceBox {
    let c = b.center();
    let k = 1.0 + rng.gen_range(-jitter..=jitter);
    let (w, h) = (b.width * k, b.height * k);
    let cx = c.x + rng.gen_range(-jitter..=jitter) * b.width;
    let cy = c.y + rng.gen_range(-jitter..=jitter) * b.height;
    FaceBox {
        x: cx - 0.5 * w,
        y: cy - 0.5 * h,
        width: w,
        height: h,
    }
}

/// Landmark 136-vector as points, for callers holding stacked targets.
pub fn target_points(v: &DVector<f64>) -> Vec<Vector2<f64>> {
    unstack_points(v)
}
