//! Cascaded landmark alignment driven by descriptor regressions.

use image::RgbImage;
use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{check_dim, Error, Result};
use crate::face_model::{
    project_with, CameraParams, MorphableModel, ShapeParams, NUM_DENSE_LANDMARKS, NUM_LANDMARKS,
};
use crate::linalg::solve_spd_vec;
use crate::net::{extract_features, sample_feature, FeatureMap, NetWeights};
use crate::render::{reproject_landmarks, visibility_at_resolution};

/// Axis-aligned face box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl FaceBox {
    /// Tight box around `points`, grown by `margin` times its size on each side.
    pub fn around(points: &[Vector2<f64>], margin: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("no points for a face box".into()));
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let (w, h) = (x1 - x0, y1 - y0);
        Ok(Self {
            x: x0 - margin * w,
            y: y0 - margin * h,
            width: w * (1.0 + 2.0 * margin),
            height: h * (1.0 + 2.0 * margin),
        })
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.x + 0.5 * self.width, self.y + 0.5 * self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkState {
    pub x: Vec<Vector2<f64>>,
    pub u: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
    pub p: ShapeParams,
    pub w: CameraParams,
}

impl LandmarkState {
    /// The 136-vector `[x0, y0, x1, y1, ...]`.
    pub fn x_vector(&self) -> DVector<f64> {
        stack_points(&self.x)
    }
}

pub fn stack_points(points: &[Vector2<f64>]) -> DVector<f64> {
    DVector::from_iterator(points.len() * 2, points.iter().flat_map(|p| [p.x, p.y]))
}

pub fn unstack_points(v: &DVector<f64>) -> Vec<Vector2<f64>> {
    v.as_slice().chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect()
}

/// One cascade stage: `X <- X + R_x F + b_x`, `w <- w + R_w F + b_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentStage {
    pub r_x: DMatrix<f64>,
    pub b_x: DVector<f64>,
    pub r_w: DMatrix<f64>,
    pub b_w: DVector<f64>,
}

impl DescentStage {
    pub fn zeros(feature_len: usize) -> Self {
        Self {
            r_x: DMatrix::zeros(2 * NUM_LANDMARKS, feature_len),
            b_x: DVector::zeros(2 * NUM_LANDMARKS),
            r_w: DMatrix::zeros(6, feature_len),
            b_w: DVector::zeros(6),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.r_x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.feature_len();
        check_dim("R_x rows", 2 * NUM_LANDMARKS, self.r_x.nrows())?;
        check_dim("b_x length", 2 * NUM_LANDMARKS, self.b_x.len())?;
        check_dim("R_w rows", 6, self.r_w.nrows())?;
        check_dim("R_w columns", f, self.r_w.ncols())?;
        check_dim("b_w length", 6, self.b_w.len())?;
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !(finite(self.r_x.as_slice()) && finite(self.b_x.as_slice()) && finite(self.r_w.as_slice()) && finite(self.b_w.as_slice())) {
            return Err(Error::InvalidArgument("descent stage has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub omega_lan: f64,
    pub omega_reg: f64,
    pub iterations: usize,
    pub mean_camera: CameraParams,
    /// Side of the internal depth buffer used for visibility.
    pub visibility_resolution: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            omega_lan: 1.0,
            omega_reg: 1e-3,
            iterations: 3,
            mean_camera: CameraParams::default(),
            visibility_resolution: 128,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_lan >= 0.0 && self.omega_reg > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need omega_lan >= 0 and omega_reg > 0, got {} and {}",
                self.omega_lan, self.omega_reg
            )));
        }
        if self.iterations == 0 || self.visibility_resolution == 0 {
            return Err(Error::InvalidArgument("iterations and visibility resolution must be positive".into()));
        }
        Ok(())
    }
}

/// Landmark positions and visibility implied by `(p, w)` in a
/// `width x height` image.
pub fn landmark_state(
    model: &MorphableModel,
    p: ShapeParams,
    w: CameraParams,
    width: usize,
    height: usize,
    cfg: &AlignConfig,
) -> Result<LandmarkState> {
    let (x, u) = reproject_landmarks(model, &p, &w)?;
    let mesh = model.synthesize_shape(&p)?;
    let visible = visibility_at_resolution(&mesh, &w, &model.landmarks160, width, height, cfg.visibility_resolution)?;
    Ok(LandmarkState { x, u, visible, p, w })
}

/// Mean shape under the mean camera, scaled and shifted so its projected
/// 68-landmark box is centred in `face_box` at 85% of the box height.
pub fn initialize(
    model: &MorphableModel,
    face_box: &FaceBox,
    width: usize,
    height: usize,
    cfg: &AlignConfig,
) -> Result<LandmarkState> {
    if !(face_box.width > 0.0 && face_box.height > 0.0) || !face_box.x.is_finite() || !face_box.y.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate face box {face_box:?}")));
    }
    let p = ShapeParams::zeros(model);
    let unit = CameraParams {
        s: 1.0,
        tx: 0.0,
        ty: 0.0,
        ..cfg.mean_camera
    };
    let (lm, _) = reproject_landmarks(model, &p, &unit)?;
    let tight = FaceBox::around(&lm, 0.0)?;
    if !(tight.height > 0.0) {
        return Err(Error::InvalidArgument("mean landmarks have zero projected height".into()));
    }
    let s = 0.85 * face_box.height / tight.height;
    let c = tight.center() * s;
    let target = face_box.center();
    let w = CameraParams {
        s,
        tx: target.x - c.x,
        ty: target.y - c.y,
        ..unit
    };
    landmark_state(model, p, w, width, height, cfg)
}

/// Concatenated descriptors of the dense landmarks; invisible ones are zero.
pub fn stack_descriptors(fmap: &FeatureMap, state: &LandmarkState) -> Result<DVector<f64>> {
    check_dim("dense landmark positions", NUM_DENSE_LANDMARKS, state.u.len())?;
    check_dim("dense landmark visibility", NUM_DENSE_LANDMARKS, state.visible.len())?;
    let d = fmap.dim;
    let mut f = DVector::zeros(NUM_DENSE_LANDMARKS * d);
    for (i, (pt, &vis)) in state.u.iter().zip(&state.visible).enumerate() {
        if vis {
            let v = sample_feature(fmap, pt.x, pt.y);
            f.rows_mut(i * d, d).copy_from_slice(&v);
        }
    }
    Ok(f)
}

fn clamp_camera(mut w: CameraParams) -> CameraParams {
    use std::f64::consts::FRAC_PI_2;
    w.beta = w.beta.clamp(-FRAC_PI_2, FRAC_PI_2);
    w.s = w.s.max(1e-6);
    w
}

/// Regressed landmark target and camera for one stage.
pub fn descent_step(
    state: &LandmarkState,
    features: &DVector<f64>,
    stage: &DescentStage,
) -> Result<(DVector<f64>, CameraParams)> {
    check_dim("stacked descriptors", stage.feature_len(), features.len())?;
    check_dim("landmarks", NUM_LANDMARKS, state.x.len())?;
    let target = state.x_vector() + &stage.r_x * features + &stage.b_x;
    let dw = &stage.r_w * features + &stage.b_w;
    let mut a = state.w.to_array();
    for (k, v) in a.iter_mut().enumerate() {
        *v += dw[k];
    }
    Ok((target, clamp_camera(CameraParams::from_array(a))))
}

/// Affine map `Y(w, p) = c + J p` of the projected 68 landmarks.
pub fn landmark_affine_map(model: &MorphableModel, w: &CameraParams) -> (DVector<f64>, DMatrix<f64>) {
    let m = model.num_shape_params();
    let r = w.rotation();
    let mut c = DVector::zeros(2 * NUM_LANDMARKS);
    let mut j = DMatrix::zeros(2 * NUM_LANDMARKS, m);
    let id = &model.id_basis;
    let ex = &model.exp_basis;
    let m1 = model.num_id();
    for (l, &v) in model.landmarks68.iter().enumerate() {
        let q = nalgebra::Vector3::new(
            model.mean_shape[3 * v],
            model.mean_shape[3 * v + 1],
            model.mean_shape[3 * v + 2],
        );
        let y = project_with(&r, w, &q);
        c[2 * l] = y.x;
        c[2 * l + 1] = y.y;
        for a in 0..2 {
            let row = 2 * l + a;
            for k in 0..m {
                let col = |axis: usize| {
                    if k < m1 {
                        id[(3 * v + axis, k)]
                    } else {
                        ex[(3 * v + axis, k - m1)]
                    }
                };
                j[(row, k)] = w.s * (r[(a, 0)] * col(0) + r[(a, 1)] * col(1) + r[(a, 2)] * col(2));
            }
        }
    }
    (c, j)
}

/// Normal equations of the shape objective summed over `(target, camera)`
/// pairs with per-pair landmark weight `weight`.
pub(crate) fn shape_normal_equations(
    model: &MorphableModel,
    pairs: &[(&DVector<f64>, &CameraParams)],
    weight: f64,
    omega_reg: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = model.num_shape_params();
    let mut a = DMatrix::from_diagonal(&(model.inverse_eigen() * omega_reg));
    let mut b = DVector::zeros(m);
    for (target, w) in pairs {
        check_dim("landmark target", 2 * NUM_LANDMARKS, target.len())?;
        let (c, j) = landmark_affine_map(model, w);
        a += weight * j.transpose() * &j;
        b += weight * j.transpose() * (*target - c);
    }
    Ok((a, b))
}

/// Regularized least-squares shape fit to a 136-vector of landmark targets.
pub fn fit_shape(model: &MorphableModel, target_x: &DVector<f64>, w: &CameraParams, cfg: &AlignConfig) -> Result<ShapeParams> {
    cfg.validate()?;
    let (a, b) = shape_normal_equations(model, &[(target_x, w)], cfg.omega_lan, cfg.omega_reg)?;
    let p = solve_spd_vec(a, &b, "shape fit normal matrix")?;
    Ok(ShapeParams::from_vector(&p, model.num_id()))
}

/// One align stage on precomputed features.
pub fn align_stage(
    model: &MorphableModel,
    fmap: &FeatureMap,
    state: &LandmarkState,
    stage: &DescentStage,
    cfg: &AlignConfig,
) -> Result<LandmarkState> {
    let f = stack_descriptors(fmap, state)?;
    let (target, w) = descent_step(state, &f, stage)?;
    let p = fit_shape(model, &target, &w, cfg)?;
    landmark_state(model, p, w, fmap.width, fmap.height, cfg)
}

/// Runs the cascade on precomputed features; the trace holds the 68
/// landmarks before the first stage and after each stage.
pub fn align_features(
    model: &MorphableModel,
    fmap: &FeatureMap,
    face_box: &FaceBox,
    stages: &[DescentStage],
    cfg: &AlignConfig,
) -> Result<(LandmarkState, Vec<Vec<Vector2<f64>>>)> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("no descent stages".into()));
    }
    let mut state = initialize(model, face_box, fmap.width, fmap.height, cfg)?;
    let mut trace = vec![state.x.clone()];
    for stage in stages {
        state = align_stage(model, fmap, &state, stage, cfg)?;
        trace.push(state.x.clone());
    }
    Ok((state, trace))
}

/// Extracts descriptors once and runs the cascade.
pub fn align(
    model: &MorphableModel,
    image: &RgbImage,
    face_box: &FaceBox,
    weights: &NetWeights,
    stages: &[DescentStage],
    cfg: &AlignConfig,
) -> Result<(LandmarkState, Vec<Vec<Vector2<f64>>>)> {
    let fmap = extract_features(weights, image)?;
    align_features(model, &fmap, face_box, stages, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_model::generate_synthetic_model;

    #[test]
    fn box_around_points() {
        let pts = [Vector2::new(0.0, 0.0), Vector2::new(10.0, 20.0)];
        let b = FaceBox::around(&pts, 0.1).unwrap();
        assert_eq!((b.x, b.y, b.width, b.height), (-1.0, -2.0, 12.0, 24.0));
        assert!(FaceBox::around(&[], 0.1).is_err());
    }

    #[test]
    fn affine_map_matches_projection() {
        let model = generate_synthetic_model(3, 300, 6, 4).unwrap();
        let w = CameraParams {
            s: 7.0,
            alpha: 0.2,
            beta: -0.6,
            gamma: 0.1,
            tx: 30.0,
            ty: 25.0,
        };
        let p = ShapeParams {
            id: DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.2),
            exp: DVector::from_fn(4, |i, _| 0.05 * i as f64),
        };
        let (c, j) = landmark_affine_map(&model, &w);
        let y = c + j * p.to_vector();
        let (x, _) = reproject_landmarks(&model, &p, &w).unwrap();
        assert!((y - stack_points(&x)).amax() < 1e-10);
    }

    #[test]
    fn yaw_is_clamped() {
        let state = LandmarkState {
            x: vec![Vector2::zeros(); NUM_LANDMARKS],
            u: vec![],
            visible: vec![],
            p: ShapeParams {
                id: DVector::zeros(0),
                exp: DVector::zeros(0),
            },
            w: CameraParams::default(),
        };
        let mut stage = DescentStage::zeros(2);
        stage.b_w[2] = 3.0;
        stage.b_w[0] = -5.0;
        let (_, w) = descent_step(&state, &DVector::zeros(2), &stage).unwrap();
        assert_eq!(w.beta, std::f64::consts::FRAC_PI_2);
        assert!(w.s > 0.0);
        assert!(descent_step(&state, &DVector::zeros(3), &stage).is_err());
    }
}
