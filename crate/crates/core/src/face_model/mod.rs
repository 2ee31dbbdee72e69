//! Parametric face representation: morphable shape and albedo model,
//! Euler-angle rotations and weak-perspective projection.
//!
//! Shapes are stacked as `[x0, y0, z0, x1, y1, z1, ...]`. Model space has x to
//! the subject's left in the image, y pointing down (chin at positive y) and z
//! towards the camera, so the identity camera renders an upright face with
//! image origin at the top-left.

mod generate;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::error::{check_dim, Error, Result};

pub use generate::generate_synthetic_model;

/// Number of sparse alignment landmarks.
pub const NUM_LANDMARKS: usize = 68;
/// Number of dense landmarks used to drive the descent updates.
pub const NUM_DENSE_LANDMARKS: usize = 160;

/// Triangle mesh with fixed connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl FaceMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            for &i in tri {
                if i >= n {
                    return Err(Error::OutOfRange {
                        what: "mesh vertices",
                        index: i,
                        len: n,
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t} repeats a vertex: {tri:?}"
                )));
            }
        }
        Ok(())
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for tri in &self.triangles {
            let [a, b, c] = tri.map(|i| self.vertices[i]);
            let n = (b - a).cross(&(c - a));
            for &i in tri {
                normals[i] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    pub fn triangle_centroids(&self) -> Vec<Vector3<f64>> {
        self.triangles
            .iter()
            .map(|t| (self.vertices[t[0]] + self.vertices[t[1]] + self.vertices[t[2]]) / 3.0)
            .collect()
    }

    pub fn triangle_areas(&self) -> Vec<f64> {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .collect()
    }
}

/// Linear morphable model of face shape (identity + expression) and albedo.
///
/// Basis columns have unit norm; the variance of each mode lives in the
/// matching eigenvalue vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub mean_shape: DVector<f64>,
    pub id_basis: DMatrix<f64>,
    pub exp_basis: DMatrix<f64>,
    pub mean_albedo: DVector<f64>,
    pub alb_basis: DMatrix<f64>,
    pub id_eigen: DVector<f64>,
    pub exp_eigen: DVector<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub landmarks68: Vec<usize>,
    pub landmarks160: Vec<usize>,
}

impl MorphableModel {
    pub fn num_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn num_id(&self) -> usize {
        self.id_basis.ncols()
    }

    pub fn num_exp(&self) -> usize {
        self.exp_basis.ncols()
    }

    pub fn num_shape_params(&self) -> usize {
        self.num_id() + self.num_exp()
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let len = self.mean_shape.len();
        if len % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "mean shape length {len} is not a multiple of 3"
            )));
        }
        check_dim("identity basis rows", len, self.id_basis.nrows())?;
        check_dim("expression basis rows", len, self.exp_basis.nrows())?;
        check_dim("mean albedo", len, self.mean_albedo.len())?;
        check_dim("albedo basis rows", len, self.alb_basis.nrows())?;
        check_dim("identity eigenvalues", self.num_id(), self.id_eigen.len())?;
        check_dim("expression eigenvalues", self.num_exp(), self.exp_eigen.len())?;
        if self.num_id() == 0 || self.num_exp() == 0 {
            return Err(Error::InvalidArgument("empty shape basis".into()));
        }
        if self.id_eigen.iter().chain(self.exp_eigen.iter()).any(|&e| e <= 0.0) {
            return Err(Error::InvalidArgument("eigenvalues must be positive".into()));
        }
        for basis in [&self.id_basis, &self.exp_basis, &self.alb_basis] {
            for col in basis.column_iter() {
                if (col.norm() - 1.0).abs() > 1e-8 {
                    return Err(Error::InvalidArgument("basis column without unit norm".into()));
                }
            }
        }
        self.mean_mesh().validate()?;
        check_dim("landmarks68", NUM_LANDMARKS, self.landmarks68.len())?;
        check_dim("landmarks160", NUM_DENSE_LANDMARKS, self.landmarks160.len())?;
        let n = self.num_vertices();
        for &l in self.landmarks160.iter().chain(&self.landmarks68) {
            if l >= n {
                return Err(Error::OutOfRange {
                    what: "landmark vertex",
                    index: l,
                    len: n,
                });
            }
        }
        if !self.landmarks68.iter().all(|l| self.landmarks160.contains(l)) {
            return Err(Error::InvalidArgument(
                "landmarks68 must be a subset of landmarks160".into(),
            ));
        }
        Ok(())
    }

    pub fn mean_mesh(&self) -> FaceMesh {
        FaceMesh {
            vertices: to_points(self.mean_shape.as_slice()),
            triangles: self.triangles.clone(),
        }
    }

    /// Stacked shape vector `mean + A_id p_id + A_exp p_exp`.
    pub fn shape_vector(&self, p: &ShapeParams) -> Result<DVector<f64>> {
        check_dim("identity coefficients", self.num_id(), p.id.len())?;
        check_dim("expression coefficients", self.num_exp(), p.exp.len())?;
        Ok(&self.mean_shape + &self.id_basis * &p.id + &self.exp_basis * &p.exp)
    }

    pub fn synthesize_shape(&self, p: &ShapeParams) -> Result<FaceMesh> {
        let s = self.shape_vector(p)?;
        Ok(FaceMesh {
            vertices: to_points(s.as_slice()),
            triangles: self.triangles.clone(),
        })
    }

    /// Per-vertex RGB albedo, clamped to `[0, 1]`.
    pub fn synthesize_albedo(&self, a: &AlbedoParams) -> Result<DVector<f64>> {
        Ok(self.albedo_unclamped(a)?.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn albedo_unclamped(&self, a: &AlbedoParams) -> Result<DVector<f64>> {
        check_dim("albedo coefficients", self.alb_basis.ncols(), a.alb.len())?;
        Ok(&self.mean_albedo + &self.alb_basis * &a.alb)
    }

    /// Positions of the given vertices only; cheaper than a full synthesis.
    pub fn vertices_of(&self, p: &ShapeParams, ids: &[usize]) -> Result<Vec<Vector3<f64>>> {
        check_dim("identity coefficients", self.num_id(), p.id.len())?;
        check_dim("expression coefficients", self.num_exp(), p.exp.len())?;
        let n = self.num_vertices();
        ids.iter()
            .map(|&v| {
                if v >= n {
                    return Err(Error::OutOfRange {
                        what: "model vertex",
                        index: v,
                        len: n,
                    });
                }
                let mut q = Vector3::zeros();
                for c in 0..3 {
                    let row = 3 * v + c;
                    let mut x = self.mean_shape[row];
                    for (j, pj) in p.id.iter().enumerate() {
                        x += self.id_basis[(row, j)] * pj;
                    }
                    for (j, pj) in p.exp.iter().enumerate() {
                        x += self.exp_basis[(row, j)] * pj;
                    }
                    q[c] = x;
                }
                Ok(q)
            })
            .collect()
    }

    /// Diagonal of `diag(D_id, D_exp)^{-1}`.
    pub(crate) fn inverse_eigen(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.num_shape_params(),
            self.id_eigen.iter().chain(self.exp_eigen.iter()).map(|e| 1.0 / e),
        )
    }
}

fn to_points(stacked: &[f64]) -> Vec<Vector3<f64>> {
    stacked
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub id: DVector<f64>,
    pub exp: DVector<f64>,
}

impl ShapeParams {
    pub fn zeros(model: &MorphableModel) -> Self {
        Self {
            id: DVector::zeros(model.num_id()),
            exp: DVector::zeros(model.num_exp()),
        }
    }

    /// Concatenation `(p_id, p_exp)`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.id.len() + self.exp.len(),
            self.id.iter().chain(self.exp.iter()).copied(),
        )
    }

    pub fn from_vector(v: &DVector<f64>, num_id: usize) -> Self {
        Self {
            id: v.rows(0, num_id).into_owned(),
            exp: v.rows(num_id, v.len() - num_id).into_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoParams {
    pub alb: DVector<f64>,
}

impl AlbedoParams {
    pub fn zeros(model: &MorphableModel) -> Self {
        Self {
            alb: DVector::zeros(model.alb_basis.ncols()),
        }
    }
}

/// Weak-perspective camera `(s, alpha, beta, gamma, tx, ty)`.
///
/// `alpha` is pitch, `beta` yaw and `gamma` roll, all in radians; `s` is in
/// pixels per model unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub s: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self {
            s: 1.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }
}

impl CameraParams {
    pub fn to_array(&self) -> [f64; 6] {
        [self.s, self.alpha, self.beta, self.gamma, self.tx, self.ty]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            s: a[0],
            alpha: a[1],
            beta: a[2],
            gamma: a[3],
            tx: a[4],
            ty: a[5],
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_angles(self.alpha, self.beta, self.gamma)
    }

    pub fn project(&self, q: &Vector3<f64>) -> Vector2<f64> {
        project_with(&self.rotation(), self, q)
    }
}

/// `Rz(gamma) * Ry(beta) * Rx(alpha)`.
pub fn rotation_from_angles(alpha: f64, beta: f64, gamma: f64) -> Matrix3<f64> {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rz = Matrix3::new(cg, -sg, 0.0, sg, cg, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

#[inline]
pub(crate) fn project_with(r: &Matrix3<f64>, w: &CameraParams, q: &Vector3<f64>) -> Vector2<f64> {
    let rq = r * q;
    Vector2::new(w.s * rq.x + w.tx, w.s * rq.y + w.ty)
}

/// Weak-perspective projection `s * [I2 0] * R * q + t` of every point.
pub fn project_points(points: &[Vector3<f64>], w: &CameraParams) -> Vec<Vector2<f64>> {
    let r = w.rotation();
    points.iter().map(|q| project_with(&r, w, q)).collect()
}

/// Camera-space depth; smaller is nearer to the viewer.
#[inline]
pub(crate) fn depth_with(r: &Matrix3<f64>, q: &Vector3<f64>) -> f64 {
    -(r.row(2) * q)[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> MorphableModel {
generate_synthetic_model(3, 300, 4, 3).unwrap()
    }

    fn naive_shape(model: &MorphableModel, p: &ShapeParams) -> Vec<f64> {
        let rows = model.mean_shape.len();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = model.mean_shape[r];
            for j in 0..model.num_id() {
                acc += model.id_basis[(r, j)] * p.id[j];
            }
            for j in 0..model.num_exp() {
                acc += model.exp_basis[(r, j)] * p.exp[j];
            }
            out[r] = acc;
        }
        out
    }

    #[test]
    fn zero_params_give_mean_shape() {
        let m = small_model();
        let mesh = m.synthesize_shape(&ShapeParams::zeros(&m)).unwrap();
        assert_eq!(mesh, m.mean_mesh());
    }

    #[test]
    fn first_canonical_selects_first_column() {
        let m = small_model();
        let mut p = ShapeParams::zeros(&m);
        p.id[0] = 1.0;
        let s = m.shape_vector(&p).unwrap();
        let want = &m.mean_shape + m.id_basis.column(0);
        assert_eq!(s, want);
    }

    #[test]
    fn shape_matches_naive_multiply() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ShapeParams {
            id: DVector::from_fn(m.num_id(), |_, _| rng.gen_range(-5.0..5.0)),
            exp: DVector::from_fn(m.num_exp(), |_, _| rng.gen_range(-5.0..5.0)),
        };
        let fast = m.shape_vector(&p).unwrap();
        let slow = naive_shape(&m, &p);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let sub = m.vertices_of(&p, &m.landmarks68).unwrap();
        for (q, &v) in sub.iter().zip(&m.landmarks68) {
            for c in 0..3 {
                assert!((q[c] - slow[3 * v + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_dimension_mismatch() {
        let m = small_model();
        let p = ShapeParams {
            id: DVector::zeros(m.num_id() + 1),
            exp: DVector::zeros(m.num_exp()),
        };
        assert!(matches!(
            m.synthesize_shape(&p),
            Err(Error::DimensionMismatch { .. })
        ));
        let a = AlbedoParams { alb: DVector::zeros(1) };
        assert!(m.synthesize_albedo(&a).is_err());
    }

    #[test]
    fn albedo_mean_and_clamping() {
        let m = small_model();
        let mean = m.synthesize_albedo(&AlbedoParams::zeros(&m)).unwrap();
        assert_eq!(mean, m.mean_albedo.map(|v| v.clamp(0.0, 1.0)));

        let mut a = AlbedoParams::zeros(&m);
        a.alb[0] = 1e4;
        let raw = m.albedo_unclamped(&a).unwrap();
        let clamped = m.synthesize_albedo(&a).unwrap();
        assert!(raw.iter().any(|&v| v > 1.0));
        for (r, c) in raw.iter().zip(clamped.iter()) {
            if *r > 1.0 {
                assert_eq!(*c, 1.0);
            }
            assert!((0.0..=1.0).contains(c));
        }
    }

    #[test]
    fn albedo_matches_naive_multiply() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = AlbedoParams {
            alb: DVector::from_fn(m.alb_basis.ncols(), |_, _| rng.gen_range(-1.0..1.0)),
        };
        let fast = m.albedo_unclamped(&a).unwrap();
        for r in 0..fast.len() {
            let mut acc = m.mean_albedo[r];
            for j in 0..m.alb_basis.ncols() {
                acc += m.alb_basis[(r, j)] * a.alb[j];
            }
            assert!((fast[r] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_identity_and_explicit_product() {
        assert_eq!(rotation_from_angles(0.0, 0.0, 0.0), Matrix3::identity());

        let (a, b, g): (f64, f64, f64) = (0.3, -0.5, 0.2);
        let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rz = [[g.cos(), -g.sin(), 0.0], [g.sin(), g.cos(), 0.0], [0.0, 0.0, 1.0]];
        let mul = |x: [[f64; 3]; 3], y: [[f64; 3]; 3]| {
            let mut z = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        z[i][j] += x[i][k] * y[k][j];
                    }
                }
            }
            z
        };
        let want = mul(mul(rz, ry), rx);
        let r = rotation_from_angles(a, b, g);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[(i, j)] - want[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let q = [Vector3::new(3.0, 4.0, 5.0)];
        let w = CameraParams::default();
        assert_eq!(project_points(&q, &w)[0], Vector2::new(3.0, 4.0));

        let w = CameraParams {
            s: 2.0,
            tx: 10.0,
            ty: 20.0,
            ..Default::default()
        };
        assert_eq!(
            project_points(&[Vector3::new(1.0, 2.0, 3.0)], &w)[0],
            Vector2::new(12.0, 24.0)
        );

        let w = CameraParams {
            beta: std::f64::consts::FRAC_PI_2,
            ..Default::default()
        };
        let r = rotation_from_angles(0.0, std::f64::consts::FRAC_PI_2, 0.0);
        let rq = r * Vector3::new(1.0, 0.0, 0.0);
        let got = project_points(&[Vector3::new(1.0, 0.0, 0.0)], &w)[0];
        assert!((got - Vector2::new(rq.x, rq.y)).norm() < 1e-15);
        assert!(got.norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_is_special_orthogonal(a in -3.2f64..3.2, b in -3.2f64..3.2, g in -3.2f64..3.2) {
            let r = rotation_from_angles(a, b, g);
            let err = (r * r.transpose() - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn synthesis_is_affine(seed in 0u64..1000) {
            let m = small_model();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || ShapeParams {
                id: DVector::from_fn(m.num_id(), |_, _| rng.gen_range(-3.0..3.0)),
                exp: DVector::from_fn(m.num_exp(), |_, _| rng.gen_range(-3.0..3.0)),
            };
            let (p1, p2) = (draw(), draw());
            let sum = ShapeParams { id: &p1.id + &p2.id, exp: &p1.exp + &p2.exp };
            let s0 = m.shape_vector(&ShapeParams::zeros(&m)).unwrap();
            let lhs = m.shape_vector(&sum).unwrap() - &s0;
            let rhs = (m.shape_vector(&p1).unwrap() - &s0) + (m.shape_vector(&p2).unwrap() - &s0);
            prop_assert!((lhs - rhs).abs().max() < 1e-10);
        }

        #[test]
        fn projection_is_columnwise(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..12),
            a in -1.0f64..1.0, b in -1.5f64..1.5, g in -1.0f64..1.0
        ) {
            let pts: Vec<_> = pts.into_iter().map(|(x, y, z)| Vector3::new(x, y, z)).collect();
            let w = CameraParams { s: 3.0, alpha: a, beta: b, gamma: g, tx: 1.0, ty: -2.0 };
            let batch = project_points(&pts, &w);
            for (q, got) in pts.iter().zip(&batch) {
                prop_assert_eq!(project_points(std::slice::from_ref(q), &w)[0], *got);
            }
        }
    }
}
