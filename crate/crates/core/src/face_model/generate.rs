//! Procedural stand-in for a scanned morphable model.
//!
//! The mean face is a half-ellipsoid shell parameterized by longitude `phi`
//! and latitude `theta`, with Gaussian bumps for nose, brows, eye sockets,
//! lips and chin. Bases are mesh-smoothed white noise, orthonormalized.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FaceMesh, MorphableModel, NUM_DENSE_LANDMARKS, NUM_LANDMARKS};
use crate::error::{Error, Result};

const HALF_WIDTH: f64 = 1.0;
const HALF_HEIGHT: f64 = 1.35;
const DEPTH: f64 = 0.9;
const PHI_MAX: f64 = 1.45;
const THETA_MAX: f64 = 0.95;

const ID_RMS: f64 = 0.05;
const EXP_RMS: f64 = 0.04;
const MODE_DECAY: f64 = 0.7;

fn bump(phi: f64, theta: f64, phi0: f64, theta0: f64, s_phi: f64, s_theta: f64) -> f64 {
    let u = (phi - phi0) / s_phi;
    let v = (theta - theta0) / s_theta;
    (-(u * u) - v * v).exp()
}

fn mirrored(phi: f64, theta: f64, phi0: f64, theta0: f64, s_phi: f64, s_theta: f64) -> f64 {
    bump(phi, theta, phi0, theta0, s_phi, s_theta) + bump(phi, theta, -phi0, theta0, s_phi, s_theta)
}

fn relief(phi: f64, theta: f64) -> f64 {
    0.32 * bump(phi, theta, 0.0, -0.02, 0.11, 0.2) + 0.12 * bump(phi, theta, 0.0, 0.12, 0.14, 0.07)
        - 0.10 * mirrored(phi, theta, 0.38, -0.24, 0.16, 0.09)
        + 0.06 * mirrored(phi, theta, 0.38, -0.42, 0.28, 0.07)
        + 0.05 * mirrored(phi, theta, 0.6, 0.0, 0.2, 0.2)
        + 0.06 * bump(phi, theta, 0.0, 0.42, 0.3, 0.09)
        - 0.03 * bump(phi, theta, 0.0, 0.45, 0.25, 0.02)
        + 0.06 * bump(phi, theta, 0.0, 0.75, 0.25, 0.1)
}

fn surface_point(phi: f64, theta: f64) -> Vector3<f64> {
    let base = Vector3::new(
        HALF_WIDTH * theta.cos() * phi.sin(),
        HALF_HEIGHT * theta.sin(),
        DEPTH * theta.cos() * phi.cos(),
    );
    let normal = Vector3::new(
        base.x / (HALF_WIDTH * HALF_WIDTH),
        base.y / (HALF_HEIGHT * HALF_HEIGHT),
        base.z / (DEPTH * DEPTH),
    )
    .normalize();
    base + relief(phi, theta) * normal
}

fn mean_albedo_at(phi: f64, theta: f64) -> [f64; 3] {
    let skin = [0.82, 0.62, 0.52];
    let layers: [([f64; 3], f64); 3] = [
        ([0.15, 0.1, 0.08], mirrored(phi, theta, 0.38, -0.24, 0.11, 0.05)),
        ([0.3, 0.2, 0.15], mirrored(phi, theta, 0.38, -0.42, 0.22, 0.04)),
        ([0.75, 0.3, 0.3], bump(phi, theta, 0.0, 0.44, 0.25, 0.06)),
    ];
    let mut c = skin;
    for (color, weight) in layers {
        let w = weight.min(1.0);
        for k in 0..3 {
            c[k] = c[k] * (1.0 - w) + color[k] * w;
        }
    }
    c
}

/// Parametric `(phi, theta)` layout of the 68 sparse landmarks: jaw line,
/// brows, nose bridge and base, eyes, outer and inner lips.
fn landmark68_layout() -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    for t in 0..17 {
        let a = PI * t as f64 / 16.0;
        pts.push((-1.1 * a.cos(), -0.1 + 0.85 * a.sin()));
    }
    for side in [-1.0, 1.0] {
        for t in 0..5 {
            let u = t as f64 / 4.0;
            let phi = if side < 0.0 { -0.75 + 0.6 * u } else { 0.15 + 0.6 * u };
            let arch = (PI * u).sin();
            pts.push((phi, -0.42 - 0.06 * arch));
        }
    }
    for t in 0..4 {
        pts.push((0.0, -0.3 + 0.35 * t as f64 / 3.0 * 1.0));
    }
    for t in 0..5 {
        pts.push((-0.2 + 0.1 * t as f64, 0.15));
    }
    for center in [-0.4, 0.4] {
        for t in 0..6 {
            let a = PI * (1.0 + t as f64 / 3.0);
            pts.push((center + 0.15 * a.cos(), -0.25 + 0.06 * a.sin()));
        }
    }
    for t in 0..12 {
        let a = PI * (1.0 + t as f64 / 6.0);
        pts.push((0.35 * a.cos(), 0.45 + 0.12 * a.sin()));
    }
    for t in 0..8 {
        let a = PI * (1.0 + t as f64 / 4.0);
        pts.push((0.22 * a.cos(), 0.45 + 0.05 * a.sin()));
    }
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    pts
}

fn neighbors(n: usize, triangles: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            if !adj[a].contains(&b) {
                adj[a].push(b);
            }
            if !adj[b].contains(&a) {
                adj[b].push(a);
            }
        }
    }
    adj
}

fn smooth_field(field: &mut [Vector3<f64>], adj: &[Vec<usize>], iterations: usize) {
    let mut next = field.to_vec();
    for _ in 0..iterations {
        for (i, nb) in adj.iter().enumerate() {
            let mut acc = Vector3::zeros();
            for &j in nb {
                acc += field[j];
            }
            next[i] = 0.5 * field[i] + 0.5 * acc / nb.len().max(1) as f64;
        }
        field.copy_from_slice(&next);
    }
}

/// Modified Gram-Schmidt, run twice for orthogonality to round-off.
fn orthonormalize(cols: &mut [DVector<f64>]) -> Result<()> {
    for _ in 0..2 {
        for i in 0..cols.len() {
            for j in 0..i {
                let d = cols[j].dot(&cols[i]);
                let cj = cols[j].clone();
                cols[i].axpy(-d, &cj, 1.0);
            }
            let norm = cols[i].norm();
            if norm < 1e-10 {
                return Err(Error::InvalidArgument(
                    "basis generation produced a dependent column".into(),
                ));
            }
            cols[i] /= norm;
        }
    }
    Ok(())
}

fn random_fields(
    rng: &mut ChaCha8Rng,
    count: usize,
    adj: &[Vec<usize>],
    iterations: usize,
    weight: impl Fn(usize) -> f64,
) -> Vec<DVector<f64>> {
    let n = adj.len();
    (0..count)
        .map(|_| {
            let mut field: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    Vector3::new(
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    )
                })
                .collect();
            smooth_field(&mut field, adj, iterations);
            DVector::from_iterator(
                3 * n,
                field.iter().enumerate().flat_map(|(i, v)| {
                    let w = weight(i);
                    [v.x * w, v.y * w, v.z * w]
                }),
            )
        })
        .collect()
}

fn columns_to_matrix(cols: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_columns(cols)
}

/// Builds a deterministic face-like morphable model with at least `n`
/// vertices (the grid is rounded up to full rows), `m1` identity modes,
/// `m2` expression modes and `m1` albedo modes.
pub fn generate_synthetic_model(seed: u64, n: usize, m1: usize, m2: usize) -> Result<MorphableModel> {
    if n < 200 {
        return Err(Error::InvalidArgument(format!(
            "need at least 200 vertices for 160 landmarks, got {n}"
        )));
    }
    if m1 == 0 || m2 == 0 {
        return Err(Error::InvalidArgument("m1 and m2 must be at least 1".into()));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let nv = rows * cols;
    if m1 + m2 >= 3 * nv {
        return Err(Error::InvalidArgument(format!(
            "m1 + m2 = {} must be below 3n = {}",
            m1 + m2,
            3 * nv
        )));
    }

    let mut params = Vec::with_capacity(nv);
    for r in 0..rows {
        let theta = -THETA_MAX + 2.0 * THETA_MAX * r as f64 / (rows - 1) as f64;
        for c in 0..cols {
            let phi = -PHI_MAX + 2.0 * PHI_MAX * c as f64 / (cols - 1) as f64;
            params.push((phi, theta));
        }
    }
    let vertices: Vec<Vector3<f64>> = params.iter().map(|&(p, t)| surface_point(p, t)).collect();

    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let v00 = r * cols + c;
            let v01 = v00 + 1;
            let v10 = v00 + cols;
            let v11 = v10 + 1;
            // alternate diagonals so the mesh is left-right symmetric
            if (c < (cols - 1) / 2) == (r % 2 == 0) {
                triangles.push([v00, v01, v11]);
                triangles.push([v00, v11, v10]);
            } else {
                triangles.push([v00, v01, v10]);
                triangles.push([v01, v11, v10]);
            }
        }
    }
    let mut mesh = FaceMesh {
        vertices,
        triangles,
    };
    let center = (rows / 2) * cols + cols / 2;
    if mesh.vertex_normals()[center].z < 0.0 {
        for t in &mut mesh.triangles {
            t.swap(1, 2);
        }
    }

    let landmarks68 = snap_landmarks(&params);
    let landmarks160 = extend_landmarks(&mesh.vertices, &params, &landmarks68);

    let adj = neighbors(nv, &mesh.triangles);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape_cols = random_fields(&mut rng, m1, &adj, 60, |_| 1.0);
    let expression_weight = |i: usize| {
        let (phi, theta) = params[i];
        0.3 + 0.7 / (1.0 + (-(theta - 0.1) / 0.1).exp()) + 0.5 * mirrored(phi, theta, 0.38, -0.42, 0.3, 0.1)
    };
    shape_cols.extend(random_fields(&mut rng, m2, &adj, 40, expression_weight));
    orthonormalize(&mut shape_cols)?;
    let mut albedo_cols = random_fields(&mut rng, m1, &adj, 50, |_| 1.0);
    orthonormalize(&mut albedo_cols)?;

    let scale = 3.0 * nv as f64;
    let id_eigen = DVector::from_fn(m1, |k, _| ID_RMS * ID_RMS * scale * MODE_DECAY.powi(k as i32));
    let exp_eigen = DVector::from_fn(m2, |k, _| EXP_RMS * EXP_RMS * scale * MODE_DECAY.powi(k as i32));

    let mean_shape = DVector::from_iterator(3 * nv, mesh.vertices.iter().flat_map(|v| [v.x, v.y, v.z]));
    let mean_albedo = DVector::from_iterator(3 * nv, params.iter().flat_map(|&(p, t)| mean_albedo_at(p, t)));

    let model = MorphableModel {
        mean_shape,
        id_basis: columns_to_matrix(&shape_cols[..m1]),
        exp_basis: columns_to_matrix(&shape_cols[m1..]),
        mean_albedo,
        alb_basis: columns_to_matrix(&albedo_cols),
        id_eigen,
        exp_eigen,
        triangles: mesh.triangles,
        landmarks68,
        landmarks160,
    };
    model.validate()?;
    Ok(model)
}

fn snap_landmarks(params: &[(f64, f64)]) -> Vec<usize> {
    let mut used = vec![false; params.len()];
    landmark68_layout()
        .into_iter()
        .map(|(lp, lt)| {
            let best = params
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .min_by(|(_, a), (_, b)| {
                    let da = (a.0 - lp).powi(2) + (a.1 - lt).powi(2);
                    let db = (b.0 - lp).powi(2) + (b.1 - lt).powi(2);
                    da.total_cmp(&db)
                })
                .map(|(i, _)| i)
                .expect("grid has more vertices than landmarks");
            used[best] = true;
            best
        })
        .collect()
}

/// Farthest-point sampling over the front of the face, seeded with the
/// sparse landmarks.
fn extend_landmarks(vertices: &[Vector3<f64>], params: &[(f64, f64)], sparse: &[usize]) -> Vec<usize> {
    let front: Vec<usize> = (0..vertices.len())
        .filter(|&i| params[i].0.abs() <= 1.2 && params[i].1.abs() <= 0.88)
        .collect();
    let candidates: Vec<usize> = if front.len() >= NUM_DENSE_LANDMARKS {
        front
    } else {
        (0..vertices.len()).collect()
    };
    let mut chosen = sparse.to_vec();
    let mut dist: Vec<f64> = candidates
        .iter()
        .map(|&c| {
            sparse
                .iter()
                .map(|&s| (vertices[c] - vertices[s]).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    while chosen.len() < NUM_DENSE_LANDMARKS {
        let (k, _) = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("candidates non-empty");
        let v = candidates[k];
        chosen.push(v);
        for (d, &c) in dist.iter_mut().zip(&candidates) {
            *d = d.min((vertices[c] - vertices[v]).norm_squared());
        }
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic_model(11, 400, 5, 4).unwrap();
        let b = generate_synthetic_model(11, 400, 5, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_model(12, 400, 5, 4).unwrap();
        assert_ne!(a.id_basis, c.id_basis);
    }

    #[test]
    fn bases_are_orthonormal() {
        let m = generate_synthetic_model(1, 500, 8, 6).unwrap();
        let shape = DMatrix::from_fn(m.mean_shape.len(), 14, |r, c| {
            if c < 8 {
                m.id_basis[(r, c)]
            } else {
                m.exp_basis[(r, c - 8)]
            }
        });
        let gram = shape.transpose() * &shape;
        assert!((gram - DMatrix::identity(14, 14)).abs().max() < 1e-10);
        let ga = m.alb_basis.transpose() * &m.alb_basis;
        assert!((ga - DMatrix::identity(8, 8)).abs().max() < 1e-10);
    }

    #[test]
    fn exhaustive_validity_scan() {
        let m = generate_synthetic_model(2, 500, 8, 6).unwrap();
        let nv = m.num_vertices();
        for t in &m.triangles {
            assert!(t.iter().all(|&i| i < nv));
            assert!(t[0] != t[1] && t[1] != t[2] && t[0] != t[2]);
            let mesh = m.mean_mesh();
            let [a, b, c] = t.map(|i| mesh.vertices[i]);
            assert!((b - a).cross(&(c - a)).norm() > 1e-12, "zero-area triangle");
        }
        let mut all = m.landmarks160.clone();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), NUM_DENSE_LANDMARKS);
        let mut sparse = m.landmarks68.clone();
        sparse.sort_unstable();
        sparse.dedup();
        assert_eq!(sparse.len(), NUM_LANDMARKS);
        assert!(m.id_eigen.iter().all(|&e| e > 0.0));
        assert!(m.id_eigen.as_slice().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_synthetic_model(0, 199, 2, 2).is_err());
        assert!(generate_synthetic_model(0, 200, 0, 2).is_err());
        assert!(generate_synthetic_model(0, 200, 400, 400).is_err());
        assert!(generate_synthetic_model(0, 200, 8, 6).is_ok());
    }

    #[test]
    fn front_faces_the_camera() {
        let m = generate_synthetic_model(0, 900, 4, 4).unwrap();
        let mesh = m.mean_mesh();
        let normals = mesh.vertex_normals();
        let nose = m.landmarks68[30];
        assert!(normals[nose].z > 0.5);
        // chin below the brows in image coordinates
        assert!(mesh.vertices[m.landmarks68[8]].y > mesh.vertices[m.landmarks68[19]].y);
    }
}
