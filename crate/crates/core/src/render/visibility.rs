use nalgebra::Vector2;

use super::{rasterize, screen_triangles, DepthBuffer, ScreenTriangle};
use crate::error::{Error, Result};
use crate::face_model::{depth_with, project_with, CameraParams, FaceMesh};

/// Depth tolerance: `1e-4` times the camera-space depth range of the mesh.
pub fn depth_epsilon(mesh: &FaceMesh, w: &CameraParams) -> f64 {
    let r = w.rotation();
    let (lo, hi) = mesh
        .vertices
        .iter()
        .map(|q| depth_with(&r, q))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    if lo.is_finite() {
        1e-4 * (hi - lo)
    } else {
        0.0
    }
}

fn occludes(tri: &ScreenTriangle, q: &Vector2<f64>, depth: f64, eps: f64) -> bool {
    match tri.barycentric(q) {
        Some(b) if b.iter().all(|&x| x >= 0.0) => tri.depth_at(&b) < depth - eps,
        _ => false,
    }
}

/// Depth-buffer visibility test for the given vertices.
///
/// A vertex is visible when its projection lands inside the buffer and no
/// triangle lies in front of it (by more than [`depth_epsilon`]) at the
/// vertex's exact sub-pixel position. Candidate occluders are the triangles
/// whose screen bounding box overlaps the vertex's pixel cell, so sliver
/// triangles that win no pixel center in the buffer still count.
pub fn vertex_visibility(
    mesh: &FaceMesh,
    w: &CameraParams,
    vertex_ids: &[usize],
    buffer: &DepthBuffer,
) -> Result<Vec<bool>> {
    let n = mesh.vertices.len();
    if let Some(&bad) = vertex_ids.iter().find(|&&v| v >= n) {
        return Err(Error::OutOfRange {
            what: "mesh vertices",
            index: bad,
            len: n,
        });
    }
    let r = w.rotation();
    let eps = depth_epsilon(mesh, w);
    let tris = screen_triangles(mesh, w);
    let bins = Bins::new(&tris, buffer.width, buffer.height);
    let (bw, bh) = (buffer.width as i64, buffer.height as i64);
    Ok(vertex_ids
        .iter()
        .map(|&v| {
            let q = project_with(&r, w, &mesh.vertices[v]);
            let depth = depth_with(&r, &mesh.vertices[v]);
            let (px, py) = (q.x.round() as i64, q.y.round() as i64);
            if px < 0 || py < 0 || px >= bw || py >= bh {
                return false;
            }
            !bins.cell(px as usize, py as usize).iter().any(|&t| {
                let t = t as usize;
                !mesh.triangles[t].contains(&v) && occludes(&tris[t], &q, depth, eps)
            })
        })
        .collect())
}

/// Triangle ids per pixel cell `[x - 0.5, x + 0.5) x [y - 0.5, y + 0.5)`,
/// by screen bounding box, in compressed row storage.
struct Bins {
    width: usize,
    start: Vec<usize>,
    ids: Vec<u32>,
}

impl Bins {
    fn new(tris: &[ScreenTriangle], width: usize, height: usize) -> Self {
        let span = |t: &ScreenTriangle| -> Option<(usize, usize, usize, usize)> {
            let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for p in &t.p {
                x0 = x0.min(p.x);
                x1 = x1.max(p.x);
                y0 = y0.min(p.y);
                y1 = y1.max(p.y);
            }
            if !(x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite()) {
                return None;
            }
            let lo = |v: f64| (v.round().max(0.0)) as usize;
            let (cx0, cy0) = (lo(x0), lo(y0));
            let (cx1, cy1) = (x1.round(), y1.round());
            if cx1 < 0.0 || cy1 < 0.0 || cx0 >= width || cy0 >= height {
                return None;
            }
            Some((cx0, (cx1 as usize).min(width - 1), cy0, (cy1 as usize).min(height - 1)))
        };
        let spans: Vec<_> = tris.iter().map(span).collect();
        let mut start = vec![0usize; width * height + 1];
        for &(x0, x1, y0, y1) in spans.iter().flatten() {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    start[y * width + x + 1] += 1;
                }
            }
        }
        for i in 0..width * height {
            start[i + 1] += start[i];
        }
        let mut fill = start.clone();
        let mut ids = vec![0u32; start[width * height]];
        for (t, s) in spans.iter().enumerate() {
            if let Some((x0, x1, y0, y1)) = *s {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let c = y * width + x;
                        ids[fill[c]] = t as u32;
                        fill[c] += 1;
                    }
                }
            }
        }
        Self { width, start, ids }
    }

    fn cell(&self, x: usize, y: usize) -> &[u32] {
        let c = y * self.width + x;
        &self.ids[self.start[c]..self.start[c + 1]]
    }
}

/// Visibility computed on an internal `res`-pixel buffer, independent of the
/// image size `width x height` the camera maps into.
pub fn visibility_at_resolution(
    mesh: &FaceMesh,
    w: &CameraParams,
    vertex_ids: &[usize],
    width: usize,
    height: usize,
    res: usize,
) -> Result<Vec<bool>> {
    let k = res as f64 / width.max(height) as f64;
    let bw = ((width as f64 * k).round() as usize).max(1);
    let bh = ((height as f64 * k).round() as usize).max(1);
    let scaled = CameraParams {
        s: w.s * k,
        tx: (w.tx + 0.5) * k - 0.5,
        ty: (w.ty + 0.5) * k - 0.5,
        ..*w
    };
    let buffer = rasterize(mesh, &scaled, bw, bh);
    vertex_visibility(mesh, &scaled, vertex_ids, &buffer)
}
