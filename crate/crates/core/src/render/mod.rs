//! Software rasterizer with a z-buffer, landmark visibility, Lambertian
//! rendering of synthetic faces and projection of patch labels.
//!
//! Pixel `(x, y)` has its center at integer image coordinates `(x, y)`.

mod dataset;
mod shading;
mod visibility;

use nalgebra::{Matrix3, Vector2};

use crate::face_model::{depth_with, project_with, CameraParams, FaceMesh};

pub use dataset::{generate_dataset, reproject_landmarks, DatasetConfig};
pub use shading::{project_patch_labels, render_image, LabeledImage, RenderedSample, AMBIENT};
pub use visibility::{depth_epsilon, vertex_visibility, visibility_at_resolution};

/// Marks pixels not covered by any triangle.
pub const SENTINEL_NONE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    /// Camera-space depth, `+inf` where nothing was drawn.
    pub depth: Vec<f64>,
    pub triangle_id: Vec<u32>,
}

impl DepthBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; width * height],
            triangle_id: vec![SENTINEL_NONE; width * height],
        }
    }

    #[inline]
    pub fn triangle_at(&self, x: usize, y: usize) -> u32 {
        self.triangle_id[y * self.width + x]
    }

    pub fn covered_pixels(&self) -> usize {
        self.triangle_id.iter().filter(|&&t| t != SENTINEL_NONE).count()
    }
}

/// A triangle after projection: screen positions and per-vertex depth.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScreenTriangle {
    pub p: [Vector2<f64>; 3],
    pub d: [f64; 3],
}

#[inline]
pub(crate) fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top or left edge for a triangle with positive `edge(a, b, c)` in y-down
/// image coordinates.
#[inline]
fn is_top_left(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

impl ScreenTriangle {
    /// Barycentric weights of `q`, or `None` for a degenerate triangle.
    pub fn barycentric(&self, q: &Vector2<f64>) -> Option<[f64; 3]> {
        let [a, b, c] = &self.p;
        let area = edge(a, b, c);
        if area == 0.0 {
            return None;
        }
        Some([edge(b, c, q) / area, edge(c, a, q) / area, edge(a, b, q) / area])
    }

    pub fn depth_at(&self, bary: &[f64; 3]) -> f64 {
        bary[0] * self.d[0] + bary[1] * self.d[1] + bary[2] * self.d[2]
    }
}

pub(crate) fn screen_triangles(mesh: &FaceMesh, w: &CameraParams) -> Vec<ScreenTriangle> {
    let r: Matrix3<f64> = w.rotation();
    let proj: Vec<Vector2<f64>> = mesh.vertices.iter().map(|q| project_with(&r, w, q)).collect();
    let depth: Vec<f64> = mesh.vertices.iter().map(|q| depth_with(&r, q)).collect();
    mesh.triangles
        .iter()
        .map(|t| ScreenTriangle {
            p: t.map(|i| proj[i]),
            d: t.map(|i| depth[i]),
        })
        .collect()
}

/// Z-buffer rasterization of every triangle of `mesh` under camera `w`.
///
/// Coverage is tested at pixel centers with a top-left fill rule; depth is
/// interpolated barycentrically (exact for an affine camera). On equal depth
/// the lower triangle id wins.
pub fn rasterize(mesh: &FaceMesh, w: &CameraParams, width: usize, height: usize) -> DepthBuffer {
    let mut buf = DepthBuffer::new(width, height);
    for (id, tri) in screen_triangles(mesh, w).iter().enumerate() {
        draw_triangle(&mut buf, tri, id as u32);
    }
    buf
}

fn draw_triangle(buf: &mut DepthBuffer, tri: &ScreenTriangle, id: u32) {
    let (mut a, mut b, c) = (tri.p[0], tri.p[1], tri.p[2]);
    let (mut da, mut db, dc) = (tri.d[0], tri.d[1], tri.d[2]);
    let mut area = edge(&a, &b, &c);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    if area < 0.0 {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut da, &mut db);
        area = -area;
    }
    let x0 = a.x.min(b.x).min(c.x).ceil().max(0.0);
    let x1 = a.x.max(b.x).max(c.x).floor().min(buf.width as f64 - 1.0);
    let y0 = a.y.min(b.y).min(c.y).ceil().max(0.0);
    let y1 = a.y.max(b.y).max(c.y).floor().min(buf.height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let top_left = [is_top_left(&b, &c), is_top_left(&c, &a), is_top_left(&a, &b)];
    for y in y0 as usize..=y1 as usize {
        for x in x0 as usize..=x1 as usize {
            let q = Vector2::new(x as f64, y as f64);
            let e = [edge(&b, &c, &q), edge(&c, &a, &q), edge(&a, &b, &q)];
            let inside = e
                .iter()
                .zip(&top_left)
                .all(|(&ei, &tl)| ei > 0.0 || (ei == 0.0 && tl));
            if !inside {
                continue;
            }
            let d = (e[0] * da + e[1] * db + e[2] * dc) / area;
            let k = y * buf.width + x;
            if d < buf.depth[k] {
                buf.depth[k] = d;
                buf.triangle_id[k] = id;
            }
        }
    }
}
