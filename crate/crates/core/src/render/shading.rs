use image::{Rgb, RgbImage};
use nalgebra::{Vector2, Vector3};

use super::{rasterize, screen_triangles, vertex_visibility, DepthBuffer, SENTINEL_NONE};
use crate::error::{check_dim, Error, Result};
use crate::face_model::{AlbedoParams, CameraParams, FaceMesh, MorphableModel, ShapeParams};
use crate::segmentation::Segmentation;

/// Ambient term as a fraction of albedo.
pub const AMBIENT: f64 = 0.25;

/// A synthetic face image together with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub image: RgbImage,
    pub shape: ShapeParams,
    pub albedo: AlbedoParams,
    pub camera: CameraParams,
    pub light: Vector3<f64>,
    pub landmarks68: Vec<Vector2<f64>>,
    pub landmarks160: Vec<Vector2<f64>>,
    pub visibility160: Vec<bool>,
}

/// Per-pixel patch ids for one segmentation; [`SENTINEL_NONE`] on background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabeledImage {
    pub fn unlabeled(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![SENTINEL_NONE; width * height],
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != SENTINEL_NONE).count()
    }
}

/// Lambertian rendering of a mesh with per-vertex RGB albedo (`3n` values).
///
/// Normals are rotated into camera space, where +z points at the viewer.
pub fn render_mesh(
    mesh: &FaceMesh,
    albedo: &[f64],
    w: &CameraParams,
    light: &Vector3<f64>,
    width: usize,
    height: usize,
) -> Result<(RgbImage, DepthBuffer)> {
    check_dim("albedo values", 3 * mesh.vertices.len(), albedo.len())?;
    let buffer = rasterize(mesh, w, width, height);
    let r = w.rotation();
    let normals: Vec<Vector3<f64>> = mesh.vertex_normals().iter().map(|n| r * n).collect();
    let tris = screen_triangles(mesh, w);
    let mut image = RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let t = buffer.triangle_at(x, y);
            if t == SENTINEL_NONE {
                continue;
            }
            let ids = mesh.triangles[t as usize];
            let Some(bary) = tris[t as usize].barycentric(&Vector2::new(x as f64, y as f64)) else {
                continue;
            };
            let mut n = Vector3::zeros();
            let mut rho = [0.0; 3];
            for (k, &v) in ids.iter().enumerate() {
                n += bary[k] * normals[v];
                for c in 0..3 {
                    rho[c] += bary[k] * albedo[3 * v + c];
                }
            }
            let diffuse = n.try_normalize(1e-12).map_or(0.0, |n| n.dot(light).max(0.0));
            let px = rho.map(|a| {
                let v = (a * (diffuse + AMBIENT)).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok((image, buffer))
}

/// Renders a face from shape, albedo and camera parameters and fills in its
/// ground-truth landmarks and dense-landmark visibility.
pub fn render_image(
    model: &MorphableModel,
    p: &ShapeParams,
    a: &AlbedoParams,
    w: &CameraParams,
    light: &Vector3<f64>,
    width: usize,
    height: usize,
) -> Result<RenderedSample> {
    if (light.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "light direction must be a unit vector, |l| = {}",
            light.norm()
        )));
    }
    let mesh = model.synthesize_shape(p)?;
    let albedo = model.synthesize_albedo(a)?;
    let (image, buffer) = render_mesh(&mesh, albedo.as_slice(), w, light, width, height)?;
    let (landmarks68, landmarks160) = super::reproject_landmarks(model, p, w)?;
    Ok(RenderedSample {
        image,
        shape: p.clone(),
        albedo: a.clone(),
        camera: *w,
        light: *light,
        landmarks68,
        landmarks160,
        visibility160: vertex_visibility(&mesh, w, &model.landmarks160, &buffer)?,
    })
}

/// Labels every pixel covered by the face with the patch of its visible
/// triangle.
pub fn project_patch_labels(
    model: &MorphableModel,
    p: &ShapeParams,
    w: &CameraParams,
    seg: &Segmentation,
    width: usize,
    height: usize,
) -> Result<LabeledImage> {
    check_dim("segmentation triangles", model.triangles.len(), seg.patch_of.len())?;
    let mesh = model.synthesize_shape(p)?;
    Ok(labels_from_buffer(&rasterize(&mesh, w, width, height), seg))
}

pub(crate) fn labels_from_buffer(buffer: &DepthBuffer, seg: &Segmentation) -> LabeledImage {
    LabeledImage {
        width: buffer.width,
        height: buffer.height,
        labels: buffer
            .triangle_id
            .iter()
            .map(|&t| {
                if t == SENTINEL_NONE {
                    SENTINEL_NONE
                } else {
                    seg.patch_of[t as usize]
                }
            })
            .collect(),
    }
}
