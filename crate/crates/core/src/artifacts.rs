//! Tensor-container encodings of the pipeline artifacts.

use image::RgbImage;
use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::align::DescentStage;
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::face_model::{AlbedoParams, CameraParams, MorphableModel, ShapeParams, NUM_LANDMARKS};
use crate::net::{LossLayerParams, NetConfig, NetWeights, Tensor};
use crate::render::RenderedSample;
use crate::segmentation::Segmentation;

fn bad(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

fn push_u64(c: &mut TensorContainer, name: &str, v: u64) -> Result<()> {
    c.push_u32(name, &[2], &[v as u32, (v >> 32) as u32])
}

fn read_u64(c: &TensorContainer, name: &str) -> Result<u64> {
    let (_, v) = c.u32s(name)?;
    match v[..] {
        [lo, hi] => Ok(lo as u64 | (hi as u64) << 32),
        _ => Err(bad(format!("{name} is not a 64-bit value"))),
    }
}

fn push_matrix(c: &mut TensorContainer, name: &str, m: &DMatrix<f64>) -> Result<()> {
    // row-major on disk
    let data: Vec<f64> = (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |k| (r, k))).map(|(r, k)| m[(r, k)]).collect();
    c.push_f64(name, &[m.nrows(), m.ncols()], &data)
}

fn read_matrix(c: &TensorContainer, name: &str) -> Result<DMatrix<f64>> {
    let (dims, data) = c.f64s(name)?;
    match dims[..] {
        [r, k] => Ok(DMatrix::from_row_slice(r, k, &data)),
        _ => Err(bad(format!("{name} is not a matrix"))),
    }
}

fn read_vector(c: &TensorContainer, name: &str) -> Result<DVector<f64>> {
    let (_, data) = c.f64s(name)?;
    Ok(DVector::from_vec(data))
}

pub fn push_points(c: &mut TensorContainer, name: &str, pts: &[Vector2<f64>]) -> Result<()> {
    let data: Vec<f64> = pts.iter().flat_map(|p| [p.x, p.y]).collect();
    c.push_f64(name, &[pts.len(), 2], &data)
}

pub fn read_points(c: &TensorContainer, name: &str) -> Result<Vec<Vector2<f64>>> {
    let (_, data) = c.f64s(name)?;
    Ok(data.chunks_exact(2).map(|p| Vector2::new(p[0], p[1])).collect())
}

fn to_usize(v: Vec<u32>) -> Vec<usize> {
    v.into_iter().map(|x| x as usize).collect()
}

pub fn model_to_container(m: &MorphableModel) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    c.push_f64("mean_shape", &[m.mean_shape.len()], m.mean_shape.as_slice())?;
    push_matrix(&mut c, "id_basis", &m.id_basis)?;
    push_matrix(&mut c, "exp_basis", &m.exp_basis)?;
    c.push_f64("mean_albedo", &[m.mean_albedo.len()], m.mean_albedo.as_slice())?;
    push_matrix(&mut c, "alb_basis", &m.alb_basis)?;
    c.push_f64("id_eigen", &[m.id_eigen.len()], m.id_eigen.as_slice())?;
    c.push_f64("exp_eigen", &[m.exp_eigen.len()], m.exp_eigen.as_slice())?;
    let tris: Vec<u32> = m.triangles.iter().flatten().map(|&v| v as u32).collect();
    c.push_u32("triangles", &[m.triangles.len(), 3], &tris)?;
    let l68: Vec<u32> = m.landmarks68.iter().map(|&v| v as u32).collect();
    c.push_u32("landmarks68", &[l68.len()], &l68)?;
    let l160: Vec<u32> = m.landmarks160.iter().map(|&v| v as u32).collect();
    c.push_u32("landmarks160", &[l160.len()], &l160)?;
    Ok(c)
}

pub fn model_from_container(c: &TensorContainer) -> Result<MorphableModel> {
    let (_, tris) = c.u32s("triangles")?;
    let m = MorphableModel {
        mean_shape: read_vector(c, "mean_shape")?,
        id_basis: read_matrix(c, "id_basis")?,
        exp_basis: read_matrix(c, "exp_basis")?,
        mean_albedo: read_vector(c, "mean_albedo")?,
        alb_basis: read_matrix(c, "alb_basis")?,
        id_eigen: read_vector(c, "id_eigen")?,
        exp_eigen: read_vector(c, "exp_eigen")?,
        triangles: tris.chunks_exact(3).map(|t| [t[0] as usize, t[1] as usize, t[2] as usize]).collect(),
        landmarks68: to_usize(c.u32s("landmarks68")?.1),
        landmarks160: to_usize(c.u32s("landmarks160")?.1),
    };
    m.validate()?;
    Ok(m)
}

pub fn segmentations_to_container(bank: &[Segmentation]) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    c.push_u32("count", &[1], &[bank.len() as u32])?;
    for (i, s) in bank.iter().enumerate() {
        c.push_u32(&format!("seg{i}.patch_of"), &[s.patch_of.len()], &s.patch_of)?;
        c.push_u32(&format!("seg{i}.k"), &[1], &[s.k as u32])?;
        push_u64(&mut c, &format!("seg{i}.seed"), s.seed)?;
    }
    Ok(c)
}

pub fn segmentations_from_container(c: &TensorContainer) -> Result<Vec<Segmentation>> {
    let n = c.u32s("count")?.1[0] as usize;
    (0..n)
        .map(|i| {
            Ok(Segmentation {
                patch_of: c.u32s(&format!("seg{i}.patch_of"))?.1,
                k: c.u32s(&format!("seg{i}.k"))?.1[0] as usize,
                seed: read_u64(c, &format!("seg{i}.seed"))?,
            })
        })
        .collect()
}

pub fn weights_to_container(w: &NetWeights, layers: &[LossLayerParams]) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    let cfg = &w.config;
    c.push_u32(
        "config",
        &[4],
        &[cfg.height as u32, cfg.width as u32, cfg.feature_dim as u32, cfg.depth as u32],
    )?;
    let ch: Vec<u32> = cfg.channels.iter().map(|&v| v as u32).collect();
    c.push_u32("config.channels", &[ch.len()], &ch)?;
    push_u64(&mut c, "config.seed", cfg.seed)?;
    for t in &w.tensors {
        c.push_f64(&format!("net.{}", t.name), &t.shape, &t.data)?;
    }
    c.push_u32("layers", &[1], &[layers.len() as u32])?;
    for (i, l) in layers.iter().enumerate() {
        c.push_f64(&format!("layer{i}.h"), &[l.num_classes, l.dim], &l.vectors)?;
    }
    Ok(c)
}

pub fn weights_from_container(c: &TensorContainer) -> Result<(NetWeights, Vec<LossLayerParams>)> {
    let (_, v) = c.u32s("config")?;
    if v.len() != 4 {
        return Err(bad("network config must have 4 entries"));
    }
    let config = NetConfig {
        height: v[0] as usize,
        width: v[1] as usize,
        feature_dim: v[2] as usize,
        depth: v[3] as usize,
        channels: to_usize(c.u32s("config.channels")?.1),
        seed: read_u64(c, "config.seed")?,
    };
    config.validate()?;
    let tensors = config
        .parameter_shapes()
        .into_iter()
        .map(|(name, _)| {
            let (shape, data) = c.f64s(&format!("net.{name}"))?;
            Ok(Tensor { name, shape, data })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = NetWeights::from_tensors(config, tensors)?;
    let n = c.u32s("layers")?.1[0] as usize;
    let layers = (0..n)
        .map(|i| {
            let (dims, data) = c.f64s(&format!("layer{i}.h"))?;
            match dims[..] {
                [k, d] => LossLayerParams::new(k, d, data),
                _ => Err(bad("class layer must be K x D")),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((weights, layers))
}

/// Stages as `RX_k`, `bX_k`, `Rw_k`, `bw_k` plus a header of
/// `(D, stages, 68, 160)`.
pub fn cascade_to_container(stages: &[DescentStage], feature_dim: usize) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    c.push_u32(
        "header",
        &[4],
        &[feature_dim as u32, stages.len() as u32, NUM_LANDMARKS as u32, crate::face_model::NUM_DENSE_LANDMARKS as u32],
    )?;
    for (k, s) in stages.iter().enumerate() {
        push_matrix(&mut c, &format!("RX_{k}"), &s.r_x)?;
        c.push_f64(&format!("bX_{k}"), &[s.b_x.len()], s.b_x.as_slice())?;
        push_matrix(&mut c, &format!("Rw_{k}"), &s.r_w)?;
        c.push_f64(&format!("bw_{k}"), &[s.b_w.len()], s.b_w.as_slice())?;
    }
    Ok(c)
}

/// Returns the stages and the descriptor dimension they expect.
pub fn cascade_from_container(c: &TensorContainer) -> Result<(Vec<DescentStage>, usize)> {
    let (_, h) = c.u32s("header")?;
    if h.len() != 4 {
        return Err(bad("cascade header must have 4 entries"));
    }
    let stages = (0..h[1] as usize)
        .map(|k| {
            let s = DescentStage {
                r_x: read_matrix(c, &format!("RX_{k}"))?,
                b_x: read_vector(c, &format!("bX_{k}"))?,
                r_w: read_matrix(c, &format!("Rw_{k}"))?,
                b_w: read_vector(c, &format!("bw_{k}"))?,
            };
            s.validate()?;
            if s.feature_len() != h[0] as usize * h[3] as usize {
                return Err(bad(format!("stage {k} has {} feature columns", s.feature_len())));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((stages, h[0] as usize))
}

/// Shape and camera of an alignment or ground-truth record.
pub fn push_shape_camera(c: &mut TensorContainer, p: &ShapeParams, w: &CameraParams) -> Result<()> {
    c.push_f64("p_id", &[p.id.len()], p.id.as_slice())?;
    c.push_f64("p_exp", &[p.exp.len()], p.exp.as_slice())?;
    c.push_f64("camera", &[6], &w.to_array())
}

pub fn read_shape_camera(c: &TensorContainer) -> Result<(ShapeParams, CameraParams)> {
    let p = ShapeParams {
        id: read_vector(c, "p_id")?,
        exp: read_vector(c, "p_exp")?,
    };
    let (_, w) = c.f64s("camera")?;
    let w: [f64; 6] = w.try_into().map_err(|_| bad("camera must have 6 entries"))?;
    Ok((p, CameraParams::from_array(w)))
}

/// Everything about a rendered sample except its pixels.
pub fn sample_to_container(s: &RenderedSample) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    c.push_u32("size", &[2], &[s.image.width(), s.image.height()])?;
    push_shape_camera(&mut c, &s.shape, &s.camera)?;
    c.push_f64("albedo", &[s.albedo.alb.len()], s.albedo.alb.as_slice())?;
    c.push_f64("light", &[3], s.light.as_slice())?;
    push_points(&mut c, "landmarks68", &s.landmarks68)?;
    push_points(&mut c, "landmarks160", &s.landmarks160)?;
    let vis: Vec<u32> = s.visibility160.iter().map(|&v| v as u32).collect();
    c.push_u32("visibility160", &[vis.len()], &vis)?;
    Ok(c)
}

pub fn sample_from_container(c: &TensorContainer, image: RgbImage) -> Result<RenderedSample> {
    let (_, size) = c.u32s("size")?;
    if size[..] != [image.width(), image.height()] {
        return Err(bad(format!("record is for a {}x{} image, got {}x{}", size[0], size[1], image.width(), image.height())));
    }
    let (shape, camera) = read_shape_camera(c)?;
    let (_, light) = c.f64s("light")?;
    if light.len() != 3 {
        return Err(bad("light must have 3 entries"));
    }
    Ok(RenderedSample {
        image,
        shape,
        albedo: AlbedoParams {
            alb: read_vector(c, "albedo")?,
        },
        camera,
        light: Vector3::new(light[0], light[1], light[2]),
        landmarks68: read_points(c, "landmarks68")?,
        landmarks160: read_points(c, "landmarks160")?,
        visibility160: c.u32s("visibility160")?.1.iter().map(|&v| v != 0).collect(),
    })
}
