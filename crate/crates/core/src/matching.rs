//! Nearest-angle correspondence search between descriptor maps.

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::net::FeatureMap;
use crate::render::SENTINEL_NONE;

pub const SPARSE_THRESHOLD_DEG: f64 = 30.0;
pub const DENSE_THRESHOLD_DEG: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    pub threshold_deg: f64,
}

impl MatchSet {
    /// One line per pair: `sx sy tx ty angle`.
    pub fn to_text(&self) -> String {
        let mut s = format!("# threshold_deg {}\n# sx sy tx ty angle\n", self.threshold_deg);
        for p in &self.pairs {
            s += &format!(
                "{} {} {} {} {:.6}\n",
                p.source.0, p.source.1, p.target.0, p.target.1, p.angle_deg
            );
        }
        s
    }
}

/// Angle between two unit vectors in degrees; the dot product is clamped.
pub fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d.clamp(-1.0, 1.0).acos().to_degrees()
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 180.0) {
        return Err(Error::InvalidArgument(format!("threshold {t} must be in (0, 180) degrees")));
    }
    Ok(())
}

fn check_mask(fmap: &FeatureMap, mask: &[bool], what: &'static str) -> Result<()> {
    crate::error::check_dim(what, fmap.width * fmap.height, mask.len())
}

/// Best masked target pixel for descriptor `f`: largest dot product, ties
/// resolved toward the lowest row-major index.
fn best_target(f: &[f64], tgt: &FeatureMap, candidates: &[usize]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &i in candidates {
        let g = &tgt.data[i * tgt.dim..(i + 1) * tgt.dim];
        let d: f64 = f.iter().zip(g).map(|(x, y)| x * y).sum();
        if best.map_or(true, |(_, b)| d > b) {
            best = Some((i, d));
        }
    }
    best
}

pub fn sparse_match(
    src: &FeatureMap,
    src_points: &[(usize, usize)],
    tgt: &FeatureMap,
    tgt_mask: &[bool],
    threshold_deg: f64,
) -> Result<MatchSet> {
    check_threshold(threshold_deg)?;
    check_mask(tgt, tgt_mask, "target mask")?;
    crate::error::check_dim("descriptor dimension", src.dim, tgt.dim)?;
    let candidates: Vec<usize> = (0..tgt_mask.len()).filter(|&i| tgt_mask[i]).collect();
    let mut pairs = Vec::new();
    for &(x, y) in src_points {
        if x >= src.width || y >= src.height {
            return Err(Error::OutOfRange {
                what: "source point",
                index: y * src.width + x,
                len: src.width * src.height,
            });
        }
        let f = src.pixel(x, y);
        if let Some((i, _)) = best_target(f, tgt, &candidates) {
            let target = (i % tgt.width, i / tgt.width);
            let angle = angle_deg(f, tgt.pixel(target.0, target.1));
            if angle <= threshold_deg {
                pairs.push(MatchPair {
                    source: (x, y),
                    target,
                    angle_deg: angle,
                });
            }
        }
    }
    Ok(MatchSet { pairs, threshold_deg })
}

/// Dense result: the pair list plus a per-source-pixel map of target indices
/// (`y * W + x` in the target) or [`SENTINEL_NONE`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatch {
    pub matches: MatchSet,
    pub width: usize,
    pub height: usize,
    pub correspondence: Vec<u32>,
}

pub fn dense_match(
    src: &FeatureMap,
    src_mask: &[bool],
    tgt: &FeatureMap,
    tgt_mask: &[bool],
    threshold_deg: f64,
) -> Result<DenseMatch> {
    check_mask(src, src_mask, "source mask")?;
    let points: Vec<(usize, usize)> = (0..src_mask.len())
        .filter(|&i| src_mask[i])
        .map(|i| (i % src.width, i / src.width))
        .collect();
    let matches = sparse_match(src, &points, tgt, tgt_mask, threshold_deg)?;
    let mut correspondence = vec![SENTINEL_NONE; src.width * src.height];
    for p in &matches.pairs {
        correspondence[p.source.1 * src.width + p.source.0] = (p.target.1 * tgt.width + p.target.0) as u32;
    }
    Ok(DenseMatch {
        matches,
        width: src.width,
        height: src.height,
        correspondence,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Colour-coded correspondence: hue follows the target x, saturation the
/// target y; unmatched pixels are black.
pub fn correspondence_image(dense: &DenseMatch, tgt_width: usize, tgt_height: usize) -> RgbImage {
    let mut img = RgbImage::new(dense.width as u32, dense.height as u32);
    let nx = (tgt_width.max(2) - 1) as f64;
    let ny = (tgt_height.max(2) - 1) as f64;
    for (i, &t) in dense.correspondence.iter().enumerate() {
        if t == SENTINEL_NONE {
            continue;
        }
        let (tx, ty) = ((t as usize % tgt_width) as f64, (t as usize / tgt_width) as f64);
        // keep the hue short of a full turn so both image edges stay distinct
        let rgb = hsv_to_rgb(0.85 * tx / nx, 0.25 + 0.75 * ty / ny, 1.0);
        img.put_pixel((i % dense.width) as u32, (i / dense.width) as u32, Rgb(rgb));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(width: usize, height: usize, dim: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap {
            height,
            width,
            dim,
            data,
        }
    }

    #[test]
    fn angle_is_clamped() {
        let a = [1.0 + 1e-15, 0.0];
        assert_eq!(angle_deg(&a, &a), 0.0);
        assert!((angle_deg(&[1.0, 0.0], &[-1.0 - 1e-15, 0.0]) - 180.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_filters_and_ties_pick_first() {
        let s = 0.5f64.sqrt();
        let src = map(1, 1, 2, vec![1.0, 0.0]);
        // 45 degrees twice, then 90
        let tgt = map(3, 1, 2, vec![s, s, s, -s, 0.0, 1.0]);
        let wide = sparse_match(&src, &[(0, 0)], &tgt, &[true; 3], 50.0).unwrap();
        assert_eq!(wide.pairs.len(), 1);
        assert_eq!(wide.pairs[0].target, (0, 0));
        assert!((wide.pairs[0].angle_deg - 45.0).abs() < 1e-12);
        let narrow = sparse_match(&src, &[(0, 0)], &tgt, &[true; 3], 30.0).unwrap();
        assert!(narrow.pairs.is_empty());
        let masked = sparse_match(&src, &[(0, 0)], &tgt, &[false, true, true], 50.0).unwrap();
        assert_eq!(masked.pairs[0].target, (1, 0));
        let empty = sparse_match(&src, &[(0, 0)], &tgt, &[false; 3], 50.0).unwrap();
        assert!(empty.pairs.is_empty());
        assert!(sparse_match(&src, &[(0, 0)], &tgt, &[true; 3], 180.0).is_err());
    }

    #[test]
    fn hue_coding() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(0.5, 0.0, 1.0), [255, 255, 255]);
        let dense = DenseMatch {
            matches: MatchSet {
                pairs: vec![],
                threshold_deg: 12.0,
            },
            width: 2,
            height: 1,
            correspondence: vec![0, SENTINEL_NONE],
        };
        let img = correspondence_image(&dense, 2, 1);
        assert_eq!(img.get_pixel(1, 0).0, [0, 0, 0]);
        assert_ne!(img.get_pixel(0, 0).0, [0, 0, 0]);
    }
}
