//! Normalized mean landmark error with yaw binning.

use nalgebra::Vector2;

use crate::align::FaceBox;
use crate::error::{check_dim, Error, Result};
use crate::face_model::NUM_LANDMARKS;

pub const YAW_BIN_LABELS: [&str; 3] = ["[0,30]", "(30,60]", "(60,90]"];

/// Mean error over visible landmarks divided by `sqrt(w * h)` of `bbox`.
pub fn nme_bbox(predicted: &[Vector2<f64>], truth: &[Vector2<f64>], visible: &[bool], bbox: &FaceBox) -> Result<f64> {
    check_dim("predicted landmarks", truth.len(), predicted.len())?;
    check_dim("visibility mask", truth.len(), visible.len())?;
    let norm = (bbox.width * bbox.height).sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidArgument(format!("bounding box {bbox:?} has no area")));
    }
    let (sum, n) = predicted
        .iter()
        .zip(truth)
        .zip(visible)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| (s + (p - t).norm(), n + 1));
    if n == 0 {
        return Err(Error::InvalidArgument("no visible landmarks".into()));
    }
    Ok(sum / n as f64 / norm)
}

fn eye_centers(pts: &[Vector2<f64>]) -> (Vector2<f64>, Vector2<f64>) {
    let mean = |r: std::ops::Range<usize>| r.clone().map(|i| pts[i]).sum::<Vector2<f64>>() / r.len() as f64;
    (mean(36..42), mean(42..48))
}

/// Mean error over all 68 landmarks divided by the true distance between
/// the two eye-contour centres.
pub fn nme_interpupil(predicted: &[Vector2<f64>], truth: &[Vector2<f64>]) -> Result<f64> {
    check_dim("predicted landmarks", NUM_LANDMARKS, predicted.len())?;
    check_dim("true landmarks", NUM_LANDMARKS, truth.len())?;
    let (l, r) = eye_centers(truth);
    let d = (l - r).norm();
    if !(d > 0.0) {
        return Err(Error::InvalidArgument("zero inter-pupil distance".into()));
    }
    let sum: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t).norm()).sum();
    Ok(sum / NUM_LANDMARKS as f64 / d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmeMode {
    /// Normalized by the tight box of the true landmarks.
    BoundingBox,
    InterPupil,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub predicted: Vec<Vector2<f64>>,
    pub truth: Vec<Vector2<f64>>,
    /// Landmarks to score in bounding-box mode; `None` scores all.
    pub visible: Option<Vec<bool>>,
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: NmeMode,
    pub per_image: Vec<f64>,
    pub bins: Vec<usize>,
    pub bin_counts: [usize; 3],
    pub bin_means: [Option<f64>; 3],
    /// Mean of the non-empty bin means.
    pub mean: f64,
    /// Population standard deviation of the non-empty bin means.
    pub std: f64,
    pub image_mean: f64,
}

pub fn yaw_bin(yaw_deg: f64) -> usize {
    let a = yaw_deg.abs();
    if a <= 30.0 {
        0
    } else if a <= 60.0 {
        1
    } else {
        2
    }
}

pub fn evaluate(samples: &[EvalSample], mode: NmeMode) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let mut bins = Vec::with_capacity(samples.len());
    let mut sums = [0.0; 3];
    let mut bin_counts = [0usize; 3];
    for s in samples {
        let e = match mode {
            NmeMode::BoundingBox => {
                let all;
                let vis = match &s.visible {
                    Some(v) => v,
                    None => {
                        all = vec![true; s.truth.len()];
                        &all
                    }
                };
                nme_bbox(&s.predicted, &s.truth, vis, &FaceBox::around(&s.truth, 0.0)?)?
            }
            NmeMode::InterPupil => nme_interpupil(&s.predicted, &s.truth)?,
        };
        let b = yaw_bin(s.yaw_deg);
        sums[b] += e;
        bin_counts[b] += 1;
        per_image.push(e);
        bins.push(b);
    }
    let bin_means = [0, 1, 2].map(|b| (bin_counts[b] > 0).then(|| sums[b] / bin_counts[b] as f64));
    let present: Vec<f64> = bin_means.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let std = (present.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / present.len() as f64).sqrt();
    let image_mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(EvalReport {
        mode,
        per_image,
        bins,
        bin_counts,
        bin_means,
        mean,
        std,
        image_mean,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let fmt = |m: Option<f64>| m.map_or_else(|| "-".to_string(), |v| format!("{:.4}", 100.0 * v));
        let mut s = format!(
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "NME (%)", YAW_BIN_LABELS[0], YAW_BIN_LABELS[1], YAW_BIN_LABELS[2], "Mean", "Std"
        );
        s += &format!(
            "{:<10} {:>10} {:>10} {:>10} {:>10.4} {:>10.4}\n",
            match self.mode {
                NmeMode::BoundingBox => "bbox",
                NmeMode::InterPupil => "pupil",
            },
            fmt(self.bin_means[0]),
            fmt(self.bin_means[1]),
            fmt(self.bin_means[2]),
            100.0 * self.mean,
            100.0 * self.std
        );
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!("images={}\n", self.per_image.len());
        for b in 0..3 {
            s += &format!("bin{b}.count={}\n", self.bin_counts[b]);
            if let Some(m) = self.bin_means[b] {
                s += &format!("bin{b}.mean={m:.9}\n");
            }
        }
        s += &format!("mean={:.9}\nstd={:.9}\nimage_mean={:.9}\n", self.mean, self.std, self.image_mean);
        s
    }
}
