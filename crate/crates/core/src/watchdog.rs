//! Reconstruction-error gating of classifier outputs.
//!
//! RMSE is reported on the 0–255 pixel scale: for image `i`,
//! `sqrt(mean_p (255·x_p − 255·r_p)²)`. An image is accepted iff its RMSE is
//! at most the threshold.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::SourceTag;
use crate::model::{GuardedClassifier, NUM_CLASSES};
use crate::tensor::{FlushDenormals, Real, Tensor, TensorError};

pub const PIXEL_SCALE: f64 = 255.0;

/// Images per forward pass when scoring a large set.
pub const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum WatchdogError {
    #[error("threshold must be a non-negative number, got {0}")]
    InvalidThreshold(f64),
    #[error("percentile must lie in [0, 100], got {0}")]
    InvalidPercentile(f64),
    #[error("reconstruction shape {found:?} does not match original shape {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("no images to score")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Reconstruction-RMSE cutoff on the 0–255 scale. `+∞` accepts everything.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WatchdogConfig {
    threshold: f64,
}

impl WatchdogConfig {
    pub fn new(threshold: f64) -> Result<Self, WatchdogError> {
        if threshold.is_nan() || threshold < 0.0 {
            return Err(WatchdogError::InvalidThreshold(threshold));
        }
        Ok(Self { threshold })
    }

    pub fn open() -> Self {
        Self { threshold: f64::INFINITY }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn accepts(&self, rmse: f64) -> bool {
        rmse <= self.threshold
    }
}

/// Per-image RMSE between `original` and `reconstruction` (both `N × …`).
pub fn reconstruction_rmse<T: Real>(original: &Tensor<T>, reconstruction: &Tensor<T>) -> Result<Vec<f64>, WatchdogError> {
    if original.shape() != reconstruction.shape() {
        return Err(WatchdogError::ShapeMismatch {
            expected: original.shape().to_vec(),
            found: reconstruction.shape().to_vec(),
        });
    }
    let n = original.shape()[0];
    let per = original.len() / n;
    Ok(original
        .data()
        .chunks_exact(per)
        .zip(reconstruction.data().chunks_exact(per))
        .map(|(o, r)| {
            let sq: f64 = o
                .iter()
                .zip(r)
                .map(|(&a, &b)| {
                    let d = PIXEL_SCALE * a.to_f64().unwrap_or(f64::NAN) - PIXEL_SCALE * b.to_f64().unwrap_or(f64::NAN);
                    d * d
                })
                .sum();
            (sq / per as f64).sqrt()
        })
        .collect())
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// sample at or below it. `p = 0` gives the minimum.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, WatchdogError> {
    if !(0.0..=100.0).contains(&p) {
        return Err(WatchdogError::InvalidPercentile(p));
    }
    if values.is_empty() {
        return Err(WatchdogError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classifier output and reconstruction error for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub class_probs: [f32; NUM_CLASSES],
    pub rmse: f64,
}

impl Scored {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.class_probs)
    }

    pub fn max_prob(&self) -> f32 {
        self.class_probs[self.predicted_class()]
    }
}

/// Runs `net` over `images` in chunks, one classify-and-reconstruct call per chunk.
pub fn score(net: &dyn GuardedClassifier, images: &Tensor) -> Result<Vec<Scored>, WatchdogError> {
    let _ftz = FlushDenormals::enable();
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = images.gather_rows(&idx)?;
        let (probs, recon) = net.classify_and_reconstruct(&chunk)?;
        let rmse = reconstruction_rmse(&chunk, &recon)?;
        for (row, r) in probs.data().chunks_exact(NUM_CLASSES).zip(rmse) {
            out.push(Scored {
                class_probs: row.try_into().expect("10 classes"),
                rmse: r,
            });
        }
        start = end;
    }
    Ok(out)
}

/// A scored image with the watchdog's verdict. Class probabilities are kept
/// whether or not the image is accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedOutput {
    pub rmse: f64,
    pub accepted: bool,
    pub class_probs: [f32; NUM_CLASSES],
    pub predicted_class: usize,
}

pub fn apply_gate(scored: &[Scored], config: WatchdogConfig) -> Vec<GatedOutput> {
    scored
        .iter()
        .map(|s| GatedOutput {
            rmse: s.rmse,
            accepted: config.accepts(s.rmse),
            class_probs: s.class_probs,
            predicted_class: s.predicted_class(),
        })
        .collect()
}

pub fn gate(net: &dyn GuardedClassifier, images: &Tensor, config: WatchdogConfig) -> Result<Vec<GatedOutput>, WatchdogError> {
    Ok(apply_gate(&score(net, images)?, config))
}

pub const GATE_CSV_HEADER: &str = "index,source_tag,rmse,accepted,predicted_class,true_class,max_prob";

/// One CSV row per gated image; `sources` and `labels` align with `gated`.
pub fn gate_csv(gated: &[GatedOutput], sources: &[SourceTag], labels: &[u8]) -> String {
    assert_eq!(gated.len(), sources.len());
    assert_eq!(gated.len(), labels.len());
    let mut out = String::with_capacity(48 * (gated.len() + 1));
    out.push_str(GATE_CSV_HEADER);
    out.push('\n');
    for (i, g) in gated.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{:.6},{},{},{},{:.6}",
            sources[i],
            g.rmse,
            g.accepted,
            g.predicted_class,
            labels[i],
            g.class_probs[g.predicted_class]
        );
    }
    out
}
