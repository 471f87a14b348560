//! Accuracy, per-source reconstruction error, ROC curves and evaluation timing.
//!
//! ROC events: a sample is *flagged* as a valid classification when its score
//! reaches the threshold θ and the watchdog has not vetoed it. TPR is the
//! fraction of in-distribution samples that are flagged and correctly
//! classified; FPR is the fraction of out-of-distribution samples flagged.
//! θ runs over `+∞`, every distinct observed score in descending order, then
//! `−∞`; a terminal `(1, 1)` point is appended when the sweep does not reach it.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::data::{Distribution, ImageDataset, MixedDataset};
use crate::model::GuardedClassifier;
use crate::tensor::FlushDenormals;
use crate::watchdog::{self, Scored, WatchdogConfig, WatchdogError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    Empty,
    #[error("no {0}-distribution samples")]
    MissingTag(Distribution),
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score at sample {0} is NaN")]
    NanScore(usize),
    #[error(transparent)]
    Watchdog(#[from] WatchdogError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    /// θ over max-softmax confidence.
    Confidence,
    /// θ over negated reconstruction RMSE (flagged iff rmse ≤ −θ).
    WatchdogRmse,
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepKind::Confidence => "confidence",
            SweepKind::WatchdogRmse => "watchdog_rmse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// `None` for the appended terminal point.
    pub theta: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub sweep_kind: SweepKind,
    /// Watchdog threshold applied as a veto, if any.
    pub veto_threshold: Option<f64>,
}

pub const ROC_CSV_HEADER: &str = "theta,fpr,tpr";

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.points.len() + 1));
        out.push_str(ROC_CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            if let Some(t) = p.theta {
                let _ = write!(out, "{t}");
            }
            let _ = writeln!(out, ",{},{}", p.fpr, p.tpr);
        }
        out
    }
}

/// One evaluation sample as seen by the ROC sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocSample {
    pub score: f64,
    pub distribution: Distribution,
    pub correct: bool,
    pub vetoed: bool,
}

/// Trapezoidal area under `points` in stored order.
pub fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5)
        .sum()
}

/// The θ values visited by the sweep: `+∞`, distinct scores descending, `−∞`.
pub fn sweep_thresholds(samples: &[RocSample]) -> Vec<f64> {
    let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut out = Vec::with_capacity(scores.len() + 2);
    out.push(f64::INFINITY);
    out.extend(scores);
    out.push(f64::NEG_INFINITY);
    out
}

fn class_counts(samples: &[RocSample]) -> Result<(usize, usize), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = samples.iter().position(|s| s.score.is_nan()) {
        return Err(EvalError::NanScore(i));
    }
    let n_in = samples.iter().filter(|s| s.distribution == Distribution::In).count();
    let n_out = samples.len() - n_in;
    if n_in == 0 {
        return Err(EvalError::MissingTag(Distribution::In));
    }
    if n_out == 0 {
        return Err(EvalError::MissingTag(Distribution::Out));
    }
    Ok((n_in, n_out))
}

pub fn roc_curve(samples: &[RocSample], sweep_kind: SweepKind, veto_threshold: Option<f64>) -> Result<RocCurve, EvalError> {
    let (n_in, n_out) = class_counts(samples)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].score.total_cmp(&samples[a].score));

    let mut points = Vec::new();
    let (mut tp, mut fp, mut next) = (0usize, 0usize, 0usize);
    for theta in sweep_thresholds(samples) {
        while next < order.len() && samples[order[next]].score >= theta {
            let s = &samples[order[next]];
            if !s.vetoed {
                match s.distribution {
                    Distribution::In if s.correct => tp += 1,
                    Distribution::In => {}
                    Distribution::Out => fp += 1,
                }
            }
            next += 1;
        }
        points.push(RocPoint {
            theta: Some(theta),
            fpr: fp as f64 / n_out as f64,
            tpr: tp as f64 / n_in as f64,
        });
    }
    let last = points[points.len() - 1];
    if last.fpr != 1.0 || last.tpr != 1.0 {
        points.push(RocPoint { theta: None, fpr: 1.0, tpr: 1.0 });
    }
    let auc = trapezoid(&points);
    Ok(RocCurve { points, auc, sweep_kind, veto_threshold })
}

fn confidence_samples(scored: &[Scored], mixed: &MixedDataset, veto: Option<WatchdogConfig>) -> Result<Vec<RocSample>, EvalError> {
    if scored.len() != mixed.len() {
        return Err(EvalError::LengthMismatch { scores: scored.len(), labels: mixed.len() });
    }
    Ok(scored
        .iter()
        .enumerate()
        .map(|(i, s)| RocSample {
            score: f64::from(s.max_prob()),
            distribution: mixed.tags[i],
            correct: s.predicted_class() == usize::from(mixed.labels[i]),
            vetoed: veto.is_some_and(|c| !c.accepts(s.rmse)),
        })
        .collect())
}

/// Confidence sweep with no watchdog.
pub fn roc_unguarded(scored: &[Scored], mixed: &MixedDataset) -> Result<RocCurve, EvalError> {
    roc_curve(&confidence_samples(scored, mixed, None)?, SweepKind::Confidence, None)
}

/// Confidence sweep where samples with rmse above the threshold are never flagged.
pub fn roc_guarded(scored: &[Scored], mixed: &MixedDataset, config: WatchdogConfig) -> Result<RocCurve, EvalError> {
    roc_curve(
        &confidence_samples(scored, mixed, Some(config))?,
        SweepKind::Confidence,
        Some(config.threshold()),
    )
}

/// Sweep over the watchdog threshold alone: flagged iff rmse ≤ τ.
pub fn roc_rmse(scored: &[Scored], mixed: &MixedDataset) -> Result<RocCurve, EvalError> {
    let mut samples = confidence_samples(scored, mixed, None)?;
    for (s, sc) in samples.iter_mut().zip(scored) {
        s.score = -sc.rmse;
    }
    roc_curve(&samples, SweepKind::WatchdogRmse, None)
}

/// Fraction of predictions equal to labels.
pub fn accuracy_of(predicted: &[usize], labels: &[u8]) -> Result<f64, EvalError> {
    if predicted.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: predicted.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predicted.iter().zip(labels).filter(|(&p, &l)| p == usize::from(l)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Test accuracy of the classifier path on a labeled set.
pub fn accuracy(net: &dyn GuardedClassifier, data: &ImageDataset) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    let _ftz = FlushDenormals::enable();
    let mut predicted = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(watchdog::CHUNK) {
        let idx: Vec<usize> = (start..(start + watchdog::CHUNK).min(data.len())).collect();
        let chunk = data.images.gather_rows(&idx).map_err(WatchdogError::from)?;
        let probs = net.classify(&chunk).map_err(WatchdogError::from)?;
        predicted.extend(probs.data().chunks_exact(crate::model::NUM_CLASSES).map(watchdog::argmax));
    }
    accuracy_of(&predicted, &data.labels)
}

/// Mean RMSE over in-tagged and out-tagged samples.
pub fn rmse_by_source(rmse: &[f64], tags: &[Distribution]) -> Result<(f64, f64), EvalError> {
    if rmse.len() != tags.len() {
        return Err(EvalError::LengthMismatch { scores: rmse.len(), labels: tags.len() });
    }
    let mean = |tag| {
        let v: Vec<f64> = rmse.iter().zip(tags).filter(|(_, &t)| t == tag).map(|(&r, _)| r).collect();
        if v.is_empty() {
            Err(EvalError::MissingTag(tag))
        } else {
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok((mean(Distribution::In)?, mean(Distribution::Out)?))
}

/// Runs `f` and returns its result with the elapsed wall-clock seconds.
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_rmse_in: f64,
    pub mean_rmse_out: f64,
    pub separation_ratio: f64,
    pub threshold: f64,
    pub rejected_in: f64,
    pub rejected_out: f64,
    pub roc_unguarded: RocCurve,
    pub roc_guarded: RocCurve,
    pub roc_rmse: RocCurve,
    pub eval_seconds: f64,
}

impl EvalReport {
    /// Builds the report from per-sample scores. Accuracy is over the in-tagged entries.
    pub fn from_scores(scored: &[Scored], mixed: &MixedDataset, config: WatchdogConfig, eval_seconds: f64) -> Result<Self, EvalError> {
        if scored.len() != mixed.len() {
            return Err(EvalError::LengthMismatch { scores: scored.len(), labels: mixed.len() });
        }
        let rmse: Vec<f64> = scored.iter().map(|s| s.rmse).collect();
        let (mean_rmse_in, mean_rmse_out) = rmse_by_source(&rmse, &mixed.tags)?;
        let (mut pred, mut labels) = (Vec::new(), Vec::new());
        let (mut rej_in, mut rej_out) = (0usize, 0usize);
        for (i, s) in scored.iter().enumerate() {
            let rejected = !config.accepts(s.rmse);
            match mixed.tags[i] {
                Distribution::In => {
                    pred.push(s.predicted_class());
                    labels.push(mixed.labels[i]);
                    rej_in += usize::from(rejected);
                }
                Distribution::Out => rej_out += usize::from(rejected),
            }
        }
        let n_in = labels.len();
        Ok(Self {
            accuracy: accuracy_of(&pred, &labels)?,
            mean_rmse_in,
            mean_rmse_out,
            separation_ratio: mean_rmse_out / mean_rmse_in,
            threshold: config.threshold(),
            rejected_in: rej_in as f64 / n_in as f64,
            rejected_out: rej_out as f64 / (mixed.len() - n_in) as f64,
            roc_unguarded: roc_unguarded(scored, mixed)?,
            roc_guarded: roc_guarded(scored, mixed, config)?,
            roc_rmse: roc_rmse(scored, mixed)?,
            eval_seconds,
        })
    }

    /// Metrics as `key=value` lines. Timing is left out so reruns compare byte-equal.
    pub fn summary(&self) -> String {
        format!(
            "accuracy={}\nmean_rmse_in={}\nmean_rmse_out={}\nseparation_ratio={}\nthreshold={}\n\
             rejected_in={}\nrejected_out={}\nauc_unguarded={}\nauc_guarded={}\nauc_rmse={}\n",
            self.accuracy,
            self.mean_rmse_in,
            self.mean_rmse_out,
            self.separation_ratio,
            self.threshold,
            self.rejected_in,
            self.rejected_out,
            self.roc_unguarded.auc,
            self.roc_guarded.auc,
            self.roc_rmse.auc,
        )
    }
}

/// Scores the whole mixed set once (timed) and builds the report.
pub fn evaluate(net: &dyn GuardedClassifier, mixed: &MixedDataset, config: WatchdogConfig) -> Result<EvalReport, EvalError> {
    let (scored, seconds) = timed(|| watchdog::score(net, &mixed.images));
    EvalReport::from_scores(&scored?, mixed, config, seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NUM_CLASSES;
    use crate::tensor::Tensor;

    fn sample(score: f64, distribution: Distribution, correct: bool) -> RocSample {
        RocSample { score, distribution, correct, vetoed: false }
    }

    #[test]
    fn separable_scores_give_unit_auc() {
        let s = [
            sample(0.9, Distribution::In, true),
            sample(0.8, Distribution::In, true),
            sample(0.7, Distribution::Out, false),
            sample(0.6, Distribution::Out, false),
        ];
        let c = roc_curve(&s, SweepKind::Confidence, None).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
        let last = c.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn constant_confidence_degenerates() {
        let s = [
            sample(1.0, Distribution::In, true),
            sample(1.0, Distribution::In, false),
            sample(1.0, Distribution::Out, false),
        ];
        let c = roc_curve(&s, SweepKind::Confidence, None).unwrap();
        let xy: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(xy, vec![(0.0, 0.0), (1.0, 0.5), (1.0, 0.5), (1.0, 1.0)]);
        assert_eq!(c.points[3].theta, None);
        assert!((c.auc - 0.25).abs() < 1e-15);
    }

    #[test]
    fn closed_gate_pins_curve() {
        let s: Vec<RocSample> = (0..6)
            .map(|i| RocSample {
                score: i as f64 / 6.0,
                distribution: if i % 2 == 0 { Distribution::In } else { Distribution::Out },
                correct: true,
                vetoed: true,
            })
            .collect();
        let c = roc_curve(&s, SweepKind::Confidence, Some(0.0)).unwrap();
        let n = c.points.len();
        assert!(c.points[..n - 1].iter().all(|p| p.fpr == 0.0 && p.tpr == 0.0));
        assert_eq!((c.points[n - 1].fpr, c.points[n - 1].tpr), (1.0, 1.0));
        assert_eq!(c.auc, 0.5);
    }

    #[test]
    fn one_tag_rejected() {
        let s = [sample(0.5, Distribution::In, true)];
        assert!(matches!(roc_curve(&s, SweepKind::Confidence, None), Err(EvalError::MissingTag(Distribution::Out))));
        assert!(matches!(roc_curve(&[], SweepKind::Confidence, None), Err(EvalError::Empty)));
        let nan = [sample(f64::NAN, Distribution::In, true), sample(0.1, Distribution::Out, false)];
        assert!(matches!(roc_curve(&nan, SweepKind::Confidence, None), Err(EvalError::NanScore(0))));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_of(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy_of(&[1, 0], &[1, 2]).unwrap(), 0.5);
        assert!(matches!(accuracy_of(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn rmse_by_source_examples() {
        let tags = [Distribution::In, Distribution::Out, Distribution::In];
        assert_eq!(rmse_by_source(&[1.0, 6.0, 3.0], &tags).unwrap(), (2.0, 6.0));
        assert_eq!(rmse_by_source(&[0.0; 3], &tags).unwrap(), (0.0, 0.0));
        assert!(matches!(
            rmse_by_source(&[1.0], &[Distribution::In]),
            Err(EvalError::MissingTag(Distribution::Out))
        ));
    }

    fn mixed(n: usize) -> MixedDataset {
        MixedDataset {
            images: Tensor::zeros(&[n, 1, 28, 28]).unwrap(),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
            tags: (0..n).map(|i| if i % 3 == 0 { Distribution::Out } else { Distribution::In }).collect(),
            origin: (0..n).collect(),
        }
    }

    fn scored(n: usize) -> Vec<Scored> {
        (0..n)
            .map(|i| {
                let mut p = [0.05f32; NUM_CLASSES];
                p[(i * 7) % 10] = 0.3 + (i % 5) as f32 * 0.1;
                Scored { class_probs: p, rmse: (i % 11) as f64 }
            })
            .collect()
    }

    #[test]
    fn report_fields() {
        let (m, s) = (mixed(30), scored(30));
        let r = EvalReport::from_scores(&s, &m, WatchdogConfig::new(5.0).unwrap(), 0.25).unwrap();
        assert_eq!(r.roc_guarded.veto_threshold, Some(5.0));
        assert_eq!(r.separation_ratio, r.mean_rmse_out / r.mean_rmse_in);
        let open = EvalReport::from_scores(&s, &m, WatchdogConfig::open(), 0.25).unwrap();
        assert_eq!(open.roc_guarded.points, open.roc_unguarded.points);
        assert_eq!(open.rejected_in, 0.0);
        assert!(r.summary().contains("threshold=5\n"));
        assert!(!r.summary().contains("0.25"));
    }

    #[test]
    fn roc_csv_layout() {
        let s = [sample(0.5, Distribution::In, true), sample(0.25, Distribution::Out, false)];
        let csv = roc_curve(&s, SweepKind::Confidence, None).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, vec!["theta,fpr,tpr", "inf,0,0", "0.5,0,1", "0.25,1,1", "-inf,1,1"]);
    }

    #[test]
    fn empty_workload_times_near_zero() {
        let ((), secs) = timed(|| ());
        assert!(secs < 0.01);
    }
}
