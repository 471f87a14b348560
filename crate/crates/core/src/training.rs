//! Losses, the weighted two-head objective, Adam, the epoch loop and a
//! finite-difference gradient checker.

use std::time::{Duration, Instant};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batches, ImageDataset};
use crate::model::{
    check_images, AutoencoderNet, ClassifierNet, IndependentPair, Network, ParamSet, SymbioticNet,
};
use crate::tensor::{activation, lit, Activation, FlushDenormals, Real, Tensor, TensorError};

/// Probabilities are clamped to at least this before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid loss weights ({classifier}, {generator}): both must lie in [0, 1] and at least one must be positive")]
    InvalidWeights { classifier: f32, generator: f32 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: u8, classes: usize },
    #[error("{rows} prediction rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("prediction row {row} sums to {sum}, not 1")]
    NotDistribution { row: usize, sum: f64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Relative weights of the classifier and generator losses in the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct LossWeights {
    pub classifier: f32,
    pub generator: f32,
}

#[derive(Deserialize)]
struct RawWeights {
    classifier: f32,
    generator: f32,
}

impl TryFrom<RawWeights> for LossWeights {
    type Error = TrainError;

    fn try_from(r: RawWeights) -> Result<Self, TrainError> {
        LossWeights::new(r.classifier, r.generator)
    }
}

impl LossWeights {
    pub fn new(classifier: f32, generator: f32) -> Result<Self, TrainError> {
        let ok = |w: f32| (0.0..=1.0).contains(&w);
        if !ok(classifier) || !ok(generator) || (classifier == 0.0 && generator == 0.0) {
            return Err(TrainError::InvalidWeights { classifier, generator });
        }
        Ok(Self { classifier, generator })
    }

    pub const CLASSIFIER_BIASED: Self = Self { classifier: 1.0, generator: 0.0 };
    pub const GENERATOR_BIASED: Self = Self { classifier: 0.0, generator: 1.0 };

    /// The five bias settings of the sweep, with display names.
    pub fn sweep() -> [(&'static str, LossWeights); 5] {
        [
            ("classifier-biased", Self::CLASSIFIER_BIASED),
            ("generator-biased", Self::GENERATOR_BIASED),
            ("class-25", Self { classifier: 0.25, generator: 0.75 }),
            ("class-50", Self { classifier: 0.5, generator: 0.5 }),
            ("class-75", Self { classifier: 0.75, generator: 0.25 }),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            loss_weights: LossWeights::CLASSIFIER_BIASED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        LossWeights::new(self.loss_weights.classifier, self.loss_weights.generator)?;
        Ok(())
    }
}

/// Mean cross-entropy of probability rows against labels.
///
/// The returned gradient is taken w.r.t. the pre-softmax logits, `(p - onehot) / N`.
pub fn cross_entropy_loss<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>), TrainError> {
    if probs.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op: "cross_entropy_loss",
            expected: 2,
            actual: probs.rank(),
        }
        .into());
    }
    let (n, classes) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != n {
        return Err(TrainError::LabelCount { rows: n, labels: labels.len() });
    }
    let inv_n = T::one() / lit(n as f64);
    let clamp: T = lit(LOG_CLAMP);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (row, &label) in labels.iter().enumerate() {
        if label as usize >= classes {
            return Err(TrainError::LabelOutOfRange { row, label, classes });
        }
        let p = probs.row(row);
        let sum = p.iter().fold(T::zero(), |a, &b| a + b);
        if (sum - T::one()).abs() > lit(1e-5) {
            return Err(TrainError::NotDistribution { row, sum: sum.to_f64().unwrap_or(f64::NAN) });
        }
        loss -= p[label as usize].max(clamp).ln();
        let g = &mut grad.data_mut()[row * classes..(row + 1) * classes];
        g[label as usize] -= T::one();
        for v in g.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Mean squared error and its gradient `2 (r - t) / count`.
pub fn mse_loss<T: Real>(reconstruction: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>), TrainError> {
    if reconstruction.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            axis: "all",
            expected: target.len(),
            actual: reconstruction.len(),
        }
        .into());
    }
    let inv: T = T::one() / lit(target.len() as f64);
    let two: T = lit(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(target.len());
    for (&r, &t) in reconstruction.data().iter().zip(target.data()) {
        let d = r - t;
        loss += d * d;
        grad.push(two * d * inv);
    }
    Ok((loss * inv, Tensor::new(reconstruction.shape(), grad)?))
}

/// Unweighted per-head losses; `None` for a head the network does not have.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadLosses<T = f32> {
    pub classifier: Option<T>,
    pub generator: Option<T>,
}

impl<T: Real> HeadLosses<T> {
    pub fn objective(&self, w: LossWeights) -> T {
        let mut total = T::zero();
        if let Some(c) = self.classifier {
            total += lit::<T>(w.classifier as f64) * c;
        }
        if let Some(g) = self.generator {
            total += lit::<T>(w.generator as f64) * g;
        }
        total
    }
}

fn zeroed<T: Real, P: ParamSet<T> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    for (_, t) in z.params_mut() {
        t.fill(T::zero());
    }
    z
}

/// A network that can report its losses and the gradient of the weighted objective.
///
/// Networks with a single head ignore the weights and minimize that head's loss.
pub trait Trainable<T: Real>: ParamSet<T> + Clone {
    /// Losses and a gradient container shaped like `self`.
    fn loss_and_grads(&self, images: &Tensor<T>, labels: &[u8], w: LossWeights) -> Result<(HeadLosses<T>, Self), TrainError>;

    /// Forward-only losses.
    fn losses(&self, images: &Tensor<T>, labels: &[u8]) -> Result<HeadLosses<T>, TrainError>;

    fn objective(&self, images: &Tensor<T>, labels: &[u8], w: LossWeights) -> Result<T, TrainError> {
        Ok(self.losses(images, labels)?.objective(w))
    }
}

impl<T: Real> Trainable<T> for SymbioticNet<T> {
    fn loss_and_grads(&self, images: &Tensor<T>, labels: &[u8], w: LossWeights) -> Result<(HeadLosses<T>, Self), TrainError> {
        check_images(images)?;
        let enc = self.encoder.forward_cached(images)?;
        let probs = activation(&self.classifier.logits(&enc.latent)?, Activation::Softmax)?;
        let (ce, d_logits) = cross_entropy_loss(&probs, labels)?;
        let dec = self.decoder.forward_cached(&enc.latent)?;
        let (mse, d_recon) = mse_loss(&dec.output, images)?;

        let mut d_latent: Option<Tensor<T>> = None;
        let classifier = if w.classifier > 0.0 {
            let (g, dz) = self
                .classifier
                .backward(&enc.latent, &d_logits.scale(lit(w.classifier as f64)))?;
            d_latent = Some(dz);
            g
        } else {
            zeroed(&self.classifier)
        };
        let decoder = if w.generator > 0.0 {
            let (g, dz) = self.decoder.backward(&dec, &d_recon.scale(lit(w.generator as f64)))?;
            match d_latent.as_mut() {
                Some(acc) => acc.add_scaled(&dz, T::one())?,
                None => d_latent = Some(dz),
            }
            g
        } else {
            zeroed(&self.decoder)
        };
        let encoder = self
            .encoder
            .backward(&enc, &d_latent.expect("at least one weight is positive"))?;
        Ok((
            HeadLosses { classifier: Some(ce), generator: Some(mse) },
            Self { encoder, classifier, decoder },
        ))
    }

    fn losses(&self, images: &Tensor<T>, labels: &[u8]) -> Result<HeadLosses<T>, TrainError> {
        let out = self.forward_with_latent(images)?;
        Ok(HeadLosses {
            classifier: Some(cross_entropy_loss(&out.class_probs, labels)?.0),
            generator: Some(mse_loss(&out.reconstruction, images)?.0),
        })
    }
}

impl<T: Real> Trainable<T> for ClassifierNet<T> {
    fn loss_and_grads(&self, images: &Tensor<T>, labels: &[u8], _w: LossWeights) -> Result<(HeadLosses<T>, Self), TrainError> {
        check_images(images)?;
        let enc = self.encoder.forward_cached(images)?;
        let probs = activation(&self.head.logits(&enc.latent)?, Activation::Softmax)?;
        let (ce, d_logits) = cross_entropy_loss(&probs, labels)?;
        let (head, dz) = self.head.backward(&enc.latent, &d_logits)?;
        let encoder = self.encoder.backward(&enc, &dz)?;
        Ok((HeadLosses { classifier: Some(ce), generator: None }, Self { encoder, head }))
    }

    fn losses(&self, images: &Tensor<T>, labels: &[u8]) -> Result<HeadLosses<T>, TrainError> {
        Ok(HeadLosses {
            classifier: Some(cross_entropy_loss(&self.forward(images)?, labels)?.0),
            generator: None,
        })
    }

    fn objective(&self, images: &Tensor<T>, labels: &[u8], _w: LossWeights) -> Result<T, TrainError> {
        Ok(self.losses(images, labels)?.classifier.expect("classifier head"))
    }
}

impl<T: Real> Trainable<T> for AutoencoderNet<T> {
    fn loss_and_grads(&self, images: &Tensor<T>, _labels: &[u8], _w: LossWeights) -> Result<(HeadLosses<T>, Self), TrainError> {
        check_images(images)?;
        let enc = self.encoder.forward_cached(images)?;
        let dec = self.decoder.forward_cached(&enc.latent)?;
        let (mse, d_recon) = mse_loss(&dec.output, images)?;
        let (decoder, dz) = self.decoder.backward(&dec, &d_recon)?;
        let encoder = self.encoder.backward(&enc, &dz)?;
        Ok((HeadLosses { classifier: None, generator: Some(mse) }, Self { encoder, decoder }))
    }

    fn losses(&self, images: &Tensor<T>, _labels: &[u8]) -> Result<HeadLosses<T>, TrainError> {
        Ok(HeadLosses {
            classifier: None,
            generator: Some(mse_loss(&self.forward(images)?, images)?.0),
        })
    }

    fn objective(&self, images: &Tensor<T>, labels: &[u8], _w: LossWeights) -> Result<T, TrainError> {
        Ok(self.losses(images, labels)?.generator.expect("decoder head"))
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

impl Adam {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor in
/// `params()` order.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<P: ParamSet<T>>(net: &P) -> Self {
        let zeros: Vec<Tensor<T>> = net
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()).expect("parameter shapes are non-empty"))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    /// One Adam update of `net` with gradients `grads` (same layout as `net`).
    pub fn apply<P: ParamSet<T>>(&mut self, adam: &Adam, net: &mut P, grads: &P) {
        self.step += 1;
        let (b1, b2) = (lit::<T>(adam.beta1), lit::<T>(adam.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let t = self.step as i32;
        let bias1 = lit::<T>(1.0 - adam.beta1.powi(t));
        let bias2 = lit::<T>(1.0 - adam.beta2.powi(t));
        let lr: T = lit(adam.learning_rate);
        let eps: T = lit(adam.epsilon);
        let gs = grads.params();
        for (k, (_, p)) in net.params_mut().into_iter().enumerate() {
            let g = gs[k].1.data();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + c1 * g[i];
                v[i] = b2 * v[i] + c2 * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Computes the weighted objective on one batch, checks it is finite and
/// applies one optimizer update. `epoch` and `batch` are only used for error
/// reporting.
#[allow(clippy::too_many_arguments)]
pub fn combined_step<T: Real, N: Trainable<T>>(
    net: &mut N,
    images: &Tensor<T>,
    labels: &[u8],
    weights: LossWeights,
    opt: &mut OptimizerState<T>,
    adam: &Adam,
    epoch: usize,
    batch: usize,
) -> Result<HeadLosses<T>, TrainError> {
    let (losses, grads) = net.loss_and_grads(images, labels, weights).map_err(|e| match e {
        TrainError::Tensor(TensorError::NonFinite { .. }) => TrainError::NonFiniteLoss { epoch, batch },
        e => e,
    })?;
    let finite = |x: Option<T>| x.is_none_or(|v| v.is_finite());
    if !finite(losses.classifier) || !finite(losses.generator) || !losses.objective(weights).is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch, batch });
    }
    opt.apply(adam, net, &grads);
    Ok(losses)
}

/// Per-epoch mean losses over the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub classifier_loss: Option<f64>,
    pub generator_loss: Option<f64>,
    pub seconds_elapsed: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub steps: u64,
    pub duration: Duration,
}

pub const LOSS_CSV_HEADER: &str = "epoch,classifier_loss,generator_loss,seconds_elapsed";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = format!("{LOSS_CSV_HEADER}\n");
        for e in &self.log {
            out.push_str(&format!(
                "{},{},{},{:.3}\n",
                e.epoch,
                opt(e.classifier_loss),
                opt(e.generator_loss),
                e.seconds_elapsed
            ));
        }
        out
    }

    /// Weighted objective per epoch.
    pub fn objective(&self, w: LossWeights) -> Vec<f64> {
        self.log
            .iter()
            .map(|e| {
                e.classifier_loss.unwrap_or(0.0) * w.classifier as f64
                    + e.generator_loss.unwrap_or(0.0) * w.generator as f64
            })
            .collect()
    }
}

/// Trains `net` in place. `on_epoch` sees each epoch's log entry as it completes.
pub fn train_with<N: Trainable<f32>>(
    net: &mut N,
    data: &ImageDataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let _ftz = FlushDenormals::enable();
    let adam = Adam::with_lr(config.learning_rate as f64);
    let mut opt = OptimizerState::new(net);
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (mut cls, mut gen) = (None::<f64>, None::<f64>);
        for (b, idx) in batches(data.len(), config.batch_size, config.seed, epoch).iter().enumerate() {
            let images = data.images.gather_rows(idx)?;
            let labels: Vec<u8> = idx.iter().map(|&i| data.labels[i]).collect();
            let l = combined_step(net, &images, &labels, config.loss_weights, &mut opt, &adam, epoch + 1, b)?;
            let n = idx.len() as f64;
            if let Some(c) = l.classifier {
                *cls.get_or_insert(0.0) += c as f64 * n;
            }
            if let Some(g) = l.generator {
                *gen.get_or_insert(0.0) += g as f64 * n;
            }
        }
        let total = data.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            classifier_loss: cls.map(|s| s / total),
            generator_loss: gen.map(|s| s / total),
            seconds_elapsed: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainReport {
        log,
        steps: opt.step,
        duration: start.elapsed(),
    })
}

pub fn train<N: Trainable<f32>>(net: &mut N, data: &ImageDataset, config: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_with(net, data, config, &mut |_| {})
}

/// Trains the classifier and then the autoencoder of a pair as two separate
/// runs with the same config. The merged log reports the classifier run's
/// loss and the autoencoder run's loss per epoch; times are summed.
/// `on_epoch` sees each classifier epoch, then each autoencoder epoch.
pub fn train_pair(
    pair: &mut IndependentPair,
    data: &ImageDataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport, TrainError> {
    let cls = train_with(&mut pair.classifier, data, config, on_epoch)?;
    let offset = cls.duration.as_secs_f64();
    let ae = train_with(&mut pair.autoencoder, data, config, &mut |e| {
        on_epoch(&EpochLog {
            seconds_elapsed: offset + e.seconds_elapsed,
            ..e.clone()
        })
    })?;
    let log = cls
        .log
        .iter()
        .zip(&ae.log)
        .map(|(c, a)| EpochLog {
            epoch: c.epoch,
            classifier_loss: c.classifier_loss,
            generator_loss: a.generator_loss,
            seconds_elapsed: c.seconds_elapsed + a.seconds_elapsed,
        })
        .collect();
    Ok(TrainReport {
        log,
        steps: cls.steps + ae.steps,
        duration: cls.duration + ae.duration,
    })
}

pub fn train_network(
    net: &mut Network,
    data: &ImageDataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport, TrainError> {
    match net {
        Network::Symbiotic(n) => train_with(n, data, config, on_epoch),
        Network::Independent(p) => train_pair(p, data, config, on_epoch),
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
const GRADCHECK_COORDS: usize = 24;
const GRADCHECK_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub name: String,
    pub coords: usize,
    /// Coordinates dropped because a ReLU kink lies within the probe interval.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn flagged(&self) -> Vec<&BlockCheck> {
        self.blocks.iter().filter(|b| b.max_rel_error.is_nan() || b.max_rel_error > self.tolerance).collect()
    }

    pub fn passed(&self) -> bool {
        self.flagged().is_empty()
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Checks the analytic gradient of the weighted objective of `net` on a small
/// batch against central differences, in double precision.
pub fn gradcheck(
    net: &SymbioticNet,
    images: &Tensor,
    labels: &[u8],
    weights: LossWeights,
    seed: u64,
) -> Result<GradcheckReport, TrainError> {
    let net64: SymbioticNet<f64> = net.cast();
    let images64 = images.cast::<f64>();
    gradcheck_with(&net64, &images64, labels, weights, seed, |n| {
        Ok(n.loss_and_grads(&images64, labels, weights)?.1)
    })
}

/// Like [`gradcheck`] with a caller-supplied analytic gradient.
///
/// Each coordinate is probed with central differences at steps `h` and
/// `h / 10`. If the two disagree the objective is not smooth there and the
/// coordinate is replaced by another one from the same block.
pub fn gradcheck_with<N: Trainable<f64>>(
    net: &N,
    images: &Tensor<f64>,
    labels: &[u8],
    weights: LossWeights,
    seed: u64,
    analytic: impl Fn(&N) -> Result<N, TrainError>,
) -> Result<GradcheckReport, TrainError> {
    let grads = analytic(net)?;
    let mut probe = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<(String, usize)> = net.params().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut blocks = Vec::with_capacity(names.len());
    for (b, (name, len)) in names.into_iter().enumerate() {
        let order = index::sample(&mut rng, len, len.min(4 * GRADCHECK_COORDS)).into_vec();
        let (mut coords, mut skipped, mut worst) = (0, 0, 0.0f64);
        for i in order {
            if coords == GRADCHECK_COORDS {
                break;
            }
            let orig = probe.params()[b].1.data()[i];
            let mut central = |h: f64| -> Result<f64, TrainError> {
                probe.params_mut()[b].1.data_mut()[i] = orig + h;
                let plus = probe.objective(images, labels, weights)?;
                probe.params_mut()[b].1.data_mut()[i] = orig - h;
                let minus = probe.objective(images, labels, weights)?;
                probe.params_mut()[b].1.data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let coarse = central(GRADCHECK_STEP)?;
            let fine = central(GRADCHECK_STEP / 10.0)?;
            if rel_error(coarse, fine) > GRADCHECK_TOLERANCE / 10.0 {
                skipped += 1;
                continue;
            }
            let rel = rel_error(grads.params()[b].1.data()[i], coarse);
            worst = if rel.is_nan() { f64::NAN } else { worst.max(rel) };
            coords += 1;
        }
        blocks.push(BlockCheck {
            name,
            coords,
            skipped,
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        blocks,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceTag;

    fn random_batch(n: usize, seed: u64) -> (Tensor, Vec<u8>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::from_fn(&[n, 1, 28, 28], |_| rng.gen_range(0.0..1.0)).unwrap();
        let labels = (0..n).map(|_| rng.gen_range(0..10u8)).collect();
        (images, labels)
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(1.5, 0.0).is_err());
        assert!(LossWeights::new(-0.1, 0.5).is_err());
        assert!(LossWeights::new(0.25, 0.75).is_ok());
        let bad: Result<LossWeights, _> = serde_json::from_str(r#"{"classifier":0,"generator":0}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = Tensor::new(&[2, 3], vec![1.0f64, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let (loss, _) = cross_entropy_loss(&onehot, &[0, 2]).unwrap();
        assert!(loss.abs() < 1e-12);
        let uniform = Tensor::full(&[4, 10], 0.1f64).unwrap();
        let (loss, grad) = cross_entropy_loss(&uniform, &[0, 3, 9, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((grad.data()[0] - (0.1 - 1.0) / 4.0).abs() < 1e-15);
        assert!((grad.data()[1] - 0.1 / 4.0).abs() < 1e-15);
        assert!(matches!(
            cross_entropy_loss(&uniform, &[0, 10, 1, 1]),
            Err(TrainError::LabelOutOfRange { row: 1, label: 10, .. })
        ));
        let bad = Tensor::full(&[1, 10], 0.2f64).unwrap();
        assert!(matches!(cross_entropy_loss(&bad, &[0]), Err(TrainError::NotDistribution { .. })));
    }

    #[test]
    fn cross_entropy_zero_probability_is_clamped() {
        let p = Tensor::new(&[1, 2], vec![1.0f64, 0.0]).unwrap();
        let (loss, _) = cross_entropy_loss(&p, &[1]).unwrap();
        assert!((loss + LOG_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn fused_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::from_fn(&[4, 10], |_| rng.gen_range(-3.0..3.0f64)).unwrap();
        let labels = [1u8, 7, 0, 9];
        let loss_at = |l: &Tensor<f64>| {
            cross_entropy_loss(&activation(l, Activation::Softmax).unwrap(), &labels).unwrap().0
        };
        let (_, grad) = cross_entropy_loss(&activation(&logits, Activation::Softmax).unwrap(), &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let num = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
            let a = grad.data()[i];
            assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-5) < 1e-3, "coord {i}: {a} vs {num}");
        }
    }

    #[test]
    fn mse_examples() {
        let t = Tensor::from_fn(&[2, 1, 4, 4], |i| i as f64 / 32.0).unwrap();
        let (loss, grad) = mse_loss(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        let (loss, _) = mse_loss(&t.map(|x| x + 1.0), &t).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
        let r = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i * 7) % 11) as f64 / 11.0).unwrap();
        let (loss, grad) = mse_loss(&r, &t).unwrap();
        let mut naive = 0.0;
        for i in 0..32 {
            let d = r.data()[i] - t.data()[i];
            naive += d * d;
            assert!((grad.data()[i] - 2.0 * d / 32.0).abs() < 1e-12);
        }
        assert!((loss - naive / 32.0).abs() < 1e-6);
        let other = Tensor::zeros(&[2, 1, 4, 5]).unwrap();
        assert!(mse_loss(&other, &t).is_err());
    }

    fn enc_grads(net: &SymbioticNet, x: &Tensor, y: &[u8], w: LossWeights) -> (HeadLosses, SymbioticNet) {
        net.loss_and_grads(x, y, w).unwrap()
    }

    #[test]
    fn classifier_only_weights_match_classifier_gradient() {
        let net = SymbioticNet::build(11);
        let (x, y) = random_batch(3, 1);
        let (_, g) = enc_grads(&net, &x, &y, LossWeights::CLASSIFIER_BIASED);
        let alone = ClassifierNet { encoder: net.encoder.clone(), head: net.classifier.clone() };
        let (_, ga) = alone.loss_and_grads(&x, &y, LossWeights::CLASSIFIER_BIASED).unwrap();
        for ((n, a), (_, b)) in g.encoder.params().iter().zip(ga.encoder.params()) {
            assert_eq!(a.data(), b.data(), "{n}");
        }
        assert!(g.decoder.params().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn generator_only_weights_leave_classifier_gradient_zero() {
        let net = SymbioticNet::build(12);
        let (x, y) = random_batch(3, 2);
        let (_, g) = enc_grads(&net, &x, &y, LossWeights::GENERATOR_BIASED);
        assert!(g.classifier.params().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        assert!(g.decoder.params().iter().any(|(_, t)| t.max_abs() > 0.0));
    }

    #[test]
    fn gradient_is_linear_in_weights() {
        let net = SymbioticNet::build(13);
        let (x, y) = random_batch(4, 3);
        let (_, gc) = enc_grads(&net, &x, &y, LossWeights::CLASSIFIER_BIASED);
        let (_, gg) = enc_grads(&net, &x, &y, LossWeights::GENERATOR_BIASED);
        for (a, b) in [(0.5f32, 0.5f32), (0.25, 0.75), (0.75, 0.25)] {
            let (_, gm) = enc_grads(&net, &x, &y, LossWeights::new(a, b).unwrap());
            for (((n, m), (_, c)), (_, g)) in gm.params().iter().zip(gc.params()).zip(gg.params()) {
                for i in 0..m.len() {
                    let expect = a * c.data()[i] + b * g.data()[i];
                    assert!(
                        (m.data()[i] - expect).abs() <= 1e-6,
                        "{n}[{i}] at ({a},{b}): {} vs {expect}",
                        m.data()[i]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_weight_head_is_never_moved() {
        let mut net = SymbioticNet::build(14);
        let before = net.decoder.clone();
        let (x, y) = random_batch(8, 4);
        let mut opt = OptimizerState::new(&net);
        let adam = Adam::default();
        for b in 0..3 {
            combined_step(&mut net, &x, &y, LossWeights::CLASSIFIER_BIASED, &mut opt, &adam, 1, b).unwrap();
        }
        for ((_, a), (_, b)) in net.decoder.params().iter().zip(before.params()) {
            assert_eq!(a.data(), b.data());
        }
        let names = net.params();
        for (k, (n, _)) in names.iter().enumerate() {
            if n.starts_with("decoder.") {
                assert_eq!(opt.first[k].max_abs(), 0.0);
                assert_eq!(opt.second[k].max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn optimizer_state_mirrors_parameters() {
        let net = SymbioticNet::build(0);
        let opt = OptimizerState::new(&net);
        let params = net.params();
        assert_eq!(opt.first.len(), params.len());
        for (k, (_, p)) in params.iter().enumerate() {
            assert_eq!(opt.first[k].shape(), p.shape());
            assert_eq!(opt.second[k].shape(), p.shape());
        }
    }

    #[test]
    fn one_batch_one_step_and_deterministic() {
        let (x, y) = random_batch(10, 5);
        let data = ImageDataset::new(x, y, SourceTag::Digits).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 10,
            loss_weights: LossWeights::new(0.5, 0.5).unwrap(),
            ..TrainConfig::default()
        };
        let mut a = SymbioticNet::build(3);
        let report = train(&mut a, &data, &config).unwrap();
        assert_eq!(report.steps, 1);
        assert_eq!(report.log.len(), 1);

        let config = TrainConfig { epochs: 2, batch_size: 4, ..config };
        let mut b = SymbioticNet::build(3);
        let mut c = SymbioticNet::build(3);
        let rb = train(&mut b, &data, &config).unwrap();
        train(&mut c, &data, &config).unwrap();
        assert_eq!(rb.steps, 6);
        for ((_, p), (_, q)) in b.params().iter().zip(c.params()) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn pair_training_sums_both_runs() {
        let (x, y) = random_batch(6, 6);
        let data = ImageDataset::new(x, y, SourceTag::Digits).unwrap();
        let config = TrainConfig { epochs: 2, batch_size: 3, ..TrainConfig::default() };
        let mut pair = IndependentPair::build(1);
        let report = train_pair(&mut pair, &data, &config, &mut |_| {}).unwrap();
        assert_eq!(report.steps, 8);
        assert!(report.log.iter().all(|e| e.classifier_loss.is_some() && e.generator_loss.is_some()));
        let csv = report.to_csv();
        assert!(csv.starts_with(LOSS_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn rejects_bad_config_and_empty_data() {
        let (x, y) = random_batch(2, 7);
        let data = ImageDataset::new(x, y, SourceTag::Digits).unwrap();
        let mut net = SymbioticNet::build(0);
        for config in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&mut net, &data, &config), Err(TrainError::InvalidConfig(_))));
        }
        let empty = ImageDataset {
            images: data.images.clone(),
            labels: vec![],
            source: SourceTag::Digits,
        };
        assert!(matches!(train(&mut net, &empty, &TrainConfig::default()), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn non_finite_loss_reports_batch() {
        let mut net = SymbioticNet::build(0);
        net.classifier.fc.weights.data_mut()[0] = f32::NAN;
        let (x, y) = random_batch(2, 8);
        let mut opt = OptimizerState::new(&net);
        let r = combined_step(&mut net, &x, &y, LossWeights::CLASSIFIER_BIASED, &mut opt, &Adam::default(), 2, 17);
        assert!(matches!(r, Err(TrainError::NonFiniteLoss { epoch: 2, batch: 17 })));
    }

    #[test]
    fn gradcheck_passes_on_fresh_network() {
        let net = SymbioticNet::build(21);
        let (x, y) = random_batch(2, 9);
        let report = gradcheck(&net, &x, &y, LossWeights::new(0.5, 0.5).unwrap(), 0).unwrap();
        assert_eq!(report.blocks.len(), 14);
        let params = net.params();
        for b in &report.blocks {
            let len = params.iter().find(|(n, _)| *n == b.name).unwrap().1.len();
            assert!(b.coords >= 20 || b.coords + b.skipped == len, "{b:?}");
        }
        assert!(report.passed(), "{:?}", report.flagged());
    }

    #[test]
    fn gradcheck_flags_sign_flip_and_has_no_side_effects() {
        let net = SymbioticNet::build(22);
        let before = net.clone();
        let (x, y) = random_batch(2, 10);
        let w = LossWeights::new(0.5, 0.5).unwrap();
        let net64: SymbioticNet<f64> = net.cast();
        let x64 = x.cast::<f64>();
        let report = gradcheck_with(&net64, &x64, &y, w, 0, |n| {
            let mut g = n.loss_and_grads(&x64, &y, w)?.1;
            let t = &mut g.decoder.tconv1.weights;
            *t = t.scale(-1.0);
            Ok(g)
        })
        .unwrap();
        let flagged: Vec<&str> = report.flagged().iter().map(|b| b.name.as_str()).collect();
        assert_eq!(flagged, vec!["decoder.tconv1.weight"]);

        // A zero-learning-rate step leaves parameters bit-identical.
        let mut stepped = net.clone();
        let mut opt = OptimizerState::new(&stepped);
        gradcheck(&net, &x, &y, w, 1).unwrap();
        combined_step(&mut stepped, &x, &y, w, &mut opt, &Adam::with_lr(0.0), 1, 0).unwrap();
        for (((_, a), (_, b)), (_, c)) in net.params().iter().zip(before.params()).zip(stepped.params()) {
            assert_eq!(a.data(), b.data());
            assert_eq!(a.data(), c.data());
        }
    }
}
