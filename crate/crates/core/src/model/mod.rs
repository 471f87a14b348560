//! Network shapes built from one encoder trunk and two heads.
//!
//! * [`SymbioticNet`]: one encoder feeding both the classifier head and the
//!   decoder head. A single encoder pass yields class probabilities and a
//!   reconstruction.
//! * [`IndependentPair`]: a stand-alone classifier and a stand-alone
//!   autoencoder, each with its own encoder copy.
//!
//! Layer shapes (latent width `L`, default 64):
//!
//! ```text
//! encoder:    conv 1→16 3×3/2 p1 relu → conv 16→32 3×3/2 p1 relu → flatten 1568 → dense 1568→L relu
//! classifier: dense L→10 → softmax
//! decoder:    dense L→1568 relu → reshape 32×7×7 → tconv 32→16 3×3/2 (14×14) relu
//!             → tconv 16→1 3×3/2 (28×28) sigmoid
//! ```

pub mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{ClassifierHead, DecoderCache, DecoderHead, Encoder, EncoderCache, ParamSet, PassCounter};

use crate::tensor::{Real, Result, Tensor, TensorError};
use layers::{prefixed, prefixed_mut, CONV1_CHANNELS, CONV2_CHANNELS, FLAT_FEATURES, KERNEL};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;
pub const DEFAULT_LATENT_DIM: usize = 64;

const ENCODER_STREAM: u64 = 0;
const CLASSIFIER_STREAM: u64 = 1;
const DECODER_STREAM: u64 = 2;
const STANDALONE_ENCODER_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub latent_dim: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
        }
    }
}

impl ArchSpec {
    /// Closed-form parameter counts `(encoder, classifier head, decoder head)`.
    pub fn param_counts(&self) -> (usize, usize, usize) {
        let l = self.latent_dim;
        let kk = KERNEL * KERNEL;
        let encoder = (CONV1_CHANNELS * kk + CONV1_CHANNELS)
            + (CONV2_CHANNELS * CONV1_CHANNELS * kk + CONV2_CHANNELS)
            + (FLAT_FEATURES * l + l);
        let classifier = NUM_CLASSES * l + NUM_CLASSES;
        let decoder = (l * FLAT_FEATURES + FLAT_FEATURES)
            + (CONV1_CHANNELS * CONV2_CHANNELS * kk + CONV1_CHANNELS)
            + (CONV1_CHANNELS * kk + 1);
        (encoder, classifier, decoder)
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rejects anything that is not an `N × 1 × 28 × 28` batch.
pub fn check_images<T: Real>(images: &Tensor<T>) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "network input",
            expected: 4,
            actual: s.len(),
        });
    }
    for (axis, expected, actual) in [("channels", 1, s[1]), ("height", IMAGE_SIDE, s[2]), ("width", IMAGE_SIDE, s[3])] {
        if expected != actual {
            return Err(TensorError::ShapeMismatch {
                op: "network input",
                axis,
                expected,
                actual,
            });
        }
    }
    Ok(())
}

/// Shared encoder with a classifier head and a decoder head.
#[derive(Clone, Debug)]
pub struct SymbioticNet<T = f32> {
    pub encoder: Encoder<T>,
    pub classifier: ClassifierHead<T>,
    pub decoder: DecoderHead<T>,
}

/// Everything one symbiotic forward pass produces.
#[derive(Clone, Debug)]
pub struct SymbioticOutput<T = f32> {
    pub latent: Tensor<T>,
    pub class_probs: Tensor<T>,
    pub reconstruction: Tensor<T>,
}

impl SymbioticNet<f32> {
    pub fn build(seed: u64) -> Self {
        Self::build_with(ArchSpec::default(), seed)
    }
}

impl<T: Real> SymbioticNet<T> {
    pub fn build_with(spec: ArchSpec, seed: u64) -> Self {
        Self {
            encoder: Encoder::init(&mut stream(seed, ENCODER_STREAM), spec),
            classifier: ClassifierHead::init(&mut stream(seed, CLASSIFIER_STREAM), spec),
            decoder: DecoderHead::init(&mut stream(seed, DECODER_STREAM), spec),
        }
    }

    pub fn spec(&self) -> ArchSpec {
        ArchSpec {
            latent_dim: self.encoder.latent_dim(),
        }
    }

    /// One encoder pass feeding both heads: `(class_probs, reconstruction)`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let out = self.forward_with_latent(images)?;
        Ok((out.class_probs, out.reconstruction))
    }

    pub fn forward_with_latent(&self, images: &Tensor<T>) -> Result<SymbioticOutput<T>> {
        check_images(images)?;
        let latent = self.encoder.forward(images)?;
        let class_probs = self.classifier.forward(&latent)?;
        let reconstruction = self.decoder.forward(&latent)?;
        Ok(SymbioticOutput {
            latent,
            class_probs,
            reconstruction,
        })
    }

    pub fn cast<U: Real>(&self) -> SymbioticNet<U> {
        SymbioticNet {
            encoder: self.encoder.cast(),
            classifier: self.classifier.cast(),
            decoder: self.decoder.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for SymbioticNet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("encoder", self.encoder.params());
        v.extend(prefixed("classifier", self.classifier.params()));
        v.extend(prefixed("decoder", self.decoder.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed_mut("encoder", self.encoder.params_mut());
        v.extend(prefixed_mut("classifier", self.classifier.params_mut()));
        v.extend(prefixed_mut("decoder", self.decoder.params_mut()));
        v
    }
}

/// Encoder plus classifier head, nothing shared with any other network.
#[derive(Clone, Debug)]
pub struct ClassifierNet<T = f32> {
    pub encoder: Encoder<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Real> ClassifierNet<T> {
    /// Initialized identically to the encoder and classifier head of
    /// `SymbioticNet::build_with(spec, seed)`.
    pub fn build_with(spec: ArchSpec, seed: u64) -> Self {
        Self {
            encoder: Encoder::init(&mut stream(seed, ENCODER_STREAM), spec),
            head: ClassifierHead::init(&mut stream(seed, CLASSIFIER_STREAM), spec),
        }
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        check_images(images)?;
        self.head.forward(&self.encoder.forward(images)?)
    }

    pub fn cast<U: Real>(&self) -> ClassifierNet<U> {
        ClassifierNet {
            encoder: self.encoder.cast(),
            head: self.head.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for ClassifierNet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("encoder", self.encoder.params());
        v.extend(prefixed("classifier", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed_mut("encoder", self.encoder.params_mut());
        v.extend(prefixed_mut("classifier", self.head.params_mut()));
        v
    }
}

/// Encoder plus decoder head.
#[derive(Clone, Debug)]
pub struct AutoencoderNet<T = f32> {
    pub encoder: Encoder<T>,
    pub decoder: DecoderHead<T>,
}

impl<T: Real> AutoencoderNet<T> {
    pub fn build_with(spec: ArchSpec, seed: u64) -> Self {
        Self {
            encoder: Encoder::init(&mut stream(seed, STANDALONE_ENCODER_STREAM), spec),
            decoder: DecoderHead::init(&mut stream(seed, DECODER_STREAM), spec),
        }
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        check_images(images)?;
        self.decoder.forward(&self.encoder.forward(images)?)
    }

    pub fn cast<U: Real>(&self) -> AutoencoderNet<U> {
        AutoencoderNet {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for AutoencoderNet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("encoder", self.encoder.params());
        v.extend(prefixed("decoder", self.decoder.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed_mut("encoder", self.encoder.params_mut());
        v.extend(prefixed_mut("decoder", self.decoder.params_mut()));
        v
    }
}

/// The control system: a classifier and an autoencoder trained separately.
#[derive(Clone, Debug)]
pub struct IndependentPair<T = f32> {
    pub classifier: ClassifierNet<T>,
    pub autoencoder: AutoencoderNet<T>,
}

impl IndependentPair<f32> {
    pub fn build(seed: u64) -> Self {
        Self::build_with(ArchSpec::default(), seed)
    }
}

impl<T: Real> IndependentPair<T> {
    pub fn build_with(spec: ArchSpec, seed: u64) -> Self {
        Self {
            classifier: ClassifierNet::build_with(spec, seed),
            autoencoder: AutoencoderNet::build_with(spec, seed),
        }
    }

    pub fn spec(&self) -> ArchSpec {
        ArchSpec {
            latent_dim: self.classifier.encoder.latent_dim(),
        }
    }
}

impl<T: Real> ParamSet<T> for IndependentPair<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("classifier", self.classifier.params());
        v.extend(prefixed("autoencoder", self.autoencoder.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed_mut("classifier", self.classifier.params_mut());
        v.extend(prefixed_mut("autoencoder", self.autoencoder.params_mut()));
        v
    }
}

/// A classifier guarded by a reconstruction watchdog.
pub trait GuardedClassifier {
    /// Class probabilities only.
    fn classify(&self, images: &Tensor) -> Result<Tensor>;

    /// Class probabilities and reconstructions for the same images.
    fn classify_and_reconstruct(&self, images: &Tensor) -> Result<(Tensor, Tensor)>;

    /// Total images pushed through any encoder owned by this system.
    fn encoder_passes(&self) -> u64;

    fn reset_pass_counters(&self);
}

impl GuardedClassifier for SymbioticNet {
    fn classify(&self, images: &Tensor) -> Result<Tensor> {
        check_images(images)?;
        self.classifier.forward(&self.encoder.forward(images)?)
    }

    fn classify_and_reconstruct(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward(images)
    }

    fn encoder_passes(&self) -> u64 {
        self.encoder.passes.get()
    }

    fn reset_pass_counters(&self) {
        self.encoder.passes.reset();
    }
}

impl GuardedClassifier for IndependentPair {
    fn classify(&self, images: &Tensor) -> Result<Tensor> {
        self.classifier.forward(images)
    }

    fn classify_and_reconstruct(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.classifier.forward(images)?, self.autoencoder.forward(images)?))
    }

    fn encoder_passes(&self) -> u64 {
        self.classifier.encoder.passes.get() + self.autoencoder.encoder.passes.get()
    }

    fn reset_pass_counters(&self) {
        self.classifier.encoder.passes.reset();
        self.autoencoder.encoder.passes.reset();
    }
}

/// Either trained system, as stored in a checkpoint.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Network {
    Symbiotic(SymbioticNet),
    Independent(IndependentPair),
}

impl Network {
    pub fn kind(&self) -> ArchKind {
        match self {
            Network::Symbiotic(_) => ArchKind::Symbiotic,
            Network::Independent(_) => ArchKind::Independent,
        }
    }

    pub fn spec(&self) -> ArchSpec {
        match self {
            Network::Symbiotic(n) => n.spec(),
            Network::Independent(p) => p.spec(),
        }
    }

    pub fn build(kind: ArchKind, spec: ArchSpec, seed: u64) -> Self {
        match kind {
            ArchKind::Symbiotic => Network::Symbiotic(SymbioticNet::build_with(spec, seed)),
            ArchKind::Independent => Network::Independent(IndependentPair::build_with(spec, seed)),
        }
    }

    pub fn as_guarded(&self) -> &dyn GuardedClassifier {
        match self {
            Network::Symbiotic(n) => n,
            Network::Independent(p) => p,
        }
    }
}

impl ParamSet<f32> for Network {
    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Network::Symbiotic(n) => n.params(),
            Network::Independent(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Network::Symbiotic(n) => n.params_mut(),
            Network::Independent(p) => p.params_mut(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Symbiotic,
    Independent,
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchKind::Symbiotic => "symbiotic",
            ArchKind::Independent => "independent",
        })
    }
}

impl std::str::FromStr for ArchKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "symbiotic" => Ok(ArchKind::Symbiotic),
            "independent" => Ok(ArchKind::Independent),
            other => Err(format!("unknown architecture {other:?} (expected symbiotic or independent)")),
        }
    }
}
