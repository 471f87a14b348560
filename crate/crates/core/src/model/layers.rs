//! The three building blocks shared by every network: the convolutional
//! encoder trunk, the classifier head and the reconstruction (decoder) head.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    activation, activation_backward, conv2d, conv2d_backward, conv2d_transpose_backward,
    conv2d_transpose_sized, dense, dense_backward, lit, Activation, ConvParams, DenseParams, Real,
    Result, Tensor,
};

use super::{ArchSpec, IMAGE_SIDE, NUM_CLASSES};

pub(crate) const CONV1_CHANNELS: usize = 16;
pub(crate) const CONV2_CHANNELS: usize = 32;
pub(crate) const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;
/// Spatial side after the two stride-2 convolutions.
pub(crate) const BOTTLENECK_SIDE: usize = IMAGE_SIDE / 4;
pub(crate) const FLAT_FEATURES: usize = CONV2_CHANNELS * BOTTLENECK_SIDE * BOTTLENECK_SIDE;

/// Uniform fan-in/fan-out initialization: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
fn glorot<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| lit(rng.gen_range(-limit..limit))).expect("non-empty layer shape")
}

fn init_conv<T: Real>(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize) -> ConvParams<T> {
    let kk = KERNEL * KERNEL;
    let w = glorot(rng, &[out_ch, in_ch, KERNEL, KERNEL], in_ch * kk, out_ch * kk);
    ConvParams::new(w, Tensor::zeros(&[out_ch]).expect("out_ch > 0"), STRIDE, PAD)
        .expect("consistent conv shapes")
}

fn init_dense<T: Real>(rng: &mut ChaCha8Rng, out_f: usize, in_f: usize) -> DenseParams<T> {
    let w = glorot(rng, &[out_f, in_f], in_f, out_f);
    DenseParams::new(w, Tensor::zeros(&[out_f]).expect("out_f > 0")).expect("consistent dense shapes")
}

/// Named views of a parameter set, in a fixed order.
pub trait ParamSet<T: Real> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T: Real>(
    prefix: &str,
    inner: Vec<(String, &'a Tensor<T>)>,
) -> Vec<(String, &'a Tensor<T>)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn prefixed_mut<'a, T: Real>(
    prefix: &str,
    inner: Vec<(String, &'a mut Tensor<T>)>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

impl<T: Real> ParamSet<T> for ConvParams<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weights), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weights), ("bias".into(), &mut self.bias)]
    }
}

impl<T: Real> ParamSet<T> for DenseParams<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weights), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weights), ("bias".into(), &mut self.bias)]
    }
}

/// Counts images pushed through an encoder. Clones start from the current value.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicU64);

impl PassCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::Relaxed);
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

/// conv(1→16, s2) → relu → conv(16→32, s2) → relu → flatten → dense(→latent) → relu
#[derive(Clone, Debug)]
pub struct Encoder<T = f32> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub fc: DenseParams<T>,
    pub passes: PassCounter,
}

/// Activations kept from an encoder forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache<T = f32> {
    input: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    flat: Tensor<T>,
    pub latent: Tensor<T>,
}

impl<T: Real> Encoder<T> {
    pub(crate) fn init(rng: &mut ChaCha8Rng, spec: ArchSpec) -> Self {
        Self {
            conv1: init_conv(rng, CONV1_CHANNELS, 1),
            conv2: init_conv(rng, CONV2_CHANNELS, CONV1_CHANNELS),
            fc: init_dense(rng, spec.latent_dim, FLAT_FEATURES),
            passes: PassCounter::default(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.fc.out_features()
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(images)?.latent)
    }

    pub fn forward_cached(&self, images: &Tensor<T>) -> Result<EncoderCache<T>> {
        let n = images.shape()[0];
        let a1 = activation(&conv2d(images, &self.conv1)?, Activation::Relu)?;
        let a2 = activation(&conv2d(&a1, &self.conv2)?, Activation::Relu)?;
        let flat = a2.reshape(&[n, FLAT_FEATURES])?;
        let latent = activation(&dense(&flat, &self.fc)?, Activation::Relu)?;
        self.passes.add(n);
        Ok(EncoderCache {
            input: images.clone(),
            a1,
            a2,
            flat,
            latent,
        })
    }

    /// Parameter gradients for upstream gradient `d_latent`, returned in an
    /// encoder-shaped container.
    pub fn backward(&self, cache: &EncoderCache<T>, d_latent: &Tensor<T>) -> Result<Encoder<T>> {
        let dz3 = activation_backward(Activation::Relu, &cache.latent, d_latent)?;
        let fc = dense_backward(&cache.flat, &self.fc, &dz3, true)?;
        let d_a2 = fc.input.expect("requested").into_reshaped(cache.a2.shape())?;
        let dz2 = activation_backward(Activation::Relu, &cache.a2, &d_a2)?;
        let c2 = conv2d_backward(&cache.a1, &self.conv2, &dz2, true)?;
        let dz1 = activation_backward(Activation::Relu, &cache.a1, &c2.input.expect("requested"))?;
        let c1 = conv2d_backward(&cache.input, &self.conv1, &dz1, false)?;
        Ok(Encoder {
            conv1: ConvParams { weights: c1.weights, bias: c1.bias, ..self.conv1.clone() },
            conv2: ConvParams { weights: c2.weights, bias: c2.bias, ..self.conv2.clone() },
            fc: DenseParams { weights: fc.weights, bias: fc.bias },
            passes: PassCounter::default(),
        })
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            fc: self.fc.cast(),
            passes: PassCounter::default(),
        }
    }
}

impl<T: Real> ParamSet<T> for Encoder<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("conv1", self.conv1.params());
        v.extend(prefixed("conv2", self.conv2.params()));
        v.extend(prefixed("fc", self.fc.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed_mut("conv1", self.conv1.params_mut());
        v.extend(prefixed_mut("conv2", self.conv2.params_mut()));
        v.extend(prefixed_mut("fc", self.fc.params_mut()));
        v
    }
}

/// dense(latent → 10) followed by softmax.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T = f32> {
    pub fc: DenseParams<T>,
}

impl<T: Real> ClassifierHead<T> {
    pub(crate) fn init(rng: &mut ChaCha8Rng, spec: ArchSpec) -> Self {
        Self {
            fc: init_dense(rng, NUM_CLASSES, spec.latent_dim),
        }
    }

    pub fn logits(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        dense(latent, &self.fc)
    }

    pub fn forward(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        activation(&self.logits(latent)?, Activation::Softmax)
    }

    /// Returns `(parameter gradients, gradient w.r.t. the latent)` for an
    /// upstream gradient on the pre-softmax logits.
    pub fn backward(&self, latent: &Tensor<T>, d_logits: &Tensor<T>) -> Result<(Self, Tensor<T>)> {
        let g = dense_backward(latent, &self.fc, d_logits, true)?;
        Ok((
            Self {
                fc: DenseParams { weights: g.weights, bias: g.bias },
            },
            g.input.expect("requested"),
        ))
    }

    pub fn cast<U: Real>(&self) -> ClassifierHead<U> {
        ClassifierHead { fc: self.fc.cast() }
    }
}

impl<T: Real> ParamSet<T> for ClassifierHead<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        prefixed("fc", self.fc.params())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        prefixed_mut("fc", self.fc.params_mut())
    }
}

/// dense(latent → 1568) → relu → reshape(32,7,7) → tconv(32→16, 14×14) → relu
/// → tconv(16→1, 28×28) → sigmoid
#[derive(Clone, Debug)]
pub struct DecoderHead<T = f32> {
    pub fc: DenseParams<T>,
    pub tconv1: ConvParams<T>,
    pub tconv2: ConvParams<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T = f32> {
    latent: Tensor<T>,
    h: Tensor<T>,
    grid: Tensor<T>,
    t1: Tensor<T>,
    pub output: Tensor<T>,
}

const MID_SIDE: usize = IMAGE_SIDE / 2;

impl<T: Real> DecoderHead<T> {
    pub(crate) fn init(rng: &mut ChaCha8Rng, spec: ArchSpec) -> Self {
        Self {
            fc: init_dense(rng, FLAT_FEATURES, spec.latent_dim),
            tconv1: init_conv(rng, CONV1_CHANNELS, CONV2_CHANNELS),
            tconv2: init_conv(rng, 1, CONV1_CHANNELS),
        }
    }

    pub fn forward(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(latent)?.output)
    }

    pub fn forward_cached(&self, latent: &Tensor<T>) -> Result<DecoderCache<T>> {
        let n = latent.shape()[0];
        let h = activation(&dense(latent, &self.fc)?, Activation::Relu)?;
        let grid = h.reshape(&[n, CONV2_CHANNELS, BOTTLENECK_SIDE, BOTTLENECK_SIDE])?;
        let t1 = activation(
            &conv2d_transpose_sized(&grid, &self.tconv1, MID_SIDE, MID_SIDE)?,
            Activation::Relu,
        )?;
        let output = activation(
            &conv2d_transpose_sized(&t1, &self.tconv2, IMAGE_SIDE, IMAGE_SIDE)?,
            Activation::Sigmoid,
        )?;
        Ok(DecoderCache {
            latent: latent.clone(),
            h,
            grid,
            t1,
            output,
        })
    }

    /// Returns `(parameter gradients, gradient w.r.t. the latent)` for an
    /// upstream gradient on the reconstruction.
    pub fn backward(&self, cache: &DecoderCache<T>, d_output: &Tensor<T>) -> Result<(Self, Tensor<T>)> {
        let dz4 = activation_backward(Activation::Sigmoid, &cache.output, d_output)?;
        let g2 = conv2d_transpose_backward(&cache.t1, &self.tconv2, &dz4, true)?;
        let dz3 = activation_backward(Activation::Relu, &cache.t1, &g2.input.expect("requested"))?;
        let g1 = conv2d_transpose_backward(&cache.grid, &self.tconv1, &dz3, true)?;
        let d_h = g1.input.expect("requested").into_reshaped(cache.h.shape())?;
        let dz = activation_backward(Activation::Relu, &cache.h, &d_h)?;
        let gf = dense_backward(&cache.latent, &self.fc, &dz, true)?;
        Ok((
            Self {
                fc: DenseParams { weights: gf.weights, bias: gf.bias },
                tconv1: ConvParams { weights: g1.weights, bias: g1.bias, ..self.tconv1.clone() },
                tconv2: ConvParams { weights: g2.weights, bias: g2.bias, ..self.tconv2.clone() },
            },
            gf.input.expect("requested"),
        ))
    }

    pub fn cast<U: Real>(&self) -> DecoderHead<U> {
        DecoderHead {
            fc: self.fc.cast(),
            tconv1: self.tconv1.cast(),
            tconv2: self.tconv2.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for DecoderHead<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("fc", self.fc.params());
        v.extend(prefixed("tconv1", self.tconv1.params()));
        v.extend(prefixed("tconv2", self.tconv2.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed_mut("fc", self.fc.params_mut());
        v.extend(prefixed_mut("tconv1", self.tconv1.params_mut()));
        v.extend(prefixed_mut("tconv2", self.tconv2.params_mut()));
        v
    }
}
