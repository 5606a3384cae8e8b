//! Variational video codec.
//!
//! The encoder maps a `(3, T, H, W)` chunk to a latent Gaussian over
//! `(16, (T-1)/4+1, H/8, W/8)`: three spatial stride-2 stages interleaved
//! with two causal temporal stride-2 stages, widths 3→32→64→96, and a head
//! emitting mean and log-variance. The decoder mirrors the encoder with
//! nearest-neighbour upsampling and trims the temporal axis back to T.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use crate::data::VideoChunk;
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, TemporalConvLayer};
use crate::rng::{stream, Stream};
use crate::tensor::params::{Bound, ParamStore};
use crate::tensor::{Graph, Ix};

pub const LATENT_CHANNELS: usize = 16;
/// Log-variance clamp. The floor matters: reconstruction pressure shrinks
/// the posterior variance without bound, and every term weighted by the
/// inverse fused variance turns a deep floor into a gradient amplifier
/// (exp(12) is already 1.6e5). Keep the range tight.
pub const LOG_VAR_MIN: f64 = -12.0;
pub const LOG_VAR_MAX: f64 = 6.0;
/// Initial bias for the predicted log-variance channels.
pub const LOG_VAR_INIT: f64 = -6.0;

/// Latent temporal length for a chunk of `t` frames.
pub fn t_prime(t: usize) -> usize {
    (t - 1) / 4 + 1
}

/// `(C_z, T', H', W')` for a `(3, t, h, w)` chunk.
pub fn latent_shape(t: usize, h: usize, w: usize) -> [usize; 4] {
    [LATENT_CHANNELS, t_prime(t), h / 8, w / 8]
}

#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub mean: ArrayD<f64>,
    pub log_var: ArrayD<f64>,
}

#[derive(Debug, Clone)]
pub struct LatentSample {
    pub values: ArrayD<f64>,
}

impl LatentDistribution {
    /// Draw `mean + exp(log_var/2) * eps` with standard-normal `eps`.
    pub fn reparameterize(&self, rng: &mut ChaCha8Rng) -> LatentSample {
        let mut values = self.mean.clone();
        values.zip_mut_with(&self.log_var, |m, &lv| {
            let eps: f64 = rng.sample(StandardNormal);
            *m += (0.5 * lv).exp() * eps;
        });
        LatentSample { values }
    }
}

struct Encoder {
    s1: Conv2dLayer,
    t1: TemporalConvLayer,
    s2: Conv2dLayer,
    t2: TemporalConvLayer,
    s3: Conv2dLayer,
    head: Conv2dLayer,
}

struct Decoder {
    input: Conv2dLayer,
    s1: Conv2dLayer,
    t1: TemporalConvLayer,
    s2: Conv2dLayer,
    t2: TemporalConvLayer,
    s3: Conv2dLayer,
    out: Conv2dLayer,
}

pub struct Codec {
    pub params: ParamStore,
    enc: Encoder,
    dec: Decoder,
}

impl Codec {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let rng = &mut stream(seed, 0, Stream::ParamInit);
        let enc = Encoder {
            s1: Conv2dLayer::new(&mut params, rng, "enc.s1", 3, 32, 3, 2, 1),
            t1: TemporalConvLayer::new(&mut params, rng, "enc.t1", 32, 32, 3, 2),
            s2: Conv2dLayer::new(&mut params, rng, "enc.s2", 32, 64, 3, 2, 1),
            t2: TemporalConvLayer::new(&mut params, rng, "enc.t2", 64, 64, 3, 2),
            s3: Conv2dLayer::new(&mut params, rng, "enc.s3", 64, 96, 3, 2, 1),
            head: Conv2dLayer::new(&mut params, rng, "enc.head", 96, 2 * LATENT_CHANNELS, 3, 1, 1),
        };
        // Bias the log-variance half of the head low so early training is not
        // swamped by unit-scale reparameterization noise.
        {
            let id = params.id("enc.head.b").expect("encoder head registered above");
            let bias = params.value_mut(id);
            for c in LATENT_CHANNELS..2 * LATENT_CHANNELS {
                bias[c] = LOG_VAR_INIT;
            }
        }
        let dec = Decoder {
            input: Conv2dLayer::new(&mut params, rng, "dec.in", LATENT_CHANNELS, 96, 3, 1, 1),
            s1: Conv2dLayer::new(&mut params, rng, "dec.s1", 96, 64, 3, 1, 1),
            t1: TemporalConvLayer::new(&mut params, rng, "dec.t1", 64, 64, 3, 1),
            s2: Conv2dLayer::new(&mut params, rng, "dec.s2", 64, 32, 3, 1, 1),
            t2: TemporalConvLayer::new(&mut params, rng, "dec.t2", 32, 32, 3, 1),
            s3: Conv2dLayer::new(&mut params, rng, "dec.s3", 32, 32, 3, 1, 1),
            out: Conv2dLayer::new(&mut params, rng, "dec.out", 32, 3, 3, 1, 1),
        };
        Self { params, enc, dec }
    }

    fn validate_chunk_shape(shape: &[usize]) -> Result<()> {
        if shape[2] % 8 != 0 || shape[3] % 8 != 0 {
            return Err(Error::Shape(format!(
                "chunk spatial dims must be divisible by 8, got {}x{}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Graph-level encoder: `(3,T,H,W) -> (mean, log_var)`, each
    /// `(16, T', H/8, W/8)` with log_var clamped.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Ix) -> (Ix, Ix) {
        let e = &self.enc;
        let h1 = e.s1.forward(g, p, x);
        let h1 = g.silu(h1);
        let h2 = e.t1.forward(g, p, h1);
        let h2 = g.silu(h2);
        let h3 = e.s2.forward(g, p, h2);
        let h3 = g.silu(h3);
        let h4 = e.t2.forward(g, p, h3);
        let h4 = g.silu(h4);
        let h5 = e.s3.forward(g, p, h4);
        let h5 = g.silu(h5);
        let head = e.head.forward(g, p, h5);
        let mean = g.narrow(head, 0, 0, LATENT_CHANNELS);
        let log_var_raw = g.narrow(head, 0, LATENT_CHANNELS, LATENT_CHANNELS);
        let log_var = g.clamp(log_var_raw, LOG_VAR_MIN, LOG_VAR_MAX);
        (mean, log_var)
    }

    /// Graph-level reparameterization with externally drawn noise.
    pub fn reparameterize_graph(&self, g: &mut Graph, mean: Ix, log_var: Ix, eps: Ix) -> Ix {
        let half = g.scale(log_var, 0.5);
        let sigma = g.exp(half);
        let noise = g.mul(sigma, eps);
        g.add(mean, noise)
    }

    /// Graph-level decoder: latent `(16,T',H',W') -> (3,T,8H',8W')`.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Ix, t: usize) -> Ix {
        let t1_len = (t - 1) / 2 + 1;
        let d = &self.dec;
        let h = d.input.forward(g, p, z);
        let h = g.silu(h);
        let h = g.upsample2_spatial(h);
        let h = d.s1.forward(g, p, h);
        let h = g.silu(h);
        let h = g.upsample2_temporal(h);
        let h = g.narrow(h, 1, 0, t1_len);
        let h = d.t1.forward(g, p, h);
        let h = g.silu(h);
        let h = g.upsample2_spatial(h);
        let h = d.s2.forward(g, p, h);
        let h = g.silu(h);
        let h = g.upsample2_temporal(h);
        let h = g.narrow(h, 1, 0, t);
        let h = d.t2.forward(g, p, h);
        let h = g.silu(h);
        let h = g.upsample2_spatial(h);
        let h = d.s3.forward(g, p, h);
        let h = g.silu(h);
        let h = d.out.forward(g, p, h);
        g.sigmoid(h)
    }

    /// Encode a chunk with frozen weights.
    pub fn encode(&self, chunk: &VideoChunk) -> Result<LatentDistribution> {
        Self::validate_chunk_shape(chunk.frames.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(chunk.frames.clone());
        let (mean, log_var) = self.encode_graph(&mut g, &p, x);
        Ok(LatentDistribution {
            mean: g.value(mean).clone(),
            log_var: g.value(log_var).clone(),
        })
    }

    /// Decode a latent sample into a `t`-frame chunk with frozen weights.
    pub fn decode(&self, sample: &LatentSample, t: usize) -> Result<VideoChunk> {
        let s = sample.values.shape();
        if s.len() != 4 || s[0] != LATENT_CHANNELS {
            return Err(Error::Shape(format!("latent must be (16,T',H',W'), got {s:?}")));
        }
        if t % 4 != 1 {
            return Err(Error::Shape(format!("target frame count must be 4k+1, got {t}")));
        }
        if s[1] != t_prime(t) {
            return Err(Error::Shape(format!(
                "latent T'={} inconsistent with T={t} (expected {})",
                s[1],
                t_prime(t)
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let z = g.constant(sample.values.clone());
        let y = self.decode_graph(&mut g, &p, z, t);
        VideoChunk::new(g.value(y).clone())
    }
}

/// Standard-normal noise tensor for reparameterization, drawn outside the
/// graph so tapes stay deterministic.
pub fn noise_like(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample(StandardNormal))
}
