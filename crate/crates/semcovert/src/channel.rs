//! Power normalization and AWGN transmission of latent signals.
//!
//! Latents are flattened and scaled to unit average power before hitting the
//! channel; the scalar scale travels as per-chunk side information and is
//! assumed noiseless (standard deep-JSCC convention). Noise has variance
//! 10^(-snr_db/10) against the unit signal power.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use crate::codec::LatentSample;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, Ix};

#[derive(Debug, Clone)]
pub struct ChannelSignal {
    /// Flattened unit-power (or received) samples.
    pub values: ArrayD<f64>,
}

impl ChannelSignal {
    pub fn power(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelConfig {
    /// Signal-to-noise ratio in dB; `f64::INFINITY` means a noiseless link.
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn noise_sigma(&self) -> f64 {
        if self.snr_db.is_infinite() && self.snr_db > 0.0 {
            0.0
        } else {
            10f64.powf(-self.snr_db / 20.0)
        }
    }
}

/// Flatten and scale a latent to unit average power. Returns the signal and
/// the scale needed to invert the normalization.
pub fn power_normalize(latent: &LatentSample) -> Result<(ChannelSignal, f64)> {
    let n = latent.values.len();
    let scale = (latent.values.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Channel(format!(
            "degenerate latent: power scale {scale} (all-zero or non-finite input)"
        )));
    }
    let values = ArrayD::from_shape_vec(
        IxDyn(&[n]),
        latent.values.iter().map(|v| v / scale).collect(),
    )
    .unwrap();
    Ok((ChannelSignal { values }, scale))
}

/// y = x + n with n ~ N(0, sigma^2 I). Noiseless (+inf SNR) returns the
/// input bitwise. Deterministic for a fixed config.
pub fn transmit(signal: &ChannelSignal, config: &ChannelConfig) -> ChannelSignal {
    let sigma = config.noise_sigma();
    if sigma == 0.0 {
        return signal.clone();
    }
    let mut rng = stream(config.seed, 0, Stream::ChannelNoise);
    let values = signal.values.mapv(|v| {
        let eps: f64 = rng.sample(StandardNormal);
        v + sigma * eps
    });
    ChannelSignal { values }
}

/// Invert normalization: reshape the flat signal and multiply by `scale`.
pub fn denormalize(signal: &ChannelSignal, scale: f64, shape: &[usize]) -> Result<LatentSample> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Channel(format!("invalid scale {scale}")));
    }
    let want: usize = shape.iter().product();
    if signal.values.len() != want {
        return Err(Error::Shape(format!(
            "signal has {} elements, shape {shape:?} wants {want}",
            signal.values.len()
        )));
    }
    let values = ArrayD::from_shape_vec(
        IxDyn(shape),
        signal.values.iter().map(|v| v * scale).collect(),
    )
    .unwrap();
    Ok(LatentSample { values })
}

/// sigma * N(0, I) noise tensor for on-tape transmission.
pub fn awgn_noise(shape: &[usize], snr_db: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let sigma = ChannelConfig { snr_db, seed: 0 }.noise_sigma();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let eps: f64 = rng.sample(StandardNormal);
        sigma * eps
    })
}

/// Differentiable normalize: returns `(signal, scale)` nodes where
/// `signal = z / sqrt(mean(z^2))`. The latent keeps its shape on tape; only
/// the scaling matters for gradients.
pub fn normalize_graph(g: &mut Graph, z: Ix) -> (Ix, Ix) {
    let sq = g.square(z);
    let ms = g.mean(sq);
    let scale = g.sqrt(ms);
    let inv = g.recip(scale);
    (g.mul(z, inv), scale)
}

/// Differentiable channel: add pre-drawn noise, then undo the scale.
pub fn transmit_graph(g: &mut Graph, signal: Ix, noise: ArrayD<f64>, scale: Ix) -> Ix {
    let n = g.constant(noise);
    let y = g.add(signal, n);
    g.mul(y, scale)
}
