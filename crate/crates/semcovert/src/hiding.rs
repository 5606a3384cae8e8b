//! Semantic hiding model and the mirrored secret extractor.
//!
//! The hider concatenates cover and secret latents along channels (32 ch),
//! lifts to width 96, and runs a depth-4 stack; each stage sums three
//! parallel 2D conv branches (kernels 3/5/7, each RMS-normalized), applies
//! SiLU, then 8-head attention along the temporal axis, with a residual
//! around the stage. A zero-initialized 1x1 projection writes a 16-channel
//! perturbation on top of the cover latent, so the fused latent starts out
//! equal to the cover and the hider learns what to inject rather than how
//! to rebuild the cover from scratch. Two more zero-initialized 1x1 heads
//! off the same features parameterize the fused Gaussian for the embedding
//! constraint as offsets from the cover input. The extractor mirrors the
//! hider with a 16-channel stem and the same residual output, so it begins
//! as the identity on received latents.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    LatentDistribution, LatentSample, LATENT_CHANNELS, LOG_VAR_INIT, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, RmsNorm, TemporalAttention};
use crate::rng::{stream, Stream};
use crate::tensor::params::{Bound, ParamStore};
use crate::tensor::{Graph, Ix};

#[derive(Debug, Clone)]
pub struct FusedLatent {
    pub values: ArrayD<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HidingNetConfig {
    pub latent_dim: usize,
    pub depth: usize,
    pub spatial_kernels: Vec<usize>,
    pub attention_heads: usize,
}

impl Default for HidingNetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 96,
            depth: 4,
            spatial_kernels: vec![3, 5, 7],
            attention_heads: 8,
        }
    }
}

impl HidingNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_kernels.is_empty() || self.spatial_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "spatial kernels must be odd, got {:?}",
                self.spatial_kernels
            )));
        }
        if self.latent_dim == 0 || self.latent_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "latent dim {} not divisible by {} attention heads",
                self.latent_dim, self.attention_heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("stack depth must be at least 1".into()));
        }
        Ok(())
    }
}

struct Stage {
    convs: Vec<Conv2dLayer>,
    norms: Vec<RmsNorm>,
    attn: TemporalAttention,
}

impl Stage {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &HidingNetConfig,
    ) -> Self {
        let d = cfg.latent_dim;
        let convs = cfg
            .spatial_kernels
            .iter()
            .map(|&k| {
                Conv2dLayer::new(store, rng, &format!("{prefix}.conv{k}"), d, d, k, 1, k / 2)
            })
            .collect();
        let norms = cfg
            .spatial_kernels
            .iter()
            .map(|&k| RmsNorm::new(store, &format!("{prefix}.norm{k}"), d))
            .collect();
        let attn = TemporalAttention::new(store, rng, &format!("{prefix}.attn"), d, cfg.attention_heads);
        Self { convs, norms, attn }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Ix) -> Ix {
        let mut summed = None;
        for (conv, norm) in self.convs.iter().zip(self.norms.iter()) {
            let c = conv.forward(g, p, x);
            let n = norm.forward(g, p, c);
            summed = Some(match summed {
                None => n,
                Some(acc) => g.add(acc, n),
            });
        }
        let act = g.silu(summed.unwrap());
        let att = self.attn.forward(g, p, act);
        g.add(x, att)
    }
}

struct Stack {
    stem: Conv2dLayer,
    stages: Vec<Stage>,
}

impl Stack {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        cfg: &HidingNetConfig,
    ) -> Self {
        let stem = Conv2dLayer::new(
            store,
            rng,
            &format!("{prefix}.stem"),
            in_channels,
            cfg.latent_dim,
            3,
            1,
            1,
        );
        let stages = (0..cfg.depth)
            .map(|i| Stage::new(store, rng, &format!("{prefix}.stage{i}"), cfg))
            .collect();
        Self { stem, stages }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Ix) -> Ix {
        let mut h = self.stem.forward(g, p, x);
        h = g.silu(h);
        for stage in &self.stages {
            h = stage.forward(g, p, h);
        }
        h
    }
}

pub struct HiderOut {
    pub fused: Ix,
    pub fused_mean: Ix,
    pub fused_log_var: Ix,
}

pub struct HidingModel {
    pub params: ParamStore,
    pub cfg: HidingNetConfig,
    stack: Stack,
    proj: Conv2dLayer,
    mean_head: Conv2dLayer,
    log_var_head: Conv2dLayer,
}

impl HidingModel {
    pub fn new(seed: u64, cfg: HidingNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let rng = &mut stream(seed, 1, Stream::ParamInit);
        let stack = Stack::new(&mut params, rng, "hider", 2 * LATENT_CHANNELS, &cfg);
        let proj =
            Conv2dLayer::new_zero(&mut params, "hider.proj", cfg.latent_dim, LATENT_CHANNELS, 1, 1, 0);
        let mean_head =
            Conv2dLayer::new_zero(&mut params, "hider.fused_mean", cfg.latent_dim, LATENT_CHANNELS, 1, 1, 0);
        let log_var_head = Conv2dLayer::new_zero(
            &mut params,
            "hider.fused_log_var",
            cfg.latent_dim,
            LATENT_CHANNELS,
            1,
            1,
            0,
        );
        // Start the fused log-variance at the encoder's init so the fused
        // and cover distributions agree before any hiding is learned.
        {
            let id = params.id("hider.fused_log_var.b").expect("head registered above");
            params.value_mut(id).fill(LOG_VAR_INIT);
        }
        Ok(Self { params, cfg, stack, proj, mean_head, log_var_head })
    }

    /// Graph-level fusion of two latent nodes. The fused latent and fused
    /// mean are residual offsets from the cover input.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, cover: Ix, secret: Ix) -> HiderOut {
        let x = g.concat(&[cover, secret], 0);
        let feats = self.stack.forward(g, p, x);
        let delta = self.proj.forward(g, p, feats);
        let fused = g.add(cover, delta);
        let mean_delta = self.mean_head.forward(g, p, feats);
        let fused_mean = g.add(cover, mean_delta);
        let lv_raw = self.log_var_head.forward(g, p, feats);
        let fused_log_var = g.clamp(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX);
        HiderOut { fused, fused_mean, fused_log_var }
    }

    fn validate_pair(cover: &ArrayD<f64>, secret: &ArrayD<f64>) -> Result<()> {
        if cover.shape() != secret.shape() {
            return Err(Error::Shape(format!(
                "cover {:?} and secret {:?} latent shapes differ",
                cover.shape(),
                secret.shape()
            )));
        }
        if cover.ndim() != 4 || cover.shape()[0] != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "latent must be (16,T',H',W'), got {:?}",
                cover.shape()
            )));
        }
        Ok(())
    }

    /// Fuse a secret latent into a cover latent (frozen weights).
    pub fn hide(&self, cover: &LatentSample, secret: &LatentSample) -> Result<FusedLatent> {
        Self::validate_pair(&cover.values, &secret.values)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let c = g.constant(cover.values.clone());
        let s = g.constant(secret.values.clone());
        let out = self.forward_graph(&mut g, &p, c, s);
        Ok(FusedLatent { values: g.value(out.fused).clone() })
    }

    /// Fuse against a cover distribution (its mean is the network input) and
    /// also return the fused Gaussian for the embedding constraint.
    pub fn hide_fused_distribution(
        &self,
        cover_dist: &LatentDistribution,
        secret: &LatentSample,
    ) -> Result<(FusedLatent, LatentDistribution)> {
        Self::validate_pair(&cover_dist.mean, &secret.values)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let c = g.constant(cover_dist.mean.clone());
        let s = g.constant(secret.values.clone());
        let out = self.forward_graph(&mut g, &p, c, s);
        Ok((
            FusedLatent { values: g.value(out.fused).clone() },
            LatentDistribution {
                mean: g.value(out.fused_mean).clone(),
                log_var: g.value(out.fused_log_var).clone(),
            },
        ))
    }
}

pub struct SecretExtractor {
    pub params: ParamStore,
    pub cfg: HidingNetConfig,
    stack: Stack,
    proj: Conv2dLayer,
}

impl SecretExtractor {
    pub fn new(seed: u64, cfg: HidingNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let rng = &mut stream(seed, 2, Stream::ParamInit);
        let stack = Stack::new(&mut params, rng, "extractor", LATENT_CHANNELS, &cfg);
        let proj = Conv2dLayer::new_zero(
            &mut params,
            "extractor.proj",
            cfg.latent_dim,
            LATENT_CHANNELS,
            1,
            1,
            0,
        );
        Ok(Self { params, cfg, stack, proj })
    }

    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, received: Ix) -> Ix {
        let feats = self.stack.forward(g, p, received);
        let delta = self.proj.forward(g, p, feats);
        g.add(received, delta)
    }

    /// Estimate the secret latent carried by a received latent (frozen
    /// weights). On no-secret latents a trained extractor emits a latent that
    /// decodes toward the all-zero placeholder video.
    pub fn extract(&self, received: &LatentSample) -> Result<LatentSample> {
        let s = received.values.shape();
        if s.len() != 4 || s[0] != LATENT_CHANNELS {
            return Err(Error::Shape(format!("latent must be (16,T',H',W'), got {s:?}")));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let r = g.constant(received.values.clone());
        let out = self.forward_graph(&mut g, &p, r);
        Ok(LatentSample { values: g.value(out).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg() -> HidingNetConfig {
        HidingNetConfig {
            latent_dim: 24,
            depth: 2,
            spatial_kernels: vec![3, 5],
            attention_heads: 4,
        }
    }

    fn rand_latent(shape: &[usize], seed: u64) -> LatentSample {
        let mut rng = stream(seed, 0, Stream::DataGen);
        LatentSample {
            values: ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn fused_shape_matches_cover() {
        let hider = HidingModel::new(0, HidingNetConfig::default()).unwrap();
        let cover = rand_latent(&[16, 2, 8, 8], 1);
        let secret = rand_latent(&[16, 2, 8, 8], 2);
        let fused = hider.hide(&cover, &secret).unwrap();
        assert_eq!(fused.values.shape(), cover.values.shape());
        assert!(fused.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hide_rejects_shape_mismatch() {
        let hider = HidingModel::new(0, small_cfg()).unwrap();
        let cover = rand_latent(&[16, 2, 8, 8], 1);
        let secret = rand_latent(&[16, 3, 8, 8], 2);
        assert!(matches!(hider.hide(&cover, &secret), Err(Error::Shape(_))));
    }

    #[test]
    fn hide_is_deterministic() {
        let hider = HidingModel::new(3, small_cfg()).unwrap();
        let cover = rand_latent(&[16, 2, 4, 4], 4);
        let secret = rand_latent(&[16, 2, 4, 4], 5);
        let a = hider.hide(&cover, &secret).unwrap();
        let b = hider.hide(&cover, &secret).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn untrained_hider_passes_cover_through() {
        let hider = HidingModel::new(3, small_cfg()).unwrap();
        let cover = rand_latent(&[16, 2, 4, 4], 4);
        let secret = rand_latent(&[16, 2, 4, 4], 5);
        let fused = hider.hide(&cover, &secret).unwrap();
        assert_eq!(fused.values, cover.values);

        let dist = LatentDistribution {
            mean: cover.values.clone(),
            log_var: ArrayD::from_elem(IxDyn(&[16, 2, 4, 4]), LOG_VAR_INIT),
        };
        let (_, fused_dist) = hider.hide_fused_distribution(&dist, &secret).unwrap();
        assert_eq!(fused_dist.mean, cover.values);
        assert!(fused_dist.log_var.iter().all(|&v| v == LOG_VAR_INIT));
    }

    #[test]
    fn untrained_extractor_is_identity() {
        let ext = SecretExtractor::new(7, small_cfg()).unwrap();
        let received = rand_latent(&[16, 2, 4, 4], 8);
        let out = ext.extract(&received).unwrap();
        assert_eq!(out.values, received.values);
    }

    #[test]
    fn fused_distribution_matches_cover_shape() {
        let hider = HidingModel::new(6, small_cfg()).unwrap();
        let cover = LatentDistribution {
            mean: rand_latent(&[16, 2, 4, 4], 7).values,
            log_var: ArrayD::zeros(IxDyn(&[16, 2, 4, 4])),
        };
        let secret = rand_latent(&[16, 2, 4, 4], 8);
        let (fused, dist) = hider.hide_fused_distribution(&cover, &secret).unwrap();
        assert_eq!(fused.values.shape(), cover.mean.shape());
        assert_eq!(dist.mean.shape(), cover.mean.shape());
        assert_eq!(dist.log_var.shape(), cover.mean.shape());
        assert!(dist
            .log_var
            .iter()
            .all(|&v| (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v)));
    }

    #[test]
    fn extractor_preserves_shape_and_rejects_malformed() {
        let ext = SecretExtractor::new(9, small_cfg()).unwrap();
        let received = rand_latent(&[16, 2, 8, 8], 10);
        let out = ext.extract(&received).unwrap();
        assert_eq!(out.values.shape(), received.values.shape());

        let bad = rand_latent(&[8, 2, 8, 8], 11);
        assert!(matches!(ext.extract(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn hider_and_extractor_are_mirrors_by_param_count() {
        let hider = HidingModel::new(0, HidingNetConfig::default()).unwrap();
        let ext = SecretExtractor::new(0, HidingNetConfig::default()).unwrap();
        let h = hider.params.num_scalars() as f64;
        let e = ext.params.num_scalars() as f64;
        let ratio = h.max(e) / h.min(e);
        assert!(ratio <= 1.10, "param count ratio {ratio:.4} ({h} vs {e})");
    }

    #[test]
    fn config_validation() {
        assert!(HidingNetConfig::default().validate().is_ok());
        assert!(HidingNetConfig { spatial_kernels: vec![4], ..HidingNetConfig::default() }
            .validate()
            .is_err());
        assert!(HidingNetConfig { latent_dim: 50, ..HidingNetConfig::default() }
            .validate()
            .is_err());
        assert!(HidingNetConfig { depth: 0, ..HidingNetConfig::default() }
            .validate()
            .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]
        #[test]
        fn hide_never_changes_shape(
            tp in prop::sample::select(vec![2usize, 3, 4]),
            hp in prop::sample::select(vec![4usize, 8, 16]),
            wp in prop::sample::select(vec![4usize, 8, 16]),
            seed in 0u64..1000,
        ) {
            let hider = HidingModel::new(42, small_cfg()).unwrap();
            let shape = [16, tp, hp, wp];
            let cover = rand_latent(&shape, seed);
            let secret = rand_latent(&shape, seed + 1);
            let fused = hider.hide(&cover, &secret).unwrap();
            prop_assert_eq!(fused.values.shape(), &shape[..]);
        }
    }
}
