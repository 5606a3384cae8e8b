//! The seven loss terms and the mixed-strategy dispatch over sample kinds.
//!
//! Pair samples (cover + secret) activate every term except the null loss;
//! secret-free samples activate only the cover reconstruction, the cover
//! branch of the perceptual loss, the cover KL, and the null loss. The KL
//! and embedding-constraint formulas are implemented exactly as printed,
//! without the conventional 1/2 factors.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::codec::LatentDistribution;
use crate::data::VideoChunk;
use crate::error::{Error, Result};
use crate::nn::Conv2dLayer;
use crate::rng::{stream, Stream};
use crate::tensor::params::{Bound, ParamStore};
use crate::tensor::{Graph, Ix};

pub const CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub lambda_kl_c: f64,
    pub lambda_kl_s: f64,
    pub lambda_e: f64,
    pub lambda_n: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_s: 1.0,
            lambda_p: 0.1,
            lambda_kl_c: 1e-6,
            lambda_kl_s: 1e-6,
            lambda_e: 1e-2,
            lambda_n: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_c,
            self.lambda_s,
            self.lambda_p,
            self.lambda_kl_c,
            self.lambda_kl_s,
            self.lambda_e,
            self.lambda_n,
        ];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    CoverSecretPair,
    SecretFree,
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub kind: SampleKind,
    pub cover: VideoChunk,
    pub secret: Option<VideoChunk>,
}

impl TrainingSample {
    pub fn pair(cover: VideoChunk, secret: VideoChunk) -> Result<Self> {
        if cover.frames.shape() != secret.frames.shape() {
            return Err(Error::Shape(format!(
                "pair sample shapes differ: {:?} vs {:?}",
                cover.frames.shape(),
                secret.frames.shape()
            )));
        }
        Ok(Self { kind: SampleKind::CoverSecretPair, cover, secret: Some(secret) })
    }

    pub fn secret_free(cover: VideoChunk) -> Self {
        Self { kind: SampleKind::SecretFree, cover, secret: None }
    }
}

/// (1/N) sum sqrt((x-y)^2 + eps^2).
pub fn charbonnier(x: &ArrayD<f64>, y: &ArrayD<f64>, eps: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "charbonnier shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.len().max(1) as f64;
    let e2 = eps * eps;
    Ok(x.iter()
        .zip(y.iter())
        .map(|(a, b)| ((a - b) * (a - b) + e2).sqrt())
        .sum::<f64>()
        / n)
}

pub fn charbonnier_graph(g: &mut Graph, x: Ix, y: Ix, eps: f64) -> Ix {
    let d = g.sub(x, y);
    let sq = g.square(d);
    let shifted = g.add_scalar(sq, eps * eps);
    let root = g.sqrt(shifted);
    g.mean(root)
}

/// Charbonnier distance to the all-zero target.
pub fn null_loss(pred_secret: &VideoChunk, eps: f64) -> f64 {
    let n = pred_secret.frames.len().max(1) as f64;
    let e2 = eps * eps;
    pred_secret.frames.iter().map(|v| (v * v + e2).sqrt()).sum::<f64>() / n
}

pub fn null_loss_graph(g: &mut Graph, pred: Ix, eps: f64) -> Ix {
    let sq = g.square(pred);
    let shifted = g.add_scalar(sq, eps * eps);
    let root = g.sqrt(shifted);
    g.mean(root)
}

/// (1/N) sum mu^2 + sigma^2 - log sigma^2 - 1, as printed (2x the standard
/// Gaussian-to-standard-normal KL).
pub fn kl_standard(dist: &LatentDistribution) -> f64 {
    let n = dist.mean.len().max(1) as f64;
    dist.mean
        .iter()
        .zip(dist.log_var.iter())
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
        / n
}

pub fn kl_standard_graph(g: &mut Graph, mean: Ix, log_var: Ix) -> Ix {
    let sq = g.square(mean);
    let var = g.exp(log_var);
    let s = g.add(sq, var);
    let s = g.sub(s, log_var);
    let s = g.add_scalar(s, -1.0);
    g.mean(s)
}

/// (1/N) sum log(var_f/var_c) + (var_c + (mu_f - mu_c)^2)/var_f - 1,
/// as printed.
pub fn embedding_constraint(fused: &LatentDistribution, cover: &LatentDistribution) -> Result<f64> {
    if fused.mean.shape() != cover.mean.shape() {
        return Err(Error::Shape(format!(
            "embedding constraint shapes differ: {:?} vs {:?}",
            fused.mean.shape(),
            cover.mean.shape()
        )));
    }
    let n = fused.mean.len().max(1) as f64;
    let mut acc = 0.0;
    for i in 0..fused.mean.len() {
        let mf = fused.mean.as_slice().unwrap()[i];
        let mc = cover.mean.as_slice().unwrap()[i];
        let lvf = fused.log_var.as_slice().unwrap()[i];
        let lvc = cover.log_var.as_slice().unwrap()[i];
        acc += (lvf - lvc) + (lvc.exp() + (mf - mc) * (mf - mc)) * (-lvf).exp() - 1.0;
    }
    Ok(acc / n)
}

pub fn embedding_constraint_graph(
    g: &mut Graph,
    fused_mean: Ix,
    fused_log_var: Ix,
    cover_mean: Ix,
    cover_log_var: Ix,
) -> Ix {
    let dlv = g.sub(fused_log_var, cover_log_var);
    let dm = g.sub(fused_mean, cover_mean);
    let dm2 = g.square(dm);
    let var_c = g.exp(cover_log_var);
    let num = g.add(var_c, dm2);
    let neg_lvf = g.neg(fused_log_var);
    let inv_var_f = g.exp(neg_lvf);
    let frac = g.mul(num, inv_var_f);
    let s = g.add(dlv, frac);
    let s = g.add_scalar(s, -1.0);
    g.mean(s)
}

/// Fixed-seed, untrained strided conv stack standing in for the VGG-16
/// feature extractor. Features are deterministic for a fixed seed; the
/// weights are never trained and never checkpointed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerceptualExtractorConfig {
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for PerceptualExtractorConfig {
    fn default() -> Self {
        Self { widths: vec![12, 24, 32, 48, 64], seed: 77 }
    }
}

pub struct PerceptualExtractor {
    params: ParamStore,
    layers: Vec<Conv2dLayer>,
    activated: bool,
}

impl PerceptualExtractor {
    pub fn new(cfg: &PerceptualExtractorConfig) -> Self {
        Self::build(cfg, true)
    }

    /// Activation-free variant: features are affine in the input, used to
    /// probe the quadratic scaling of the loss.
    pub fn linear_probe(cfg: &PerceptualExtractorConfig) -> Self {
        Self::build(cfg, false)
    }

    fn build(cfg: &PerceptualExtractorConfig, activated: bool) -> Self {
        let mut params = ParamStore::new();
        let rng = &mut stream(cfg.seed, 3, Stream::ParamInit);
        let mut cin = 3;
        let mut layers = Vec::with_capacity(cfg.widths.len());
        for (i, &w) in cfg.widths.iter().enumerate() {
            layers.push(Conv2dLayer::new(&mut params, rng, &format!("stage{i}"), cin, w, 3, 2, 1));
            cin = w;
        }
        Self { params, layers, activated }
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind_frozen(g)
    }

    /// Per-stage feature maps for a `(3, T, H, W)` node, computed per frame.
    pub fn features(&self, g: &mut Graph, p: &Bound, x: Ix) -> Vec<Ix> {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, p, h);
            if self.activated {
                h = g.silu(h);
            }
            feats.push(h);
        }
        feats
    }
}

/// One perceptual branch: mean squared feature difference over all stages.
pub fn perceptual_branch_graph(
    g: &mut Graph,
    pe: &PerceptualExtractor,
    p: &Bound,
    pred: Ix,
    target: Ix,
) -> Ix {
    let fp = pe.features(g, p, pred);
    let ft = pe.features(g, p, target);
    let mut total: Option<Ix> = None;
    let mut count = 0usize;
    for (a, b) in fp.into_iter().zip(ft) {
        count += g.value(a).len();
        let d = g.sub(a, b);
        let sq = g.square(d);
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s),
        });
    }
    g.scale(total.unwrap(), 1.0 / count.max(1) as f64)
}

/// Both perceptual branches (cover and secret) on plain tensors.
pub fn perceptual_loss(
    pred_cover: &ArrayD<f64>,
    cover: &ArrayD<f64>,
    pred_secret: &ArrayD<f64>,
    secret: &ArrayD<f64>,
    pe: &PerceptualExtractor,
) -> Result<f64> {
    if pred_cover.shape() != cover.shape() || pred_secret.shape() != secret.shape() {
        return Err(Error::Shape("perceptual loss shape mismatch".into()));
    }
    let mut g = Graph::new();
    let p = pe.bind(&mut g);
    let pc = g.constant(pred_cover.clone());
    let c = g.constant(cover.clone());
    let ps = g.constant(pred_secret.clone());
    let s = g.constant(secret.clone());
    let bc = perceptual_branch_graph(&mut g, pe, &p, pc, c);
    let bs = perceptual_branch_graph(&mut g, pe, &p, ps, s);
    let total = g.add(bc, bs);
    Ok(g.scalar_value(total))
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cover: f64,
    pub secret: f64,
    pub perceptual: f64,
    pub kl_cover: f64,
    pub kl_secret: f64,
    pub embedding: f64,
    pub null: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("cover", self.cover),
            ("secret", self.secret),
            ("perceptual", self.perceptual),
            ("kl_cover", self.kl_cover),
            ("kl_secret", self.kl_secret),
            ("embedding", self.embedding),
            ("null", self.null),
            ("total", self.total),
        ]
    }
}

/// Graph nodes for the active terms of one sample.
pub struct LossNodes {
    pub total: Ix,
    pub cover: Ix,
    pub secret: Option<Ix>,
    pub perceptual: Ix,
    pub kl_cover: Ix,
    pub kl_secret: Option<Ix>,
    pub embedding: Option<Ix>,
    pub null: Option<Ix>,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |ix: Option<Ix>| ix.map(|i| g.scalar_value(i)).unwrap_or(0.0);
        LossBreakdown {
            cover: g.scalar_value(self.cover),
            secret: v(self.secret),
            perceptual: g.scalar_value(self.perceptual),
            kl_cover: g.scalar_value(self.kl_cover),
            kl_secret: v(self.kl_secret),
            embedding: v(self.embedding),
            null: v(self.null),
            total: g.scalar_value(self.total),
        }
    }
}

/// Nodes a pair sample produces on the tape.
pub struct PairGraphOutputs {
    pub cover_recon: Ix,
    pub cover_target: Ix,
    pub secret_recon: Ix,
    pub secret_target: Ix,
    pub cover_mean: Ix,
    pub cover_log_var: Ix,
    pub secret_mean: Ix,
    pub secret_log_var: Ix,
    pub fused_mean: Ix,
    pub fused_log_var: Ix,
}

/// Nodes a secret-free sample produces on the tape.
pub struct FreeGraphOutputs {
    pub cover_recon: Ix,
    pub cover_target: Ix,
    pub cover_mean: Ix,
    pub cover_log_var: Ix,
    /// Decode of the extractor output on a latent that carries no secret.
    pub null_recon: Ix,
}

pub fn pair_loss_graph(
    g: &mut Graph,
    pe: &PerceptualExtractor,
    pb: &Bound,
    o: &PairGraphOutputs,
    w: &LossWeights,
) -> LossNodes {
    let cover = charbonnier_graph(g, o.cover_recon, o.cover_target, CHARBONNIER_EPS);
    let secret = charbonnier_graph(g, o.secret_recon, o.secret_target, CHARBONNIER_EPS);
    let pc = perceptual_branch_graph(g, pe, pb, o.cover_recon, o.cover_target);
    let ps = perceptual_branch_graph(g, pe, pb, o.secret_recon, o.secret_target);
    let perceptual = g.add(pc, ps);
    let kl_cover = kl_standard_graph(g, o.cover_mean, o.cover_log_var);
    let kl_secret = kl_standard_graph(g, o.secret_mean, o.secret_log_var);
    // The cover distribution enters the embedding term as a fixed target:
    // detached copies keep the constraint from dragging the encoder toward
    // whatever the hider currently emits.
    let mc = g.constant(g.value(o.cover_mean).clone());
    let lvc = g.constant(g.value(o.cover_log_var).clone());
    let embedding = embedding_constraint_graph(g, o.fused_mean, o.fused_log_var, mc, lvc);

    let mut total = g.scale(cover, w.lambda_c);
    for (term, lambda) in [
        (secret, w.lambda_s),
        (perceptual, w.lambda_p),
        (kl_cover, w.lambda_kl_c),
        (kl_secret, w.lambda_kl_s),
        (embedding, w.lambda_e),
    ] {
        let scaled = g.scale(term, lambda);
        total = g.add(total, scaled);
    }
    LossNodes {
        total,
        cover,
        secret: Some(secret),
        perceptual,
        kl_cover,
        kl_secret: Some(kl_secret),
        embedding: Some(embedding),
        null: None,
    }
}

pub fn free_loss_graph(
    g: &mut Graph,
    pe: &PerceptualExtractor,
    pb: &Bound,
    o: &FreeGraphOutputs,
    w: &LossWeights,
) -> LossNodes {
    let cover = charbonnier_graph(g, o.cover_recon, o.cover_target, CHARBONNIER_EPS);
    let perceptual = perceptual_branch_graph(g, pe, pb, o.cover_recon, o.cover_target);
    let kl_cover = kl_standard_graph(g, o.cover_mean, o.cover_log_var);
    let null = null_loss_graph(g, o.null_recon, CHARBONNIER_EPS);

    let mut total = g.scale(cover, w.lambda_c);
    for (term, lambda) in [
        (perceptual, w.lambda_p),
        (kl_cover, w.lambda_kl_c),
        (null, w.lambda_n),
    ] {
        let scaled = g.scale(term, lambda);
        total = g.add(total, scaled);
    }
    LossNodes {
        total,
        cover,
        secret: None,
        perceptual,
        kl_cover,
        kl_secret: None,
        embedding: None,
        null: Some(null),
    }
}

/// Plain-tensor bundles for [`total_loss`].
pub struct PairTensors {
    pub cover_recon: ArrayD<f64>,
    pub cover: ArrayD<f64>,
    pub secret_recon: ArrayD<f64>,
    pub secret: ArrayD<f64>,
    pub cover_dist: LatentDistribution,
    pub secret_dist: LatentDistribution,
    pub fused_dist: LatentDistribution,
}

pub struct FreeTensors {
    pub cover_recon: ArrayD<f64>,
    pub cover: ArrayD<f64>,
    pub cover_dist: LatentDistribution,
    pub null_recon: ArrayD<f64>,
}

pub enum SampleTensors {
    Pair(Box<PairTensors>),
    Free(Box<FreeTensors>),
}

/// Evaluate the full weighted objective for one sample.
pub fn total_loss(
    outputs: &SampleTensors,
    pe: &PerceptualExtractor,
    w: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    w.validate()?;
    let mut g = Graph::new();
    let pb = pe.bind(&mut g);
    let nodes = match outputs {
        SampleTensors::Pair(p) => {
            if p.cover_recon.shape() != p.cover.shape()
                || p.secret_recon.shape() != p.secret.shape()
            {
                return Err(Error::Shape("pair outputs inconsistent with targets".into()));
            }
            let o = PairGraphOutputs {
                cover_recon: g.constant(p.cover_recon.clone()),
                cover_target: g.constant(p.cover.clone()),
                secret_recon: g.constant(p.secret_recon.clone()),
                secret_target: g.constant(p.secret.clone()),
                cover_mean: g.constant(p.cover_dist.mean.clone()),
                cover_log_var: g.constant(p.cover_dist.log_var.clone()),
                secret_mean: g.constant(p.secret_dist.mean.clone()),
                secret_log_var: g.constant(p.secret_dist.log_var.clone()),
                fused_mean: g.constant(p.fused_dist.mean.clone()),
                fused_log_var: g.constant(p.fused_dist.log_var.clone()),
            };
            pair_loss_graph(&mut g, pe, &pb, &o, w)
        }
        SampleTensors::Free(f) => {
            if f.cover_recon.shape() != f.cover.shape() {
                return Err(Error::Shape("free outputs inconsistent with targets".into()));
            }
            let o = FreeGraphOutputs {
                cover_recon: g.constant(f.cover_recon.clone()),
                cover_target: g.constant(f.cover.clone()),
                cover_mean: g.constant(f.cover_dist.mean.clone()),
                cover_log_var: g.constant(f.cover_dist.log_var.clone()),
                null_recon: g.constant(f.null_recon.clone()),
            };
            free_loss_graph(&mut g, pe, &pb, &o, w)
        }
    };
    let breakdown = nodes.breakdown(&g);
    Ok((breakdown.total, breakdown))
}
