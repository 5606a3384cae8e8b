//! Eavesdropper simulation: a secret-presence detector trained on tapped
//! post-channel latents, exact ROC/AUC evaluation, and FGSM/PGD attacks on
//! the channel-input signal.
//!
//! Detector labels are assigned per session, not per chunk: every chunk of a
//! hiding session is labeled positive even though only a fraction `r` of them
//! actually carry payload. The remaining `1 - r` are mislabeled clean chunks,
//! which is exactly the label noise the randomized schedule injects into an
//! observer.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::channel::{awgn_noise, ChannelSignal};
use crate::codec::{Codec, LatentSample, LATENT_CHANNELS};
use crate::data::VideoChunk;
use crate::error::{Error, Result};
use crate::fvd::{fvd_lite, FvdFeatureNet};
use crate::hiding::{HidingModel, SecretExtractor};
use crate::losses::{charbonnier_graph, CHARBONNIER_EPS};
use crate::metrics::{psnr, ssim, FVD_FEATURE_SEED};
use crate::nn::{Conv3dLayer, Linear};
use crate::pipeline::{recover_latents, transmit_session, Sender};
use crate::rng::{stream, Stream};
use crate::scheduler::hidden_count;
use crate::tensor::params::{GradBuffer, ParamStore};
use crate::tensor::{Graph, Ix};
use crate::trainer::Adam;

/// Chunks per generated session. Five keeps `1 - m/N` equal to `1 - r` for
/// the capacity ratios exercised in evaluation (0.2, 0.4, 1.0).
pub const SESSION_CHUNKS: usize = 5;

#[derive(Debug, Clone)]
pub struct DetectorDataset {
    pub clips: Vec<LatentSample>,
    /// Session-granularity label: true for chunks of hiding sessions.
    pub labels: Vec<bool>,
    /// Ground truth from the sender-side schedule log; evaluation only.
    pub carrying: Vec<bool>,
}

impl DetectorDataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Fraction of positive-labeled clips that are actually clean.
    pub fn label_noise_rate(&self) -> f64 {
        let pos = self.labels.iter().filter(|&&l| l).count();
        if pos == 0 {
            return 0.0;
        }
        let clean = self
            .labels
            .iter()
            .zip(&self.carrying)
            .filter(|(&l, &c)| l && !c)
            .count();
        clean as f64 / pos as f64
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }
}

/// Transmit alternating hiding / clean sessions through the channel and
/// collect the denormalized latents an in-path observer would see.
pub fn build_detector_dataset(
    sender: &Sender,
    source: &[VideoChunk],
    r: f64,
    snr_db: f64,
    size: usize,
    seed: u64,
) -> Result<DetectorDataset> {
    if size == 0 {
        return Err(Error::Config("detector dataset size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("capacity ratio {r} outside [0,1]")));
    }
    if source.is_empty() {
        return Err(Error::Config("detector dataset needs source chunks".into()));
    }
    let mut seeder = stream(seed, 0, Stream::Detector);
    let mut cursor = 0usize;
    let next = |n: usize, cursor: &mut usize| -> Vec<VideoChunk> {
        (0..n)
            .map(|_| {
                let c = source[*cursor % source.len()].clone();
                *cursor += 1;
                c
            })
            .collect()
    };

    let mut ds = DetectorDataset { clips: Vec::new(), labels: Vec::new(), carrying: Vec::new() };
    let mut session = 0usize;
    while ds.len() < size {
        let positive = session % 2 == 0;
        let covers = next(SESSION_CHUNKS, &mut cursor);
        let send_seed: u64 = rand::Rng::random(&mut seeder);
        let chan_seed: u64 = rand::Rng::random(&mut seeder);
        let sent = if positive {
            let secrets = next(hidden_count(SESSION_CHUNKS, r), &mut cursor);
            sender.send(&covers, Some(&secrets), r, send_seed)?
        } else {
            sender.send(&covers, None, r, send_seed)?
        };
        let received = transmit_session(&sent, snr_db, chan_seed);
        let latents = recover_latents(&received, &sent.scales, &sent.latent_shape)?;
        for (i, latent) in latents.into_iter().enumerate() {
            if ds.len() == size {
                break;
            }
            ds.clips.push(latent);
            ds.labels.push(positive);
            ds.carrying.push(positive && sent.schedule.contains(i + 1));
        }
        session += 1;
    }
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub train_snr_db: f64,
    pub capacity_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            train_snr_db: 30.0,
            capacity_ratio: 0.5,
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.capacity_ratio) {
            return Err(Error::Config(format!(
                "capacity ratio {} outside [0,1]",
                self.capacity_ratio
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("detector needs epochs >= 1 and batch_size >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

const DETECTOR_WIDTHS: [usize; 4] = [20, 28, 36, 44];

/// Small 3D-convolution binary classifier over post-channel latents.
pub struct Detector {
    pub params: ParamStore,
    stages: Vec<Conv3dLayer>,
    head: Linear,
    width: usize,
}

impl Detector {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = stream(seed, 0, Stream::Detector);
        let mut stages = Vec::new();
        let mut cin = LATENT_CHANNELS;
        for (i, &cout) in DETECTOR_WIDTHS.iter().enumerate() {
            stages.push(Conv3dLayer::new(
                &mut params,
                &mut rng,
                &format!("det.s{i}"),
                cin,
                cout,
                (3, 3, 3),
                (1, 2, 2),
                (1, 1, 1),
            ));
            cin = cout;
        }
        let width = *DETECTOR_WIDTHS.last().unwrap();
        let head = Linear::new(&mut params, &mut rng, "det.head", width, 1);
        Self { params, stages, head, width }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).sum()
    }

    fn logit_graph(&self, g: &mut Graph, p: &crate::tensor::params::Bound, x: Ix) -> Ix {
        let mut h = x;
        for s in &self.stages {
            h = s.forward(g, p, h);
            h = g.silu(h);
        }
        let thw: usize = g.shape(h)[1..].iter().product();
        let flat = g.reshape(h, &[self.width, thw]);
        let pooled = g.mean_axis(flat, 1);
        let row = g.reshape(pooled, &[1, self.width]);
        let logit = self.head.forward(g, p, row);
        g.sum(logit)
    }

    fn check_input(latent: &LatentSample) -> Result<()> {
        let s = latent.values.shape();
        if s.len() != 4 || s[0] != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "detector wants a (16,T',H',W') latent, got {s:?}"
            )));
        }
        Ok(())
    }

    /// Secret-presence score in [0, 1].
    pub fn score(&self, latent: &LatentSample) -> Result<f64> {
        Self::check_input(latent)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(latent.values.clone());
        let logit = self.logit_graph(&mut g, &p, x);
        let s = g.sigmoid(logit);
        Ok(g.scalar_value(s))
    }

    pub fn score_all(&self, clips: &[LatentSample]) -> Result<Vec<f64>> {
        clips.iter().map(|c| self.score(c)).collect()
    }
}

/// Fit the classifier with binary cross-entropy; deterministic per seed.
pub fn train_detector(dataset: &DetectorDataset, cfg: &DetectorConfig) -> Result<Detector> {
    cfg.validate()?;
    let (pos, neg) = dataset.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::Config(format!(
            "single-class dataset ({pos} positive, {neg} negative)"
        )));
    }
    for clip in &dataset.clips {
        Detector::check_input(clip)?;
    }

    let mut det = Detector::new(cfg.seed);
    let mut adam = Adam::zeros_like(&det.params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, 1 + epoch as u64, Stream::Detector);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mut gb = GradBuffer::zeros_like(&det.params);
            for &i in batch {
                let mut g = Graph::new();
                let p = det.params.bind(&mut g);
                let x = g.constant(dataset.clips[i].values.clone());
                let logit = det.logit_graph(&mut g, &p, x);
                // bce: -ln sigma(l) = softplus(-l), -ln(1 - sigma(l)) = softplus(l)
                let loss = if dataset.labels[i] {
                    let n = g.neg(logit);
                    g.softplus(n)
                } else {
                    g.softplus(logit)
                };
                let mut grads = g.backward(loss);
                gb.accumulate(&p, &mut grads);
            }
            gb.scale(1.0 / batch.len() as f64);
            adam.step(&mut det.params, &gb, cfg.lr);
        }
    }
    Ok(det)
}

#[derive(Debug, Clone, Serialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

/// Exact ROC via a sorted-score sweep, ties grouped; AUC by trapezoid.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Config(format!("single-class test set ({p} positive, {n} negative)")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
        auc: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(s);
        curve.fpr.push(fp as f64 / n as f64);
        curve.tpr.push(tp as f64 / p as f64);
    }
    for w in 1..curve.fpr.len() {
        curve.auc +=
            (curve.fpr[w] - curve.fpr[w - 1]) * (curve.tpr[w] + curve.tpr[w - 1]) / 2.0;
    }
    Ok(curve)
}

pub fn write_roc_csv(path: &Path, curve: &RocCurve, r: f64, snr_db: f64, seed: u64) -> Result<()> {
    let mut out = format!(
        "# seed={seed} r={r} snr_db={snr_db} auc={:.6}\nthreshold,fpr,tpr\n",
        curve.auc
    );
    for i in 0..curve.thresholds.len() {
        out.push_str(&format!(
            "{},{:.6},{:.6}\n",
            curve.thresholds[i], curve.fpr[i], curve.tpr[i]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_roc_summary(path: &Path, curve: &RocCurve, r: f64, snr_db: f64) -> Result<()> {
    let doc = serde_json::json!({ "auc": curve.auc, "r": r, "snr_db": snr_db });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Self::Fgsm),
            "pgd" => Ok(Self::Pgd),
            other => Err(Error::Config(format!("unknown attack method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L-infinity budget on the normalized channel-input signal.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub cover_penalty_beta: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon: 0.01,
            steps: 1,
            step_size: 0.01,
            cover_penalty_beta: 1.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.method == AttackMethod::Pgd && self.step_size <= 0.0 {
            return Err(Error::Config(format!(
                "pgd step size {} must be positive",
                self.step_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricDeltas {
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub ssim_before: f64,
    pub ssim_after: f64,
    pub fvd_before: Option<f64>,
    pub fvd_after: Option<f64>,
}

impl MetricDeltas {
    pub fn delta_psnr(&self) -> f64 {
        self.psnr_after - self.psnr_before
    }

    pub fn delta_ssim(&self) -> f64 {
        self.ssim_after - self.ssim_before
    }

    pub fn delta_fvd(&self) -> Option<f64> {
        Some(self.fvd_after? - self.fvd_before?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub method: AttackMethod,
    pub epsilon: f64,
    /// Largest perturbation actually applied, over all pairs and elements.
    pub linf: f64,
    pub cover: MetricDeltas,
    pub secret: MetricDeltas,
}

pub struct AttackOutcome {
    pub perturbed: Vec<ChannelSignal>,
    pub report: AttackReport,
}

/// Perturb each pair's channel-input signal within an epsilon ball to spoil
/// secret recovery while penalizing cover damage: maximize
/// `J = L_secret - beta * L_cover` by signed gradient ascent.
pub fn attack(
    codec: &Codec,
    hider: &HidingModel,
    extractor: &SecretExtractor,
    covers: &[VideoChunk],
    secrets: &[VideoChunk],
    snr_db: f64,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if covers.is_empty() || covers.len() != secrets.len() {
        return Err(Error::Config(format!(
            "attack pairs covers with secrets 1:1, got {} and {}",
            covers.len(),
            secrets.len()
        )));
    }
    let (steps, alpha) = match cfg.method {
        AttackMethod::Fgsm => (1, cfg.epsilon),
        AttackMethod::Pgd => (cfg.steps, cfg.step_size),
    };

    let mut perturbed = Vec::with_capacity(covers.len());
    let mut linf = 0.0f64;
    let mut cover_before = Vec::new();
    let mut cover_after = Vec::new();
    let mut secret_before = Vec::new();
    let mut secret_after = Vec::new();

    for (i, (cover, secret)) in covers.iter().zip(secrets).enumerate() {
        if cover.frames.shape() != secret.frames.shape() {
            return Err(Error::Shape(format!(
                "cover {:?} and secret {:?} disagree",
                cover.frames.shape(),
                secret.frames.shape()
            )));
        }
        let t = cover.frames.shape()[1];
        let mu_c = LatentSample { values: codec.encode(cover)?.mean };
        let mu_s = LatentSample { values: codec.encode(secret)?.mean };
        let fused = hider.hide(&mu_c, &mu_s)?;
        let latent_shape = fused.values.shape().to_vec();
        let (signal, scale) = crate::channel::power_normalize(&LatentSample {
            values: fused.values.clone(),
        })?;
        let x0 = signal.values.clone();
        let noise = awgn_noise(
            x0.shape(),
            snr_db,
            &mut stream(cfg.seed, i as u64, Stream::Attack),
        );

        // iterate on the perturbation itself so the projection bounds it by
        // epsilon exactly, with no rounding through x0
        let mut delta: ArrayD<f64> = ArrayD::zeros(x0.raw_dim());
        for _ in 0..steps {
            let mut g = Graph::new();
            let bc = codec.params.bind_frozen(&mut g);
            let be = extractor.params.bind_frozen(&mut g);
            let x_node = g.leaf(&x0 + &delta, true);
            let n_node = g.constant(noise.clone());
            let y = g.add(x_node, n_node);
            let y = g.scale(y, scale);
            let received = g.reshape(y, &latent_shape);
            let cover_recon = codec.decode_graph(&mut g, &bc, received, t);
            let extracted = extractor.forward_graph(&mut g, &be, received);
            let secret_recon = codec.decode_graph(&mut g, &bc, extracted, t);
            let ct = g.constant(cover.frames.clone());
            let st = g.constant(secret.frames.clone());
            let l_secret = charbonnier_graph(&mut g, secret_recon, st, CHARBONNIER_EPS);
            let l_cover = charbonnier_graph(&mut g, cover_recon, ct, CHARBONNIER_EPS);
            let penalty = g.scale(l_cover, cfg.cover_penalty_beta);
            let j = g.sub(l_secret, penalty);
            let mut grads = g.backward(j);
            let gx = grads.take(x_node).expect("signal leaf requires grad");
            ndarray::Zip::from(&mut delta).and(&gx).for_each(|di, &gi| {
                *di = (*di + alpha * gi.signum()).clamp(-cfg.epsilon, cfg.epsilon);
            });
        }
        let x = &x0 + &delta;
        linf = delta.iter().map(|d| d.abs()).fold(linf, f64::max);

        let decode_both = |sig: &ArrayD<f64>| -> Result<(VideoChunk, VideoChunk)> {
            let values = (sig + &noise) * scale;
            let received = LatentSample {
                values: values.into_shape_with_order(IxDyn(&latent_shape)).expect("flat latent"),
            };
            let cover_recon = codec.decode(&received, t)?;
            let secret_recon = codec.decode(&extractor.extract(&received)?, t)?;
            Ok((cover_recon, secret_recon))
        };
        let (cb, sb) = decode_both(&x0)?;
        let (ca, sa) = decode_both(&x)?;
        cover_before.push(cb);
        cover_after.push(ca);
        secret_before.push(sb);
        secret_after.push(sa);
        perturbed.push(ChannelSignal { values: x });
    }

    let mean_metrics = |recons: &[VideoChunk], refs: &[VideoChunk]| -> Result<(f64, f64)> {
        let mut p = 0.0;
        let mut s = 0.0;
        for (a, b) in recons.iter().zip(refs) {
            p += psnr(a, b)?;
            s += ssim(a, b)?;
        }
        Ok((p / recons.len() as f64, s / recons.len() as f64))
    };
    let fvd_of = |recons: &[VideoChunk], refs: &[VideoChunk]| -> Result<Option<f64>> {
        if recons.len() < 2 {
            return Ok(None);
        }
        let net = FvdFeatureNet::new(FVD_FEATURE_SEED);
        Ok(Some(fvd_lite(recons, refs, &net)?))
    };

    let (cp_b, cs_b) = mean_metrics(&cover_before, covers)?;
    let (cp_a, cs_a) = mean_metrics(&cover_after, covers)?;
    let (sp_b, ss_b) = mean_metrics(&secret_before, secrets)?;
    let (sp_a, ss_a) = mean_metrics(&secret_after, secrets)?;
    let report = AttackReport {
        method: cfg.method,
        epsilon: cfg.epsilon,
        linf,
        cover: MetricDeltas {
            psnr_before: cp_b,
            psnr_after: cp_a,
            ssim_before: cs_b,
            ssim_after: cs_a,
            fvd_before: fvd_of(&cover_before, covers)?,
            fvd_after: fvd_of(&cover_after, covers)?,
        },
        secret: MetricDeltas {
            psnr_before: sp_b,
            psnr_after: sp_a,
            ssim_before: ss_b,
            ssim_after: ss_a,
            fvd_before: fvd_of(&secret_before, secrets)?,
            fvd_after: fvd_of(&secret_after, secrets)?,
        },
    };
    Ok(AttackOutcome { perturbed, report })
}

pub fn write_attack_csv(path: &Path, report: &AttackReport, seed: u64) -> Result<()> {
    let method = match report.method {
        AttackMethod::Fgsm => "fgsm",
        AttackMethod::Pgd => "pgd",
    };
    let mut out = format!(
        "# seed={seed} method={method} epsilon={} linf={:.6}\n\
         target,psnr_before,psnr_after,delta_psnr,ssim_before,ssim_after,delta_ssim,delta_fvd\n",
        report.epsilon, report.linf
    );
    for (target, m) in [("cover", &report.cover), ("secret", &report.secret)] {
        out.push_str(&format!(
            "{target},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            m.psnr_before,
            m.psnr_after,
            m.delta_psnr(),
            m.ssim_before,
            m.ssim_after,
            m.delta_ssim(),
            m.delta_fvd().map_or("nan".to_string(), |v| format!("{v:.6}")),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hiding::HidingNetConfig;
    use rand::Rng;

    fn tiny_cfg() -> HidingNetConfig {
        HidingNetConfig { latent_dim: 24, depth: 1, spatial_kernels: vec![3], attention_heads: 4 }
    }

    fn tiny_models(seed: u64) -> (Codec, HidingModel, SecretExtractor) {
        (
            Codec::new(seed),
            HidingModel::new(seed, tiny_cfg()).unwrap(),
            SecretExtractor::new(seed, tiny_cfg()).unwrap(),
        )
    }

    fn gen_chunks(count: usize, seed: u64) -> Vec<VideoChunk> {
        let mut rng = stream(seed, 0, Stream::DataGen);
        (0..count)
            .map(|_| {
                VideoChunk::new(ArrayD::from_shape_fn(IxDyn(&[3, 5, 16, 16]), |_| {
                    rng.random_range(0.0..1.0)
                }))
                .unwrap()
            })
            .collect()
    }

    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let mut hits = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    hits += 1.0;
                } else if scores[i] == scores[j] {
                    hits += 0.5;
                }
            }
        }
        hits / pairs
    }

    #[test]
    fn roc_auc_matches_mann_whitney_exactly() {
        let scores = [0.9, 0.8, 0.8, 0.1];
        let labels = [true, false, true, false];
        let curve = roc(&scores, &labels).unwrap();
        assert!((curve.auc - mann_whitney(&scores, &labels)).abs() < 1e-12);

        let mut rng = stream(3, 0, Stream::Eval);
        for _ in 0..50 {
            let n = rng.random_range(2..=10);
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let curve = roc(&scores, &labels).unwrap();
            assert!(
                (curve.auc - mann_whitney(&scores, &labels)).abs() < 1e-12,
                "scores {scores:?} labels {labels:?}"
            );
        }
    }

    #[test]
    fn roc_endpoints_and_degenerate_scorers() {
        let perfect = roc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(perfect.auc, 1.0);
        let constant = roc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap();
        assert!((constant.auc - 0.5).abs() < 1e-12);
        for curve in [&perfect, &constant] {
            assert_eq!((curve.fpr[0], curve.tpr[0]), (0.0, 0.0));
            let last = curve.fpr.len() - 1;
            assert_eq!((curve.fpr[last], curve.tpr[last]), (1.0, 1.0));
            for w in 1..curve.fpr.len() {
                assert!(curve.fpr[w] >= curve.fpr[w - 1]);
                assert!(curve.tpr[w] >= curve.tpr[w - 1]);
            }
        }
    }

    #[test]
    fn roc_rejects_single_class() {
        assert!(roc(&[0.1, 0.9], &[true, true]).is_err());
        assert!(roc(&[0.1, 0.9], &[false, false]).is_err());
    }

    #[test]
    fn label_noise_rate_is_one_minus_r() {
        let (codec, hider, _) = tiny_models(4);
        let sender = Sender::new(codec, hider);
        let source = gen_chunks(12, 21);
        let ds = build_detector_dataset(&sender, &source, 0.2, 30.0, 30, 9).unwrap();
        assert!((ds.label_noise_rate() - 0.8).abs() < 1e-12);
        let ds = build_detector_dataset(&sender, &source, 1.0, 30.0, 30, 9).unwrap();
        assert_eq!(ds.label_noise_rate(), 0.0);
        assert_eq!(ds.len(), 30);
        assert!(ds.labels.iter().any(|&l| l) && ds.labels.iter().any(|&l| !l));
    }

    #[test]
    fn dataset_rejects_bad_arguments() {
        let (codec, hider, _) = tiny_models(4);
        let sender = Sender::new(codec, hider);
        let source = gen_chunks(4, 21);
        assert!(build_detector_dataset(&sender, &source, 0.5, 30.0, 0, 9).is_err());
        assert!(build_detector_dataset(&sender, &source, 1.5, 30.0, 10, 9).is_err());
        assert!(build_detector_dataset(&sender, &[], 0.5, 30.0, 10, 9).is_err());
    }

    #[test]
    fn detector_size_is_desk_scale() {
        let det = Detector::new(0);
        let n = det.param_count();
        assert!((50_000..200_000).contains(&n), "detector has {n} parameters");
    }

    #[test]
    fn train_rejects_single_class() {
        let (codec, hider, _) = tiny_models(4);
        let sender = Sender::new(codec, hider);
        let source = gen_chunks(6, 21);
        let mut ds = build_detector_dataset(&sender, &source, 1.0, 30.0, 8, 9).unwrap();
        ds.labels.iter_mut().for_each(|l| *l = true);
        assert!(train_detector(&ds, &DetectorConfig::default()).is_err());
    }

    #[test]
    fn detector_training_is_deterministic_per_seed() {
        let (codec, hider, _) = tiny_models(4);
        let sender = Sender::new(codec, hider);
        let source = gen_chunks(8, 21);
        let ds = build_detector_dataset(&sender, &source, 1.0, 30.0, 12, 9).unwrap();
        let cfg = DetectorConfig { epochs: 2, ..DetectorConfig::default() };
        let d1 = train_detector(&ds, &cfg).unwrap();
        let d2 = train_detector(&ds, &cfg).unwrap();
        assert_eq!(d1.score_all(&ds.clips).unwrap(), d2.score_all(&ds.clips).unwrap());
        let d3 = train_detector(&ds, &DetectorConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(d1.score_all(&ds.clips).unwrap(), d3.score_all(&ds.clips).unwrap());
        for s in d1.score_all(&ds.clips).unwrap() {
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn pgd_single_step_reduces_to_fgsm_bitwise() {
        let (codec, hider, extractor) = tiny_models(4);
        let chunks = gen_chunks(2, 33);
        let fgsm = AttackConfig { epsilon: 0.05, ..AttackConfig::default() };
        let pgd = AttackConfig {
            method: AttackMethod::Pgd,
            steps: 1,
            step_size: 0.05,
            ..fgsm.clone()
        };
        let a = attack(&codec, &hider, &extractor, &chunks[..1], &chunks[1..], 20.0, &fgsm)
            .unwrap();
        let b = attack(&codec, &hider, &extractor, &chunks[..1], &chunks[1..], 20.0, &pgd)
            .unwrap();
        assert_eq!(a.perturbed[0].values, b.perturbed[0].values);
        assert_eq!(a.report.linf, b.report.linf);
    }

    #[test]
    fn pgd_iterates_stay_inside_epsilon_ball() {
        let (codec, hider, extractor) = tiny_models(4);
        let chunks = gen_chunks(2, 34);
        let cfg = AttackConfig {
            method: AttackMethod::Pgd,
            epsilon: 0.05,
            steps: 4,
            step_size: 0.03,
            ..AttackConfig::default()
        };
        let out =
            attack(&codec, &hider, &extractor, &chunks[..1], &chunks[1..], 20.0, &cfg).unwrap();
        assert!(out.report.linf <= cfg.epsilon + 1e-15, "linf {}", out.report.linf);

        let mu_c = LatentSample { values: codec.encode(&chunks[0]).unwrap().mean };
        let mu_s = LatentSample { values: codec.encode(&chunks[1]).unwrap().mean };
        let fused = hider.hide(&mu_c, &mu_s).unwrap();
        let (signal, _) =
            crate::channel::power_normalize(&LatentSample { values: fused.values }).unwrap();
        let max_dev = out.perturbed[0]
            .values
            .iter()
            .zip(signal.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // composing x0 + delta rounds once, so allow an ulp of slack
        assert!(max_dev <= cfg.epsilon * (1.0 + 1e-12), "deviation {max_dev}");
    }

    #[test]
    fn vanishing_budget_vanishing_deltas() {
        let (codec, hider, extractor) = tiny_models(4);
        let chunks = gen_chunks(2, 35);
        let cfg = AttackConfig { epsilon: 1e-9, ..AttackConfig::default() };
        let out =
            attack(&codec, &hider, &extractor, &chunks[..1], &chunks[1..], 20.0, &cfg).unwrap();
        assert!(out.report.secret.delta_psnr().abs() < 1e-2);
        assert!(out.report.cover.delta_psnr().abs() < 1e-2);
        assert!(out.report.secret.delta_ssim().abs() < 1e-4);
    }

    #[test]
    fn attack_rejects_bad_config() {
        let (codec, hider, extractor) = tiny_models(4);
        let chunks = gen_chunks(2, 36);
        for cfg in [
            AttackConfig { epsilon: 0.0, ..AttackConfig::default() },
            AttackConfig { epsilon: -0.5, ..AttackConfig::default() },
            AttackConfig { method: AttackMethod::Pgd, steps: 0, ..AttackConfig::default() },
        ] {
            assert!(
                attack(&codec, &hider, &extractor, &chunks[..1], &chunks[1..], 20.0, &cfg)
                    .is_err()
            );
        }
        assert!(attack(
            &codec,
            &hider,
            &extractor,
            &chunks[..1],
            &[],
            20.0,
            &AttackConfig::default()
        )
        .is_err());
    }
}
