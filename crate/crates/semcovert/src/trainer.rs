//! Joint training of codec, hider, and extractor with dual learning rates,
//! the mixed pair/secret-free strategy, and resumable checkpoints.
//!
//! All randomness is drawn from streams keyed by `(seed, step, purpose)`,
//! so a run interrupted at any step and resumed from its checkpoint is
//! bitwise identical to an uninterrupted run.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::{awgn_noise, normalize_graph, transmit_graph};
use crate::checkpoint::Checkpoint;
use crate::codec::{noise_like, Codec};
use crate::data::VideoChunk;
use crate::error::{Error, Result};
use crate::hiding::{HidingModel, HidingNetConfig, SecretExtractor};
use crate::losses::{
    free_loss_graph, pair_loss_graph, FreeGraphOutputs, LossBreakdown, LossWeights,
    PairGraphOutputs, PerceptualExtractor, PerceptualExtractorConfig,
};
use crate::rng::{stream, Stream};
use crate::scheduler::draw_schedule;
use crate::tensor::params::{GradBuffer, ParamStore};
use crate::tensor::Graph;

pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_codec: f64,
    pub lr_hiding: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub capacity_ratio: f64,
    pub seed: u64,
    /// Fixed seeds and serialized data order. The only implemented mode;
    /// the flag is recorded so future nondeterministic paths stay opt-in.
    pub deterministic: bool,
    /// Write a checkpoint every this many steps when an output directory
    /// is supplied; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub hiding: HidingNetConfig,
    pub weights: LossWeights,
    pub perceptual: PerceptualExtractorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr_codec: 2e-5,
            lr_hiding: 4e-4,
            snr_db_min: 5.0,
            snr_db_max: 30.0,
            capacity_ratio: 0.5,
            seed: 0,
            deterministic: true,
            checkpoint_every: 0,
            hiding: HidingNetConfig::default(),
            weights: LossWeights::default(),
            perceptual: PerceptualExtractorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_codec <= 0.0 || self.lr_hiding <= 0.0 {
            return Err(Error::Config(format!(
                "learning rates must be positive: codec {}, hiding {}",
                self.lr_codec, self.lr_hiding
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.capacity_ratio) {
            return Err(Error::Config(format!(
                "capacity ratio {} outside [0,1]",
                self.capacity_ratio
            )));
        }
        if self.snr_db_min > self.snr_db_max {
            return Err(Error::Config(format!(
                "snr range [{}, {}] is empty",
                self.snr_db_min, self.snr_db_max
            )));
        }
        self.weights.validate()?;
        self.hiding.validate()?;
        Ok(())
    }
}

/// Adaptive moment estimation with default betas and bias correction.
pub struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            m: store.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect(),
            v: store.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads.grad(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            });
            let w = store.value_mut(id);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|wi, &mi, &vi| {
                *wi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            });
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub step: u64,
    pub kind: String,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Default)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn to_csv(&self, seed: u64, version: &str) -> String {
        let mut out = format!("# seed={seed} version={version}\nstep,kind,term,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.kind, r.term, r.value));
        }
        out
    }

    pub fn write(&self, path: &Path, seed: u64, version: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(seed, version))?;
        Ok(())
    }

    /// Mean of one term over steps in `[from, to)`, for trend checks.
    pub fn term_values(&self, kind: &str, term: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.kind == kind && r.term == term)
            .map(|r| (r.step, r.value))
            .collect()
    }
}

/// Content hash of the version string, recorded in manifests and logs.
pub fn version_string() -> String {
    let base = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));
    let mut h: u64 = 0xcbf29ce484222325;
    for b in base.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{base}+{h:016x}")
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub codec: Codec,
    pub hider: HidingModel,
    pub extractor: SecretExtractor,
    pub perceptual: PerceptualExtractor,
    adam_codec: Adam,
    adam_hider: Adam,
    adam_extractor: Adam,
    pub step: u64,
    cursor: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let codec = Codec::new(cfg.seed);
        let hider = HidingModel::new(cfg.seed, cfg.hiding.clone())?;
        let extractor = SecretExtractor::new(cfg.seed, cfg.hiding.clone())?;
        let perceptual = PerceptualExtractor::new(&cfg.perceptual);
        let adam_codec = Adam::zeros_like(&codec.params);
        let adam_hider = Adam::zeros_like(&hider.params);
        let adam_extractor = Adam::zeros_like(&extractor.params);
        Ok(Self {
            cfg,
            codec,
            hider,
            extractor,
            perceptual,
            adam_codec,
            adam_hider,
            adam_extractor,
            step: 0,
            cursor: 0,
        })
    }

    fn next_chunk<'d>(&mut self, dataset: &'d [VideoChunk]) -> &'d VideoChunk {
        // epoch cycling: wrap around when the dataset is exhausted
        let chunk = &dataset[(self.cursor % dataset.len() as u64) as usize];
        self.cursor += 1;
        chunk
    }

    fn train_step(&mut self, dataset: &[VideoChunk], log: &mut LossLog) -> Result<()> {
        let step = self.step;
        let cfg = self.cfg.clone();
        let snr_db = if cfg.snr_db_max > cfg.snr_db_min {
            rand::Rng::random_range(
                &mut stream(cfg.seed, step, Stream::SnrSample),
                cfg.snr_db_min..cfg.snr_db_max,
            )
        } else {
            cfg.snr_db_min
        };
        let schedule = draw_schedule(
            cfg.batch_size,
            cfg.capacity_ratio,
            &mut stream(cfg.seed, step, Stream::Schedule),
        )?;
        let mut reparam_rng = stream(cfg.seed, step, Stream::Reparam);
        let mut noise_rng = stream(cfg.seed, step, Stream::ChannelNoise);

        let mut gb_codec = GradBuffer::zeros_like(&self.codec.params);
        let mut gb_hider = GradBuffer::zeros_like(&self.hider.params);
        let mut gb_extractor = GradBuffer::zeros_like(&self.extractor.params);

        let mut pair_sum = LossBreakdown::default();
        let mut free_sum = LossBreakdown::default();
        let (mut pair_n, mut free_n) = (0usize, 0usize);

        for slot in 1..=cfg.batch_size {
            let is_pair = schedule.contains(slot);
            let cover = self.next_chunk(dataset).clone();
            let secret = if is_pair { Some(self.next_chunk(dataset).clone()) } else { None };
            let t = cover.frames.shape()[1];

            let mut g = Graph::new();
            let bc = self.codec.params.bind(&mut g);
            let be = self.extractor.params.bind(&mut g);
            let bp = self.perceptual.bind(&mut g);

            let cover_x = g.constant(cover.frames.clone());
            let (mu_c, lv_c) = self.codec.encode_graph(&mut g, &bc, cover_x);
            let eps_c = g.constant(noise_like(g.value(mu_c).shape(), &mut reparam_rng));
            let z_c = self.codec.reparameterize_graph(&mut g, mu_c, lv_c, eps_c);

            let (nodes, kind) = match secret {
                Some(secret) => {
                    if secret.frames.shape() != cover.frames.shape() {
                        return Err(Error::Shape(format!(
                            "dataset chunks disagree: {:?} vs {:?}",
                            cover.frames.shape(),
                            secret.frames.shape()
                        )));
                    }
                    let bh = self.hider.params.bind(&mut g);
                    let secret_x = g.constant(secret.frames.clone());
                    let (mu_s, lv_s) = self.codec.encode_graph(&mut g, &bc, secret_x);
                    let eps_s = g.constant(noise_like(g.value(mu_s).shape(), &mut reparam_rng));
                    let z_s = self.codec.reparameterize_graph(&mut g, mu_s, lv_s, eps_s);

                    let hid = self.hider.forward_graph(&mut g, &bh, z_c, z_s);
                    let (signal, scale) = normalize_graph(&mut g, hid.fused);
                    let noise =
                        awgn_noise(g.value(signal).shape(), snr_db, &mut noise_rng);
                    let received = transmit_graph(&mut g, signal, noise, scale);

                    let cover_recon = self.codec.decode_graph(&mut g, &bc, received, t);
                    let extracted = self.extractor.forward_graph(&mut g, &be, received);
                    // Differentiated decoding shares one decoder between the
                    // roles, so only cover reconstruction shapes it: the
                    // secret branch decodes through frozen weights and the
                    // extractor learns to land on latents that decoder
                    // already renders. A live decoder here is pulled toward
                    // cover and secret for the same received latent and
                    // settles on their average.
                    let bc_frozen = self.codec.params.bind_frozen(&mut g);
                    let secret_recon = self.codec.decode_graph(&mut g, &bc_frozen, extracted, t);

                    let outputs = PairGraphOutputs {
                        cover_recon,
                        cover_target: cover_x,
                        secret_recon,
                        secret_target: secret_x,
                        cover_mean: mu_c,
                        cover_log_var: lv_c,
                        secret_mean: mu_s,
                        secret_log_var: lv_s,
                        fused_mean: hid.fused_mean,
                        fused_log_var: hid.fused_log_var,
                    };
                    let nodes =
                        pair_loss_graph(&mut g, &self.perceptual, &bp, &outputs, &cfg.weights);
                    let bd = nodes.breakdown(&g);
                    Self::check_finite(&bd, step, "pair")?;
                    let mut grads = g.backward(nodes.total);
                    gb_codec.accumulate(&bc, &mut grads);
                    gb_hider.accumulate(&bh, &mut grads);
                    gb_extractor.accumulate(&be, &mut grads);
                    (bd, "pair")
                }
                None => {
                    let (signal, scale) = normalize_graph(&mut g, z_c);
                    let noise =
                        awgn_noise(g.value(signal).shape(), snr_db, &mut noise_rng);
                    let received = transmit_graph(&mut g, signal, noise, scale);
                    let cover_recon = self.codec.decode_graph(&mut g, &bc, received, t);
                    let extracted = self.extractor.forward_graph(&mut g, &be, received);
                    // The null term teaches the extractor, not the decoder: decode
                    // through frozen codec weights so the shared decoder is not
                    // pulled toward emitting blank video.
                    let bc_frozen = self.codec.params.bind_frozen(&mut g);
                    let null_recon = self.codec.decode_graph(&mut g, &bc_frozen, extracted, t);

                    let outputs = FreeGraphOutputs {
                        cover_recon,
                        cover_target: cover_x,
                        cover_mean: mu_c,
                        cover_log_var: lv_c,
                        null_recon,
                    };
                    let nodes =
                        free_loss_graph(&mut g, &self.perceptual, &bp, &outputs, &cfg.weights);
                    let bd = nodes.breakdown(&g);
                    Self::check_finite(&bd, step, "secret_free")?;
                    let mut grads = g.backward(nodes.total);
                    gb_codec.accumulate(&bc, &mut grads);
                    gb_extractor.accumulate(&be, &mut grads);
                    (bd, "secret_free")
                }
            };

            if kind == "pair" {
                Self::add_breakdown(&mut pair_sum, &nodes);
                pair_n += 1;
            } else {
                Self::add_breakdown(&mut free_sum, &nodes);
                free_n += 1;
            }
        }

        let inv = 1.0 / cfg.batch_size as f64;
        gb_codec.scale(inv);
        gb_hider.scale(inv);
        gb_extractor.scale(inv);

        let norm =
            (gb_codec.sq_norm() + gb_hider.sq_norm() + gb_extractor.sq_norm()).sqrt();
        if norm > GRAD_CLIP_NORM {
            let s = GRAD_CLIP_NORM / norm;
            gb_codec.scale(s);
            gb_hider.scale(s);
            gb_extractor.scale(s);
        }

        self.adam_codec.step(&mut self.codec.params, &gb_codec, cfg.lr_codec);
        self.adam_hider.step(&mut self.hider.params, &gb_hider, cfg.lr_hiding);
        self.adam_extractor.step(&mut self.extractor.params, &gb_extractor, cfg.lr_hiding);

        let mut batch_total = 0.0;
        for (kind, sum, n) in
            [("pair", &pair_sum, pair_n), ("secret_free", &free_sum, free_n)]
        {
            if n == 0 {
                continue;
            }
            for (term, value) in sum.terms() {
                log.rows.push(LossRow {
                    step,
                    kind: kind.to_string(),
                    term: term.to_string(),
                    value: value / n as f64,
                });
            }
            batch_total += sum.total;
        }
        log.rows.push(LossRow {
            step,
            kind: "batch".to_string(),
            term: "total".to_string(),
            value: batch_total / cfg.batch_size as f64,
        });

        self.step += 1;
        Ok(())
    }

    fn check_finite(bd: &LossBreakdown, step: u64, kind: &str) -> Result<()> {
        for (term, value) in bd.terms() {
            if !value.is_finite() {
                return Err(Error::Runtime(format!(
                    "non-finite loss: term '{term}' = {value} at step {step} ({kind} sample)"
                )));
            }
        }
        Ok(())
    }

    fn add_breakdown(sum: &mut LossBreakdown, bd: &LossBreakdown) {
        sum.cover += bd.cover;
        sum.secret += bd.secret;
        sum.perceptual += bd.perceptual;
        sum.kl_cover += bd.kl_cover;
        sum.kl_secret += bd.kl_secret;
        sum.embedding += bd.embedding;
        sum.null += bd.null;
        sum.total += bd.total;
    }

    /// Run `steps` more training steps. When `out_dir` is set and
    /// `checkpoint_every > 0`, periodic checkpoints land there.
    pub fn run(
        &mut self,
        dataset: &[VideoChunk],
        steps: u64,
        log: &mut LossLog,
        out_dir: Option<&Path>,
    ) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let shape = dataset[0].frames.shape();
        for c in dataset {
            if c.frames.shape() != shape {
                return Err(Error::Shape(format!(
                    "dataset chunks disagree: {:?} vs {:?}",
                    shape,
                    c.frames.shape()
                )));
            }
        }
        for _ in 0..steps {
            self.train_step(dataset, log)?;
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.to_checkpoint().save(&dir.join(format!("ckpt_step{}.sckp", self.step)))?;
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = json!({
            "kind": "semcovert.train",
            "step": self.step,
            "cursor": self.cursor,
            "adam_t": {
                "codec": self.adam_codec.t,
                "hider": self.adam_hider.t,
                "extractor": self.adam_extractor.t,
            },
            "config": self.cfg,
            "version": version_string(),
        });
        let mut ck = Checkpoint::new(meta);
        ck.insert_store("codec.", &self.codec.params);
        ck.insert_store("hider.", &self.hider.params);
        ck.insert_store("extractor.", &self.extractor.params);
        for (prefix, store, adam) in [
            ("codec", &self.codec.params, &self.adam_codec),
            ("hider", &self.hider.params, &self.adam_hider),
            ("extractor", &self.extractor.params, &self.adam_extractor),
        ] {
            for (i, (name, _)) in store.iter().enumerate() {
                ck.insert(&format!("adam.{prefix}.{name}.m"), adam.m[i].clone());
                ck.insert(&format!("adam.{prefix}.{name}.v"), adam.v[i].clone());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        if meta["kind"] != "semcovert.train" {
            return Err(Error::Checkpoint(format!(
                "not a trainer checkpoint (kind = {})",
                meta["kind"]
            )));
        }
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config snapshot unreadable: {e}")))?;
        let mut trainer = Self::new(cfg)?;
        ck.load_into_store("codec.", &mut trainer.codec.params)?;
        ck.load_into_store("hider.", &mut trainer.hider.params)?;
        ck.load_into_store("extractor.", &mut trainer.extractor.params)?;
        for (prefix, store, adam) in [
            ("codec", &trainer.codec.params, &mut trainer.adam_codec),
            ("hider", &trainer.hider.params, &mut trainer.adam_hider),
            ("extractor", &trainer.extractor.params, &mut trainer.adam_extractor),
        ] {
            for (i, (name, value)) in store.iter().enumerate() {
                for (suffix, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                    let full = format!("adam.{prefix}.{name}.{suffix}");
                    let tensor = ck
                        .get(&full)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{full}'")))?;
                    if tensor.shape() != value.shape() {
                        return Err(Error::Checkpoint(format!(
                            "tensor '{full}' has shape {:?}, parameter wants {:?}",
                            tensor.shape(),
                            value.shape()
                        )));
                    }
                    *slot = tensor.clone();
                }
            }
            adam.t = meta["adam_t"][prefix].as_u64().unwrap_or(0);
        }
        trainer.step = meta["step"].as_u64().unwrap_or(0);
        trainer.cursor = meta["cursor"].as_u64().unwrap_or(0);
        Ok(trainer)
    }
}

/// Train from scratch for `cfg.steps` steps.
pub fn train(cfg: &TrainConfig, dataset: &[VideoChunk]) -> Result<(Trainer, LossLog)> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = LossLog::default();
    trainer.run(dataset, cfg.steps, &mut log, None)?;
    Ok((trainer, log))
}

/// Continue a checkpointed run; equivalent to never having stopped.
pub fn resume(
    ck: &Checkpoint,
    dataset: &[VideoChunk],
    extra_steps: u64,
) -> Result<(Trainer, LossLog)> {
    let mut trainer = Trainer::from_checkpoint(ck)?;
    let mut log = LossLog::default();
    trainer.run(dataset, extra_steps, &mut log, None)?;
    Ok((trainer, log))
}

pub fn write_run_manifest(
    path: &Path,
    cfg: &TrainConfig,
    final_metrics: serde_json::Value,
) -> Result<()> {
    let doc = json!({
        "config": cfg,
        "version": version_string(),
        "final_metrics": final_metrics,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn tiny_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            lr_codec: 1e-4,
            lr_hiding: 2e-3,
            capacity_ratio: 0.5,
            seed: 11,
            hiding: HidingNetConfig {
                latent_dim: 24,
                depth: 1,
                spatial_kernels: vec![3],
                attention_heads: 4,
            },
            perceptual: PerceptualExtractorConfig { widths: vec![8, 12], seed: 77 },
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(count: usize) -> Vec<VideoChunk> {
        let mut rng = stream(50, 0, Stream::DataGen);
        (0..count)
            .map(|_| {
                VideoChunk::new(ArrayD::from_shape_fn(IxDyn(&[3, 5, 16, 16]), |_| {
                    rng.random_range(0.0..1.0)
                }))
                .unwrap()
            })
            .collect()
    }

    fn probe(codec: &Codec, chunk: &VideoChunk) -> ArrayD<f64> {
        codec.encode(chunk).unwrap().mean
    }

    #[test]
    fn zero_steps_checkpoint_equals_init() {
        let cfg = tiny_cfg(0);
        let init = Trainer::new(cfg.clone()).unwrap();
        let (trained, log) = train(&cfg, &tiny_dataset(4)).unwrap();
        assert!(log.rows.is_empty());
        for id in init.codec.params.ids() {
            assert_eq!(init.codec.params.value(id), trained.codec.params.value(id));
        }
        let ck = trained.to_checkpoint();
        assert_eq!(ck.meta["step"], 0);
    }

    #[test]
    fn fixed_seed_runs_are_bitwise_identical() {
        let cfg = tiny_cfg(2);
        let data = tiny_dataset(4);
        let (t1, l1) = train(&cfg, &data).unwrap();
        let (t2, l2) = train(&cfg, &data).unwrap();
        assert_eq!(l1.to_csv(cfg.seed, "x"), l2.to_csv(cfg.seed, "x"));
        let chunk = &data[0];
        assert_eq!(probe(&t1.codec, chunk), probe(&t2.codec, chunk));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_dataset(5);
        let (full, full_log) = train(&tiny_cfg(4), &data).unwrap();

        let (half, mut half_log) = train(&tiny_cfg(2), &data).unwrap();
        let ck = half.to_checkpoint();
        let (resumed, resumed_log) = resume(&ck, &data, 2).unwrap();
        half_log.rows.extend(resumed_log.rows);

        assert_eq!(
            full_log.to_csv(11, "x"),
            half_log.to_csv(11, "x"),
            "stitched loss log differs from uninterrupted run"
        );
        let chunk = &data[0];
        assert_eq!(probe(&full.codec, chunk), probe(&resumed.codec, chunk));
        let ext_full = full.extractor.params.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>();
        let ext_res = resumed.extractor.params.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>();
        assert_eq!(ext_full, ext_res);
    }

    #[test]
    fn resume_zero_steps_keeps_checkpoint() {
        let data = tiny_dataset(4);
        let (t, _) = train(&tiny_cfg(1), &data).unwrap();
        let ck = t.to_checkpoint();
        let (resumed, log) = resume(&ck, &data, 0).unwrap();
        assert!(log.rows.is_empty());
        let chunk = &data[0];
        assert_eq!(probe(&t.codec, chunk), probe(&resumed.codec, chunk));
        assert_eq!(resumed.step, t.step);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(4);
        let (t, _) = train(&tiny_cfg(2), &data).unwrap();
        let path = dir.path().join("t.sckp");
        t.to_checkpoint().save(&path).unwrap();
        let back = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let chunk = &data[1];
        assert_eq!(probe(&t.codec, chunk), probe(&back.codec, chunk));
        assert_eq!(back.step, t.step);
    }

    #[test]
    fn corrupted_tensor_name_is_reported() {
        let data = tiny_dataset(4);
        let (t, _) = train(&tiny_cfg(1), &data).unwrap();
        let mut ck = t.to_checkpoint();
        ck.remove_namespace("hider.hider.stem");
        let err = match Trainer::from_checkpoint(&ck) {
            Err(e) => e,
            Ok(_) => panic!("load must fail"),
        };
        assert!(err.to_string().contains("hider."), "{err}");
    }

    #[test]
    fn learning_rate_groups_separate() {
        // one Adam step moves each group by roughly its own learning rate
        let cfg = TrainConfig { capacity_ratio: 1.0, ..tiny_cfg(1) };
        let init = Trainer::new(cfg.clone()).unwrap();
        let (t, _) = train(&cfg, &tiny_dataset(4)).unwrap();
        let max_delta = |a: &ParamStore, b: &ParamStore| {
            a.ids()
                .map(|id| {
                    a.value(id)
                        .iter()
                        .zip(b.value(id).iter())
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0f64, f64::max)
                })
                .fold(0.0f64, f64::max)
        };
        let d_codec = max_delta(&init.codec.params, &t.codec.params);
        let d_hider = max_delta(&init.hider.params, &t.hider.params);
        assert!((d_codec / cfg.lr_codec - 1.0).abs() < 0.05, "codec delta {d_codec}");
        assert!((d_hider / cfg.lr_hiding - 1.0).abs() < 0.05, "hider delta {d_hider}");
    }

    #[test]
    fn secret_free_batches_leave_hider_untouched() {
        let cfg = TrainConfig { capacity_ratio: 0.0, ..tiny_cfg(2) };
        let init = Trainer::new(cfg.clone()).unwrap();
        let (t, log) = train(&cfg, &tiny_dataset(4)).unwrap();
        for id in init.hider.params.ids() {
            assert_eq!(init.hider.params.value(id), t.hider.params.value(id));
        }
        // but the codec and extractor did move
        let moved = init
            .codec
            .params
            .ids()
            .any(|id| init.codec.params.value(id) != t.codec.params.value(id));
        assert!(moved);
        assert!(log.rows.iter().all(|r| r.kind != "pair"));
    }

    #[test]
    fn nan_weights_abort_naming_term() {
        let cfg = tiny_cfg(1);
        let mut trainer = Trainer::new(cfg).unwrap();
        let poisoned = trainer
            .codec
            .params
            .value(trainer.codec.params.id("enc.s1.w").unwrap())
            .mapv(|_| f64::NAN);
        trainer.codec.params.set_value("enc.s1.w", poisoned).unwrap();
        let mut log = LossLog::default();
        let err = match trainer.run(&tiny_dataset(2), 1, &mut log, None) {
            Err(e) => e,
            Ok(_) => panic!("nan must abort"),
        };
        let msg = err.to_string();
        assert!(msg.contains("non-finite loss"), "{msg}");
        assert!(msg.contains("cover"), "{msg}");
    }

    #[test]
    fn loss_csv_has_header_and_metadata() {
        let (_, log) = train(&tiny_cfg(1), &tiny_dataset(4)).unwrap();
        let csv = log.to_csv(11, &version_string());
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# seed=11"));
        assert_eq!(lines.next().unwrap(), "step,kind,term,value");
        assert!(csv.contains(",batch,total,"));
    }
}
