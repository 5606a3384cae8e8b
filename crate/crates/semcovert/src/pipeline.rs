//! End-to-end transmission: sender (encode, schedule, hide, normalize),
//! AWGN channel, and the two receiver roles. The regular receiver owns only
//! a codec; the extractor does not exist on that code path. Evaluation runs
//! use latent means rather than reparameterized samples.

use std::path::Path;

use serde_json::Value;

use crate::channel::{denormalize, power_normalize, transmit, ChannelConfig, ChannelSignal};
use crate::checkpoint::Checkpoint;
use crate::codec::{latent_shape, Codec, LatentSample};
use crate::data::VideoChunk;
use crate::error::{Error, Result};
use crate::hiding::{HidingModel, HidingNetConfig, SecretExtractor};
use crate::rng::{stream, Stream};
use crate::scheduler::{apply_schedule, draw_schedule, HidingSchedule};

pub struct Sender {
    pub codec: Codec,
    pub hider: HidingModel,
}

pub struct RegularReceiver {
    pub codec: Codec,
}

pub struct AuthorizedReceiver {
    pub codec: Codec,
    pub extractor: SecretExtractor,
}

#[derive(Debug, Clone, Copy)]
pub struct TransmitConfig {
    pub snr_db: f64,
    pub capacity_ratio: f64,
    pub seed: u64,
}

/// One session's channel inputs plus the sender-side bookkeeping needed to
/// invert them. `schedule` reflects the slots actually used: when fewer
/// secret chunks than capacity are supplied, it is truncated.
#[derive(Debug, Clone)]
pub struct SentSession {
    pub schedule: HidingSchedule,
    pub signals: Vec<ChannelSignal>,
    pub scales: Vec<f64>,
    pub latent_shape: Vec<usize>,
    pub frames_per_chunk: usize,
    /// Number of selected slots that carry a secret chunk.
    pub carried: usize,
}

impl Sender {
    pub fn new(codec: Codec, hider: HidingModel) -> Self {
        Self { codec, hider }
    }

    /// Encode, draw the hiding schedule, fuse secrets into selected chunks,
    /// and power-normalize per chunk. `seed` drives both the schedule draw
    /// and (by convention, `seed + chunk_index`) the channel noise.
    pub fn send(
        &self,
        cover: &[VideoChunk],
        secret: Option<&[VideoChunk]>,
        capacity_ratio: f64,
        seed: u64,
    ) -> Result<SentSession> {
        if cover.is_empty() {
            return Err(Error::Config("transmission needs at least one cover chunk".into()));
        }
        let shape = cover[0].frames.shape().to_vec();
        for c in cover {
            if c.frames.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "cover chunks disagree: {:?} vs {:?}",
                    shape,
                    c.frames.shape()
                )));
            }
        }
        let t = shape[1];
        let cover_latents: Vec<LatentSample> = cover
            .iter()
            .map(|c| self.codec.encode(c).map(|d| LatentSample { values: d.mean }))
            .collect::<Result<_>>()?;

        let drawn = draw_schedule(
            cover.len(),
            capacity_ratio,
            &mut stream(seed, 0, Stream::Schedule),
        )?;

        let secret = secret.filter(|s| !s.is_empty());
        let (schedule, fused, carried) = match secret {
            None => (
                HidingSchedule { n: drawn.n, indices: Vec::new() },
                cover_latents,
                0,
            ),
            Some(_) if drawn.m() == 0 => {
                // zero capacity: nothing to hide, caller may warn
                (drawn, cover_latents, 0)
            }
            Some(secret_chunks) => {
                if secret_chunks.len() > drawn.m() {
                    return Err(Error::Schedule(format!(
                        "secret spans {} chunks but the schedule capacity is M={} \
                         (N={}, r={capacity_ratio})",
                        secret_chunks.len(),
                        drawn.m(),
                        drawn.n,
                    )));
                }
                let secret_latents: Vec<LatentSample> = secret_chunks
                    .iter()
                    .map(|s| self.codec.encode(s).map(|d| LatentSample { values: d.mean }))
                    .collect::<Result<_>>()?;
                for s in &secret_latents {
                    if s.values.shape() != cover_latents[0].values.shape() {
                        return Err(Error::Shape(format!(
                            "secret latent {:?} does not match cover latent {:?}",
                            s.values.shape(),
                            cover_latents[0].values.shape()
                        )));
                    }
                }
                let effective = HidingSchedule {
                    n: drawn.n,
                    indices: drawn.indices[..secret_latents.len()].to_vec(),
                };
                let fused = apply_schedule(&cover_latents, &secret_latents, &effective, |c, s| {
                    let f = self.hider.hide(c, s).expect("latent shapes validated");
                    LatentSample { values: f.values }
                })?;
                let carried = effective.m();
                (effective, fused, carried)
            }
        };

        let mut signals = Vec::with_capacity(fused.len());
        let mut scales = Vec::with_capacity(fused.len());
        let latent_sh = fused[0].values.shape().to_vec();
        for latent in &fused {
            let (sig, scale) = power_normalize(latent)?;
            signals.push(sig);
            scales.push(scale);
        }
        Ok(SentSession {
            schedule,
            signals,
            scales,
            latent_shape: latent_sh,
            frames_per_chunk: t,
            carried,
        })
    }
}

/// Push every chunk signal through the AWGN channel. Chunk `i` uses noise
/// seed `seed + i`, so chunks are independent and reproducible.
pub fn transmit_session(sent: &SentSession, snr_db: f64, seed: u64) -> Vec<ChannelSignal> {
    sent.signals
        .iter()
        .enumerate()
        .map(|(i, s)| transmit(s, &ChannelConfig { snr_db, seed: seed + i as u64 }))
        .collect()
}

/// Denormalize received chunk signals back into latents.
pub fn recover_latents(
    received: &[ChannelSignal],
    scales: &[f64],
    latent_shape: &[usize],
) -> Result<Vec<LatentSample>> {
    if received.len() != scales.len() {
        return Err(Error::Shape(format!(
            "{} received signals but {} scales",
            received.len(),
            scales.len()
        )));
    }
    received
        .iter()
        .zip(scales.iter())
        .map(|(sig, &scale)| denormalize(sig, scale, latent_shape))
        .collect()
}

impl RegularReceiver {
    pub fn new(codec: Codec) -> Self {
        Self { codec }
    }

    /// Decode the cover video; this path cannot touch an extractor.
    pub fn receive(
        &self,
        received: &[ChannelSignal],
        scales: &[f64],
        latent_shape: &[usize],
        frames_per_chunk: usize,
    ) -> Result<Vec<VideoChunk>> {
        recover_latents(received, scales, latent_shape)?
            .iter()
            .map(|z| self.codec.decode(z, frames_per_chunk))
            .collect()
    }
}

/// What the authorized receiver recovers from one session.
pub struct AuthorizedOutput {
    pub covers: Vec<VideoChunk>,
    /// (1-based cover index, decoded secret chunk), in schedule order.
    pub secrets: Vec<(usize, VideoChunk)>,
    /// Extractor outputs decoded on chunks that carry no secret.
    pub nulls: Vec<(usize, VideoChunk)>,
}

impl AuthorizedReceiver {
    pub fn new(codec: Codec, extractor: SecretExtractor) -> Self {
        Self { codec, extractor }
    }

    /// Decode the cover everywhere and run the extractor on every chunk;
    /// the schedule (shared out of band) says which outputs are secrets.
    pub fn receive(
        &self,
        received: &[ChannelSignal],
        scales: &[f64],
        latent_shape: &[usize],
        frames_per_chunk: usize,
        schedule: &HidingSchedule,
    ) -> Result<AuthorizedOutput> {
        let latents = recover_latents(received, scales, latent_shape)?;
        let mut covers = Vec::with_capacity(latents.len());
        let mut secrets = Vec::new();
        let mut nulls = Vec::new();
        for (pos, z) in latents.iter().enumerate() {
            covers.push(self.codec.decode(z, frames_per_chunk)?);
            let extracted = self.extractor.extract(z)?;
            let decoded = self.codec.decode(&extracted, frames_per_chunk)?;
            let cover_index = pos + 1;
            if schedule.contains(cover_index) {
                secrets.push((cover_index, decoded));
            } else {
                nulls.push((cover_index, decoded));
            }
        }
        Ok(AuthorizedOutput { covers, secrets, nulls })
    }
}

/// Everything both receiver roles produce for one transmission.
pub struct TransmissionResult {
    pub sent: SentSession,
    pub received: Vec<ChannelSignal>,
    pub regular_covers: Vec<VideoChunk>,
    pub authorized: AuthorizedOutput,
}

pub fn run_transmission(
    sender: &Sender,
    regular: &RegularReceiver,
    authorized: &AuthorizedReceiver,
    cover: &[VideoChunk],
    secret: Option<&[VideoChunk]>,
    cfg: &TransmitConfig,
) -> Result<TransmissionResult> {
    let sent = sender.send(cover, secret, cfg.capacity_ratio, cfg.seed)?;
    let received = transmit_session(&sent, cfg.snr_db, cfg.seed);
    let regular_covers = regular.receive(
        &received,
        &sent.scales,
        &sent.latent_shape,
        sent.frames_per_chunk,
    )?;
    let authorized_out = authorized.receive(
        &received,
        &sent.scales,
        &sent.latent_shape,
        sent.frames_per_chunk,
        &sent.schedule,
    )?;
    Ok(TransmissionResult {
        sent,
        received,
        regular_covers,
        authorized: authorized_out,
    })
}

/// Expected latent shape for a chunk geometry, for callers sizing buffers.
pub fn session_latent_shape(t: usize, h: usize, w: usize) -> [usize; 4] {
    latent_shape(t, h, w)
}

pub fn save_system(
    path: &Path,
    codec: &Codec,
    hider: &HidingModel,
    extractor: &SecretExtractor,
    meta: Value,
) -> Result<()> {
    let mut ck = Checkpoint::new(meta);
    ck.insert_store("codec.", &codec.params);
    ck.insert_store("hider.", &hider.params);
    ck.insert_store("extractor.", &extractor.params);
    ck.save(path)
}

pub fn load_codec(ck: &Checkpoint) -> Result<Codec> {
    let mut codec = Codec::new(0);
    ck.load_into_store("codec.", &mut codec.params)?;
    Ok(codec)
}

pub fn load_hider(ck: &Checkpoint, cfg: HidingNetConfig) -> Result<HidingModel> {
    let mut hider = HidingModel::new(0, cfg)?;
    ck.load_into_store("hider.", &mut hider.params)?;
    Ok(hider)
}

pub fn load_extractor(ck: &Checkpoint, cfg: HidingNetConfig) -> Result<SecretExtractor> {
    let mut extractor = SecretExtractor::new(0, cfg)?;
    ck.load_into_store("extractor.", &mut extractor.params)?;
    Ok(extractor)
}

pub fn load_sender(ck: &Checkpoint, cfg: HidingNetConfig) -> Result<Sender> {
    Ok(Sender::new(load_codec(ck)?, load_hider(ck, cfg)?))
}

pub fn load_regular_receiver(ck: &Checkpoint) -> Result<RegularReceiver> {
    Ok(RegularReceiver::new(load_codec(ck)?))
}

pub fn load_authorized_receiver(ck: &Checkpoint, cfg: HidingNetConfig) -> Result<AuthorizedReceiver> {
    Ok(AuthorizedReceiver::new(load_codec(ck)?, load_extractor(ck, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use serde_json::json;

    fn tiny_cfg() -> HidingNetConfig {
        HidingNetConfig {
            latent_dim: 24,
            depth: 1,
            spatial_kernels: vec![3],
            attention_heads: 4,
        }
    }

    fn chunks(seed: u64, count: usize) -> Vec<VideoChunk> {
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

    fn system(seed: u64) -> (Sender, RegularReceiver, AuthorizedReceiver) {
        let cfg = tiny_cfg();
        let sender = Sender::new(Codec::new(seed), HidingModel::new(seed, cfg.clone()).unwrap());
        let regular = RegularReceiver::new(Codec::new(seed));
        let authorized = AuthorizedReceiver::new(
            Codec::new(seed),
            SecretExtractor::new(seed, cfg).unwrap(),
        );
        (sender, regular, authorized)
    }

    #[test]
    fn roundtrip_shapes_and_roles() {
        let (sender, regular, authorized) = system(1);
        let cover = chunks(2, 4);
        let secret = chunks(3, 2);
        let cfg = TransmitConfig { snr_db: 20.0, capacity_ratio: 0.5, seed: 9 };
        let out = run_transmission(&sender, &regular, &authorized, &cover, Some(&secret), &cfg)
            .unwrap();
        assert_eq!(out.sent.schedule.m(), 2);
        assert_eq!(out.sent.carried, 2);
        assert_eq!(out.regular_covers.len(), 4);
        assert_eq!(out.authorized.covers.len(), 4);
        assert_eq!(out.authorized.secrets.len(), 2);
        assert_eq!(out.authorized.nulls.len(), 2);
        for c in &out.regular_covers {
            assert_eq!(c.frames.shape(), &[3, 5, 16, 16]);
        }
        // both roles decode the same cover from the same wire
        for (a, b) in out.regular_covers.iter().zip(out.authorized.covers.iter()) {
            assert_eq!(a.frames, b.frames);
        }
    }

    #[test]
    fn unselected_chunks_carry_pure_cover() {
        let (mut sender, _, _) = system(4);
        // The untrained hider is a pass-through; nudge its output head so
        // selected chunks visibly diverge from the pure-cover signal.
        let id = sender.hider.params.id("hider.proj.w").unwrap();
        sender.hider.params.value_mut(id).fill(0.05);
        let cover = chunks(5, 4);
        let secret = chunks(6, 2);
        let with = sender.send(&cover, Some(&secret), 0.5, 11).unwrap();
        let without = sender.send(&cover, None, 0.5, 11).unwrap();
        for pos in 0..4 {
            let idx = pos + 1;
            if !with.schedule.contains(idx) {
                assert_eq!(with.signals[pos].values, without.signals[pos].values);
                assert_eq!(with.scales[pos], without.scales[pos]);
            } else {
                assert_ne!(with.signals[pos].values, without.signals[pos].values);
            }
        }
    }

    #[test]
    fn noiseless_transmission_is_exact() {
        let (sender, regular, authorized) = system(7);
        let cover = chunks(8, 3);
        let cfg = TransmitConfig { snr_db: f64::INFINITY, capacity_ratio: 0.0, seed: 3 };
        let out = run_transmission(&sender, &regular, &authorized, &cover, None, &cfg).unwrap();
        for (sent, recv) in out.sent.signals.iter().zip(out.received.iter()) {
            assert_eq!(sent.values, recv.values);
        }
        // decode of the sent latent equals the received decode bitwise
        let direct = regular
            .receive(&out.sent.signals, &out.sent.scales, &out.sent.latent_shape, 5)
            .unwrap();
        for (a, b) in direct.iter().zip(out.regular_covers.iter()) {
            assert_eq!(a.frames, b.frames);
        }
    }

    #[test]
    fn oversized_secret_names_capacity() {
        let (sender, _, _) = system(10);
        let cover = chunks(11, 4);
        let secret = chunks(12, 4);
        let err = sender.send(&cover, Some(&secret), 0.5, 13).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("M=2"), "{msg}");
    }

    #[test]
    fn zero_capacity_with_secret_sends_cover_only() {
        let (sender, _, _) = system(14);
        let cover = chunks(15, 3);
        let secret = chunks(16, 1);
        let sent = sender.send(&cover, Some(&secret), 0.0, 17).unwrap();
        assert_eq!(sent.carried, 0);
        let plain = sender.send(&cover, None, 0.0, 17).unwrap();
        for (a, b) in sent.signals.iter().zip(plain.signals.iter()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn partial_secret_truncates_schedule() {
        let (sender, _, _) = system(18);
        let cover = chunks(19, 6);
        let secret = chunks(20, 1);
        let sent = sender.send(&cover, Some(&secret), 0.5, 21).unwrap();
        assert_eq!(sent.carried, 1);
        assert_eq!(sent.schedule.m(), 1);
    }

    #[test]
    fn checkpoint_roles_round_trip_and_regular_needs_no_extractor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("system.sckp");
        let cfg = tiny_cfg();
        let codec = Codec::new(30);
        let hider = HidingModel::new(30, cfg.clone()).unwrap();
        let extractor = SecretExtractor::new(30, cfg.clone()).unwrap();
        save_system(&path, &codec, &hider, &extractor, json!({"step": 0})).unwrap();

        let mut ck = Checkpoint::load(&path).unwrap();
        let loaded = load_codec(&ck).unwrap();
        let probe = chunks(31, 1).remove(0);
        let a = codec.encode(&probe).unwrap();
        let b = loaded.encode(&probe).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.log_var, b.log_var);

        // a stripped checkpoint still serves regular receivers
        ck.remove_namespace("extractor.");
        assert!(load_regular_receiver(&ck).is_ok());
        assert!(load_sender(&ck, cfg.clone()).is_ok());
        let err = match load_authorized_receiver(&ck, cfg) {
            Err(e) => e,
            Ok(_) => panic!("stripped checkpoint must not load an authorized receiver"),
        };
        assert!(err.to_string().contains("extractor."), "{err}");
    }

    #[test]
    fn channel_noise_differs_per_chunk_but_reproduces() {
        let (sender, _, _) = system(40);
        let cover = chunks(41, 2);
        let sent = sender.send(&cover, None, 0.0, 42).unwrap();
        let r1 = transmit_session(&sent, 10.0, 42);
        let r2 = transmit_session(&sent, 10.0, 42);
        for (a, b) in r1.iter().zip(r2.iter()) {
            assert_eq!(a.values, b.values);
        }
        let n1 = &r1[0].values - &sent.signals[0].values;
        let n2 = &r1[1].values - &sent.signals[1].values;
        assert_ne!(n1, n2);
    }
}
