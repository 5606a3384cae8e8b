//! Experiment configuration: a flat JSON file with dotted section keys,
//! overridable by `--set key=value` flags (the flag wins). Consuming the
//! key map key-by-key means any leftover entry is a typo and is rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::adversary::{AttackConfig, AttackMethod, DetectorConfig};
use crate::error::{Error, Result};
use crate::hiding::HidingNetConfig;
use crate::losses::{LossWeights, PerceptualExtractorConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize)]
pub struct DataConfig {
    pub videos: usize,
    pub frames: usize,
    /// Frames per training/transmission chunk; T = 4k + 1.
    pub chunk_frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransmitOptions {
    pub snr_db: f64,
    pub capacity_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOptions {
    pub snr_db: Vec<f64>,
    pub capacity_ratios: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectOptions {
    pub snr_db: f64,
    pub r_grid: Vec<f64>,
    pub dataset_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl DetectOptions {
    pub fn detector_config(&self, r: f64, seed: u64) -> DetectorConfig {
        DetectorConfig {
            train_snr_db: self.snr_db,
            capacity_ratio: r,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub transmit: TransmitOptions,
    pub sweep: SweepOptions,
    pub detect: DetectOptions,
    pub attack: AttackConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.videos == 0 || self.data.frames == 0 {
            return Err(Error::Config("data.videos and data.frames must be positive".into()));
        }
        for (key, value) in [("data.frames", self.data.frames), ("data.chunk_frames", self.data.chunk_frames)]
        {
            if value % 4 != 1 {
                return Err(Error::Config(format!(
                    "{key} = {value} but chunk lengths must satisfy T = 4k + 1"
                )));
            }
        }
        if self.data.chunk_frames > self.data.frames {
            return Err(Error::Config(format!(
                "chunk length {} exceeds video length {}",
                self.data.chunk_frames, self.data.frames
            )));
        }
        if self.data.height % 8 != 0 || self.data.width % 8 != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} must be divisible by 8",
                self.data.height, self.data.width
            )));
        }
        if self.sweep.snr_db.is_empty() || self.sweep.capacity_ratios.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        if self.detect.r_grid.is_empty() || self.detect.dataset_size == 0 {
            return Err(Error::Config("detect needs a ratio grid and a dataset size".into()));
        }
        self.train.validate()?;
        self.attack.validate()?;
        if !(0.0..=1.0).contains(&self.transmit.capacity_ratio) {
            return Err(Error::Config(format!(
                "transmit.capacity_ratio {} outside [0,1]",
                self.transmit.capacity_ratio
            )));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        FlatConfig::empty().into_experiment().expect("defaults are valid")
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    map: BTreeMap<String, Value>,
}

impl FlatConfig {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not JSON: {e}", path.display())))?;
        let Value::Object(obj) = doc else {
            return Err(Error::Config("config root must be a JSON object".into()));
        };
        let mut map = BTreeMap::new();
        for (k, v) in obj {
            if v.is_object() {
                return Err(Error::Config(format!(
                    "config key '{k}' holds a nested object; use dotted keys like '{k}.field'"
                )));
            }
            map.insert(k, v);
        }
        Ok(Self { map })
    }

    /// Apply a `key=value` override; the value is parsed as JSON when it
    /// looks like some, and kept as a plain string otherwise.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
        if value.is_object() {
            return Err(Error::Config(format!("override '{key}' must be a scalar or list")));
        }
        self.map.insert(key.to_string(), value);
        Ok(())
    }

    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            self.apply_override(p)?;
        }
        Ok(())
    }

    fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => coerce_f64(&v).ok_or_else(|| bad_value(key, &v, "a number")),
        }
    }

    fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => coerce_u64(&v)
                .map(|n| n as usize)
                .ok_or_else(|| bad_value(key, &v, "a nonnegative integer")),
        }
    }

    fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => coerce_u64(&v).ok_or_else(|| bad_value(key, &v, "a nonnegative integer")),
        }
    }

    fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(b),
            Some(Value::String(s)) if s == "true" => Ok(true),
            Some(Value::String(s)) if s == "false" => Ok(false),
            Some(v) => Err(bad_value(key, &v, "a boolean")),
        }
    }

    fn take_string(&mut self, key: &str, default: &str) -> Result<String> {
        match self.map.remove(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s),
            Some(v) => Err(bad_value(key, &v, "a string")),
        }
    }

    fn take_f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.map.remove(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| coerce_f64(v).ok_or_else(|| bad_value(key, v, "a number list")))
                .collect(),
            Some(v) => Err(bad_value(key, &v, "a number list")),
        }
    }

    fn take_usize_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.remove(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    coerce_u64(v)
                        .map(|n| n as usize)
                        .ok_or_else(|| bad_value(key, v, "an integer list"))
                })
                .collect(),
            Some(v) => Err(bad_value(key, &v, "an integer list")),
        }
    }

    /// Consume every known key; anything left over is unknown and rejected.
    pub fn into_experiment(mut self) -> Result<ExperimentConfig> {
        let seed = self.take_u64("seed", 0)?;
        let out_dir = PathBuf::from(self.take_string("out_dir", "runs")?);

        let data = DataConfig {
            videos: self.take_usize("data.videos", 8)?,
            frames: self.take_usize("data.frames", 17)?,
            chunk_frames: self.take_usize("data.chunk_frames", 5)?,
            height: self.take_usize("data.height", 64)?,
            width: self.take_usize("data.width", 64)?,
            shapes: self.take_usize("data.shapes", 3)?,
        };

        let hd = HidingNetConfig::default();
        let hiding = HidingNetConfig {
            latent_dim: self.take_usize("hiding.latent_dim", hd.latent_dim)?,
            depth: self.take_usize("hiding.depth", hd.depth)?,
            spatial_kernels: self.take_usize_list("hiding.spatial_kernels", &hd.spatial_kernels)?,
            attention_heads: self.take_usize("hiding.attention_heads", hd.attention_heads)?,
        };

        let wd = LossWeights::default();
        let weights = LossWeights {
            lambda_c: self.take_f64("weights.cover", wd.lambda_c)?,
            lambda_s: self.take_f64("weights.secret", wd.lambda_s)?,
            lambda_p: self.take_f64("weights.perceptual", wd.lambda_p)?,
            lambda_kl_c: self.take_f64("weights.kl_cover", wd.lambda_kl_c)?,
            lambda_kl_s: self.take_f64("weights.kl_secret", wd.lambda_kl_s)?,
            lambda_e: self.take_f64("weights.embedding", wd.lambda_e)?,
            lambda_n: self.take_f64("weights.null", wd.lambda_n)?,
        };

        let td = TrainConfig::default();
        let train = TrainConfig {
            steps: self.take_u64("trainer.steps", td.steps)?,
            batch_size: self.take_usize("trainer.batch_size", td.batch_size)?,
            lr_codec: self.take_f64("trainer.lr_codec", td.lr_codec)?,
            lr_hiding: self.take_f64("trainer.lr_hiding", td.lr_hiding)?,
            snr_db_min: self.take_f64("trainer.snr_db_min", td.snr_db_min)?,
            snr_db_max: self.take_f64("trainer.snr_db_max", td.snr_db_max)?,
            capacity_ratio: self.take_f64("trainer.capacity_ratio", td.capacity_ratio)?,
            seed,
            deterministic: self.take_bool("trainer.deterministic", td.deterministic)?,
            checkpoint_every: self.take_u64("trainer.checkpoint_every", td.checkpoint_every)?,
            hiding,
            weights,
            perceptual: PerceptualExtractorConfig {
                seed: self.take_u64("perceptual.seed", PerceptualExtractorConfig::default().seed)?,
                ..PerceptualExtractorConfig::default()
            },
        };

        let transmit = TransmitOptions {
            snr_db: self.take_f64("transmit.snr_db", 20.0)?,
            capacity_ratio: self.take_f64("transmit.capacity_ratio", 0.5)?,
        };

        let sweep = SweepOptions {
            snr_db: self.take_f64_list("sweep.snr_db", &[5.0, 10.0, 15.0, 20.0, 25.0, 30.0])?,
            capacity_ratios: self.take_f64_list("sweep.capacity_ratios", &[0.2, 0.5, 1.0])?,
        };

        let dd = DetectorConfig::default();
        let detect = DetectOptions {
            snr_db: self.take_f64("detect.snr_db", 30.0)?,
            r_grid: self.take_f64_list("detect.r_grid", &[0.2, 1.0])?,
            dataset_size: self.take_usize("detect.dataset_size", 120)?,
            epochs: self.take_usize("detect.epochs", dd.epochs)?,
            batch_size: self.take_usize("detect.batch_size", dd.batch_size)?,
            lr: self.take_f64("detect.lr", dd.lr)?,
        };

        let ad = AttackConfig::default();
        let attack = AttackConfig {
            method: self.take_string("attack.method", "fgsm")?.parse::<AttackMethod>()?,
            epsilon: self.take_f64("attack.epsilon", ad.epsilon)?,
            steps: self.take_usize("attack.steps", 10)?,
            step_size: self.take_f64("attack.step_size", 0.0025)?,
            cover_penalty_beta: self.take_f64("attack.beta", ad.cover_penalty_beta)?,
            seed,
        };

        if let Some(key) = self.map.keys().next() {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        Ok(ExperimentConfig { seed, out_dir, data, train, transmit, sweep, detect, attack })
    }
}

fn coerce_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

fn coerce_u64(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

fn bad_value(key: &str, v: &Value, want: &str) -> Error {
    Error::Config(format!("config key '{key}' wants {want}, got {v}"))
}

/// Load a config file when given, then apply `--set` overrides in order.
pub fn load_experiment(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut flat = match path {
        Some(p) => FlatConfig::from_file(p)?,
        None => FlatConfig::empty(),
    };
    flat.apply_overrides(overrides)?;
    let cfg = flat.into_experiment()?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_config_yields_defaults() {
        let cfg = load_experiment(None, &[]).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.train.steps, TrainConfig::default().steps);
        assert_eq!(cfg.train.hiding.latent_dim, 96);
        assert_eq!(cfg.data.height, 64);
        assert_eq!(cfg.sweep.capacity_ratios, vec![0.2, 0.5, 1.0]);
    }

    #[test]
    fn dotted_keys_reach_every_section() {
        let (_d, path) = write_tmp(
            r#"{
                "seed": 9,
                "trainer.steps": 7,
                "hiding.latent_dim": 24,
                "hiding.spatial_kernels": [3],
                "weights.null": 0.5,
                "sweep.snr_db": [5, 25],
                "detect.r_grid": [1.0],
                "attack.method": "pgd",
                "data.frames": 9
            }"#,
        );
        let cfg = load_experiment(Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.hiding.latent_dim, 24);
        assert_eq!(cfg.train.hiding.spatial_kernels, vec![3]);
        assert_eq!(cfg.train.weights.lambda_n, 0.5);
        assert_eq!(cfg.sweep.snr_db, vec![5.0, 25.0]);
        assert_eq!(cfg.detect.r_grid, vec![1.0]);
        assert_eq!(cfg.attack.method, AttackMethod::Pgd);
        assert_eq!(cfg.data.frames, 9);
    }

    #[test]
    fn flag_override_beats_file() {
        let (_d, path) = write_tmp(r#"{"trainer.steps": 7, "transmit.snr_db": 10}"#);
        let cfg = load_experiment(
            Some(&path),
            &["trainer.steps=9".into(), "transmit.snr_db=25.5".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 9);
        assert_eq!(cfg.transmit.snr_db, 25.5);
    }

    #[test]
    fn string_values_coerce_and_plain_strings_stay() {
        let mut flat = FlatConfig::empty();
        flat.apply_override("trainer.steps=2000").unwrap();
        flat.apply_override("trainer.deterministic=true").unwrap();
        flat.apply_override("attack.method=pgd").unwrap();
        flat.apply_override("out_dir=/tmp/x").unwrap();
        let cfg = flat.into_experiment().unwrap();
        assert_eq!(cfg.train.steps, 2000);
        assert!(cfg.train.deterministic);
        assert_eq!(cfg.attack.method, AttackMethod::Pgd);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let (_d, path) = write_tmp(r#"{"trainer.stesp": 7}"#);
        let err = load_experiment(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("trainer.stesp"), "{err}");
    }

    #[test]
    fn nested_objects_are_rejected_with_advice() {
        let (_d, path) = write_tmp(r#"{"trainer": {"steps": 7}}"#);
        let err = load_experiment(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("dotted"), "{err}");
    }

    #[test]
    fn malformed_override_is_rejected() {
        let mut flat = FlatConfig::empty();
        assert!(flat.apply_override("trainer.steps").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(load_experiment(None, &["data.frames=8".into()]).is_err());
        assert!(load_experiment(None, &["data.height=63".into()]).is_err());
        assert!(load_experiment(None, &["sweep.snr_db=[]".into()]).is_err());
        assert!(load_experiment(None, &["attack.epsilon=0".into()]).is_err());
        assert!(load_experiment(None, &["trainer.capacity_ratio=1.5".into()]).is_err());
    }
}
