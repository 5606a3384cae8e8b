//! Command-line driver: synthetic data generation, joint training, covert
//! transmission, metric sweeps, eavesdropper evaluation, and attacks.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Axis;
use serde_json::json;

use semcovert::adversary::{
    attack, build_detector_dataset, roc, train_detector, write_roc_csv, AttackConfig,
    AttackMethod, AttackReport, DetectorDataset,
};
use semcovert::channel::denormalize;
use semcovert::checkpoint::Checkpoint;
use semcovert::codec::LatentSample;
use semcovert::config::{load_experiment, ExperimentConfig};
use semcovert::data::{
    chunk_video, generate_synthetic, load_frames, save_frames, SyntheticSceneConfig, VideoChunk,
    VideoTensor,
};
use semcovert::error::{Error, Result};
use semcovert::fvd::{fvd_lite, FvdFeatureNet};
use semcovert::hiding::HidingNetConfig;
use semcovert::metrics::{psnr, report, ssim, write_report_csv, write_report_json, FVD_FEATURE_SEED};
use semcovert::pipeline::{
    load_authorized_receiver, load_codec, load_extractor, load_hider, load_regular_receiver,
    load_sender, run_transmission, TransmitConfig,
};
use semcovert::plot::{group_series, write_svg, PlotSpec};
use semcovert::rng::{stream, Stream};
use semcovert::scheduler::hidden_count;
use semcovert::trainer::{version_string, write_run_manifest, LossLog, Trainer};

const OUT_ENV: &str = "SEMCOVERT_OUT";

#[derive(Parser)]
#[command(name = "semcovert", version, about = "Semantic-level covert video transmission")]
struct Cli {
    /// Flat JSON config file with dotted keys (e.g. "trainer.steps").
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable, wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output root; also settable via SEMCOVERT_OUT (this flag wins).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic videos as frame directories.
    GenData {
        /// Target directory; defaults to <out_dir>/data.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Jointly train codec, hiding model, and extractor.
    Train {
        /// Frame-directory dataset root; defaults to <out_dir>/data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Steps to run now; defaults to trainer.steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Transmit one cover video, optionally hiding a secret video.
    Transmit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cover video frame directory.
        #[arg(long)]
        cover: PathBuf,
        /// Secret video frame directory.
        #[arg(long)]
        secret: Option<PathBuf>,
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        capacity_ratio: Option<f64>,
    },
    /// Sweep the SNR x capacity-ratio grid; emit CSV and plots.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the eavesdropper detector; emit ROC curves per ratio.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run FGSM and PGD attacks against secret recovery.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Regenerate sweep plots from an existing CSV.
    Report {
        #[arg(long)]
        csv: PathBuf,
        /// Plot directory; defaults to the CSV's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_experiment(cli.config.as_deref(), &cli.set)?;
    if let Ok(env_out) = std::env::var(OUT_ENV) {
        cfg.out_dir = PathBuf::from(env_out);
    }
    if let Some(flag_out) = cli.out_dir {
        cfg.out_dir = flag_out;
    }
    match cli.command {
        Command::GenData { out } => cmd_gen_data(&cfg, out),
        Command::Train { data, resume, steps } => cmd_train(&cfg, data, resume, steps),
        Command::Transmit { checkpoint, cover, secret, snr_db, capacity_ratio } => {
            cmd_transmit(&cfg, &checkpoint, &cover, secret.as_deref(), snr_db, capacity_ratio)
        }
        Command::Sweep { checkpoint, data } => cmd_sweep(&cfg, &checkpoint, data),
        Command::Detect { checkpoint, data } => cmd_detect(&cfg, &checkpoint, data),
        Command::Attack { checkpoint, data } => cmd_attack(&cfg, &checkpoint, data),
        Command::Report { csv, out } => cmd_report(&csv, out),
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_exists(path, "checkpoint")?;
    Checkpoint::load(path)
}

fn hiding_config_of(ck: &Checkpoint) -> Result<HidingNetConfig> {
    serde_json::from_value(ck.meta["config"]["hiding"].clone()).map_err(|e| {
        Error::Checkpoint(format!("checkpoint does not record a hiding config: {e}"))
    })
}

/// Load every frame directory under `root` (sorted by name) and chunk it.
fn load_dataset(root: &Path, chunk_frames: usize) -> Result<Vec<(String, Vec<VideoChunk>, f64)>> {
    require_exists(root, "dataset directory")?;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    dirs.sort();
    let mut videos = Vec::new();
    for dir in dirs {
        let video = load_frames(&dir)?;
        let rate = video.frame_rate;
        let chunks = chunk_video(&video, chunk_frames)?;
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        videos.push((name, chunks, rate));
    }
    if videos.is_empty() {
        return Err(Error::Config(format!(
            "no frame directories with manifest.json under {}",
            root.display()
        )));
    }
    Ok(videos)
}

fn pooled_chunks(videos: &[(String, Vec<VideoChunk>, f64)]) -> Vec<VideoChunk> {
    videos.iter().flat_map(|(_, chunks, _)| chunks.iter().cloned()).collect()
}

fn concat_chunks(chunks: &[VideoChunk], frame_rate: f64) -> Result<VideoTensor> {
    let views: Vec<_> = chunks.iter().map(|c| c.frames.view()).collect();
    let frames = ndarray::concatenate(Axis(1), &views)
        .map_err(|e| Error::Shape(format!("cannot concatenate chunks: {e}")))?;
    VideoTensor::new(frames, frame_rate)
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn cmd_gen_data(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let root = out.unwrap_or_else(|| cfg.out_dir.join("data"));
    std::fs::create_dir_all(&root)?;
    let mut names = Vec::new();
    for i in 0..cfg.data.videos {
        let scene = SyntheticSceneConfig {
            num_shapes: cfg.data.shapes,
            resolution: (cfg.data.height, cfg.data.width),
            length: cfg.data.frames,
            seed: cfg.seed.wrapping_add(i as u64),
            ..SyntheticSceneConfig::default()
        };
        let video = generate_synthetic(&scene)?;
        let name = format!("video{i:03}");
        save_frames(&root.join(&name), &video)?;
        names.push(name);
    }
    let manifest = json!({
        "seed": cfg.seed,
        "version": version_string(),
        "videos": names,
        "frames": cfg.data.frames,
        "resolution": [cfg.data.height, cfg.data.width],
    });
    std::fs::write(root.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} videos of {} frames at {}x{} to {}",
        cfg.data.videos,
        cfg.data.frames,
        cfg.data.height,
        cfg.data.width,
        root.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &ExperimentConfig,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
    steps: Option<u64>,
) -> Result<()> {
    let data_dir = data.unwrap_or_else(|| cfg.out_dir.join("data"));
    let dataset = pooled_chunks(&load_dataset(&data_dir, cfg.data.chunk_frames)?);
    let out = cfg.out_dir.join("train");
    std::fs::create_dir_all(&out)?;

    let mut trainer = match resume {
        Some(ck_path) => {
            let trainer = Trainer::from_checkpoint(&load_checkpoint(&ck_path)?)?;
            println!("resuming from step {}", trainer.step);
            trainer
        }
        None => Trainer::new(cfg.train.clone())?,
    };
    let total = steps.unwrap_or(cfg.train.steps);

    let mut log = LossLog::default();
    let mut remaining = total;
    let mut outcome = Ok(());
    while remaining > 0 {
        let slice = remaining.min(100);
        if let Err(e) = trainer.run(&dataset, slice, &mut log, Some(&out)) {
            outcome = Err(e);
            break;
        }
        remaining -= slice;
        let last_total = log
            .rows
            .iter()
            .rev()
            .find(|r| r.kind == "batch")
            .map(|r| r.value)
            .unwrap_or(f64::NAN);
        println!("step {}/{} batch loss {last_total:.4}", trainer.step, trainer.step + remaining);
    }
    // the loss log doubles as the diagnostic trail on aborts
    log.write(&out.join("loss.csv"), cfg.seed, &version_string())?;
    outcome?;

    let ck_path = out.join("checkpoint.sckp");
    trainer.to_checkpoint().save(&ck_path)?;
    let final_total = log.rows.iter().rev().find(|r| r.kind == "batch").map(|r| r.value);
    write_run_manifest(
        &out.join("run_manifest.json"),
        &trainer.cfg,
        json!({ "steps_completed": trainer.step, "final_batch_loss": final_total }),
    )?;
    println!("checkpoint at {}", ck_path.display());
    Ok(())
}

fn cmd_transmit(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    cover: &Path,
    secret: Option<&Path>,
    snr_db: Option<f64>,
    capacity_ratio: Option<f64>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let hcfg = hiding_config_of(&ck)?;
    let sender = load_sender(&ck, hcfg.clone())?;
    let regular = load_regular_receiver(&ck)?;
    let authorized = load_authorized_receiver(&ck, hcfg)?;

    require_exists(cover, "cover video")?;
    let cover_video = load_frames(cover)?;
    let cover_chunks = chunk_video(&cover_video, cfg.data.chunk_frames)?;
    let secret_chunks = match secret {
        Some(dir) => {
            require_exists(dir, "secret video")?;
            Some(chunk_video(&load_frames(dir)?, cfg.data.chunk_frames)?)
        }
        None => None,
    };

    let tc = TransmitConfig {
        snr_db: snr_db.unwrap_or(cfg.transmit.snr_db),
        capacity_ratio: capacity_ratio.unwrap_or(cfg.transmit.capacity_ratio),
        seed: cfg.seed,
    };
    let result = run_transmission(
        &sender,
        &regular,
        &authorized,
        &cover_chunks,
        secret_chunks.as_deref(),
        &tc,
    )?;
    if secret_chunks.is_some() && result.sent.carried == 0 {
        println!(
            "warning: capacity ratio {} selects no chunks; the secret was not transmitted",
            tc.capacity_ratio
        );
    }

    let out = cfg.out_dir.join("transmit");
    std::fs::create_dir_all(&out)?;
    let rate = cover_video.frame_rate;
    save_frames(&out.join("regular_cover"), &concat_chunks(&result.regular_covers, rate)?)?;
    save_frames(&out.join("authorized_cover"), &concat_chunks(&result.authorized.covers, rate)?)?;
    for (idx, chunk) in &result.authorized.secrets {
        save_frames(
            &out.join(format!("authorized_secret_chunk{idx:03}")),
            &concat_chunks(std::slice::from_ref(chunk), rate)?,
        )?;
    }

    if secret_chunks.is_none() && !result.authorized.nulls.is_empty() {
        let mut abs = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        for (_, chunk) in &result.authorized.nulls {
            abs += chunk.frames.iter().map(|v| v.abs()).sum::<f64>();
            sq += chunk.frames.iter().map(|v| v * v).sum::<f64>();
            n += chunk.frames.len();
        }
        let stats = json!({
            "seed": cfg.seed,
            "mean_abs_pixel": abs / n as f64,
            "mse_to_zero": sq / n as f64,
        });
        std::fs::write(out.join("null_stats.json"), serde_json::to_string_pretty(&stats)?)?;
        println!(
            "no secret supplied; extractor null decode: mean |pixel| = {:.5}, mse to zero = {:.6}",
            abs / n as f64,
            sq / n as f64
        );
    }

    let cover_pairs: Vec<(VideoChunk, VideoChunk)> =
        cover_chunks.iter().cloned().zip(result.regular_covers.iter().cloned()).collect();
    let secret_pairs: Vec<(VideoChunk, VideoChunk)> = match &secret_chunks {
        Some(orig) => orig
            .iter()
            .cloned()
            .zip(result.authorized.secrets.iter().map(|(_, c)| c.clone()))
            .collect(),
        None => Vec::new(),
    };
    let latent_pairs: Vec<(LatentSample, LatentSample)> = result
        .sent
        .signals
        .iter()
        .zip(&result.received)
        .zip(&result.sent.scales)
        .map(|((sent_sig, recv_sig), &scale)| {
            Ok((
                denormalize(sent_sig, scale, &result.sent.latent_shape)?,
                denormalize(recv_sig, scale, &result.sent.latent_shape)?,
            ))
        })
        .collect::<Result<_>>()?;

    match report(&cover_pairs, &secret_pairs, &latent_pairs) {
        Ok(rep) => {
            write_report_csv(&out.join("metrics.csv"), &rep, cfg.seed, &version_string())?;
            write_report_json(&out.join("metrics.json"), &rep, cfg.seed, &version_string())?;
            println!(
                "snr {} dB, r {}: cover+secret psnr {:.2} dB, ssim {:.4}, fvd {:.4}",
                tc.snr_db, tc.capacity_ratio, rep.psnr, rep.ssim, rep.fvd_lite
            );
        }
        Err(e) => println!("metric report skipped: {e}"),
    }
    println!("outputs in {}", out.display());
    Ok(())
}

#[derive(Debug, Clone)]
struct SweepRow {
    snr_db: f64,
    r: f64,
    video: String,
    psnr_cover: f64,
    ssim_cover: f64,
    psnr_secret: f64,
    ssim_secret: f64,
    fvd_cover: f64,
    fvd_secret: f64,
}

const SWEEP_HEADER: &str =
    "snr_db,r,video,psnr_cover,ssim_cover,psnr_secret,ssim_secret,fvd_cover,fvd_secret";

fn cmd_sweep(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let hcfg = hiding_config_of(&ck)?;
    let sender = load_sender(&ck, hcfg.clone())?;
    let regular = load_regular_receiver(&ck)?;
    let authorized = load_authorized_receiver(&ck, hcfg)?;

    let data_dir = data.unwrap_or_else(|| cfg.out_dir.join("data"));
    let videos = load_dataset(&data_dir, cfg.data.chunk_frames)?;
    if videos.len() < 2 {
        return Err(Error::Config("sweep needs at least two videos (covers and secrets)".into()));
    }

    let out = cfg.out_dir.join("sweep");
    std::fs::create_dir_all(&out)?;
    let net = FvdFeatureNet::new(FVD_FEATURE_SEED);
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut point_index = 0u64;
    for &r in &cfg.sweep.capacity_ratios {
        for &snr_db in &cfg.sweep.snr_db {
            let mut point_rows = Vec::new();
            let mut cover_recons = Vec::new();
            let mut cover_origs = Vec::new();
            let mut secret_recons = Vec::new();
            let mut secret_origs = Vec::new();
            for (v, (name, cover_chunks, _)) in videos.iter().enumerate() {
                let donor = &videos[(v + 1) % videos.len()].1;
                let m = hidden_count(cover_chunks.len(), r);
                let secrets = &donor[..m.min(donor.len())];
                let tc = TransmitConfig {
                    snr_db,
                    capacity_ratio: r,
                    seed: cfg.seed.wrapping_add(point_index).wrapping_add((v as u64) << 20),
                };
                let result = run_transmission(
                    &sender,
                    &regular,
                    &authorized,
                    cover_chunks,
                    (m > 0).then_some(secrets),
                    &tc,
                )?;
                let mut p_c = 0.0;
                let mut s_c = 0.0;
                for (orig, recon) in cover_chunks.iter().zip(&result.regular_covers) {
                    p_c += psnr(recon, orig)?;
                    s_c += ssim(recon, orig)?;
                    cover_recons.push(recon.clone());
                    cover_origs.push(orig.clone());
                }
                p_c /= cover_chunks.len() as f64;
                s_c /= cover_chunks.len() as f64;
                let (mut p_s, mut s_s) = (f64::NAN, f64::NAN);
                if result.sent.carried > 0 {
                    let (mut ps, mut ss) = (0.0, 0.0);
                    for (orig, (_, recon)) in
                        secrets.iter().zip(&result.authorized.secrets)
                    {
                        ps += psnr(recon, orig)?;
                        ss += ssim(recon, orig)?;
                        secret_recons.push(recon.clone());
                        secret_origs.push(orig.clone());
                    }
                    p_s = ps / result.sent.carried as f64;
                    s_s = ss / result.sent.carried as f64;
                }
                point_rows.push(SweepRow {
                    snr_db,
                    r,
                    video: name.clone(),
                    psnr_cover: p_c,
                    ssim_cover: s_c,
                    psnr_secret: p_s,
                    ssim_secret: s_s,
                    fvd_cover: f64::NAN,
                    fvd_secret: f64::NAN,
                });
            }
            let fvd_cover = if cover_recons.len() >= 2 {
                fvd_lite(&cover_recons, &cover_origs, &net)?
            } else {
                f64::NAN
            };
            let fvd_secret = if secret_recons.len() >= 2 {
                fvd_lite(&secret_recons, &secret_origs, &net)?
            } else {
                f64::NAN
            };
            for mut row in point_rows {
                row.fvd_cover = fvd_cover;
                row.fvd_secret = fvd_secret;
                rows.push(row);
            }
            point_index += 1;
            println!("swept r={r} snr={snr_db} dB");
        }
    }

    let mut csv = format!("# seed={} version={}\n{SWEEP_HEADER}\n", cfg.seed, version_string());
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.snr_db,
            row.r,
            row.video,
            fmt_metric(row.psnr_cover),
            fmt_metric(row.ssim_cover),
            fmt_metric(row.psnr_secret),
            fmt_metric(row.ssim_secret),
            fmt_metric(row.fvd_cover),
            fmt_metric(row.fvd_secret),
        ));
    }
    let csv_path = out.join("sweep.csv");
    std::fs::write(&csv_path, csv)?;
    sweep_plots(&rows, &out)?;
    println!("{} rows in {}", rows.len(), csv_path.display());
    Ok(())
}

fn sweep_plots(rows: &[SweepRow], out: &Path) -> Result<()> {
    let metrics: [(&str, &str, fn(&SweepRow) -> f64); 6] = [
        ("psnr_cover", "PSNR (dB)", |r| r.psnr_cover),
        ("ssim_cover", "SSIM", |r| r.ssim_cover),
        ("fvd_cover", "FVD-lite", |r| r.fvd_cover),
        ("psnr_secret", "PSNR (dB)", |r| r.psnr_secret),
        ("ssim_secret", "SSIM", |r| r.ssim_secret),
        ("fvd_secret", "FVD-lite", |r| r.fvd_secret),
    ];
    for (name, y_label, get) in metrics {
        // average the per-video rows of each grid point
        let mut acc: std::collections::BTreeMap<(String, u64), (f64, usize)> =
            std::collections::BTreeMap::new();
        for row in rows {
            let v = get(row);
            if v.is_nan() {
                continue;
            }
            let e = acc.entry((format!("r={}", row.r), row.snr_db.to_bits())).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let series = group_series(
            acc.into_iter()
                .map(|((label, bits), (sum, n))| (label, f64::from_bits(bits), sum / n as f64)),
        );
        if series.is_empty() {
            continue;
        }
        let spec = PlotSpec {
            title: format!("{name} vs SNR"),
            x_label: "SNR (dB)".into(),
            y_label: y_label.into(),
            series,
        };
        write_svg(&out.join(format!("{name}.svg")), &spec)?;
    }
    Ok(())
}

fn parse_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != SWEEP_HEADER {
                return Err(Error::Config(format!(
                    "unexpected sweep CSV header '{line}' in {}",
                    path.display()
                )));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Config(format!("malformed sweep CSV row '{line}'")));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Config(format!("bad number '{}' in sweep CSV", fields[i])))
        };
        rows.push(SweepRow {
            snr_db: num(0)?,
            r: num(1)?,
            video: fields[2].to_string(),
            psnr_cover: num(3)?,
            ssim_cover: num(4)?,
            psnr_secret: num(5)?,
            ssim_secret: num(6)?,
            fvd_cover: num(7)?,
            fvd_secret: num(8)?,
        });
    }
    if !saw_header {
        return Err(Error::Config(format!("{} has no sweep CSV header", path.display())));
    }
    Ok(rows)
}

fn cmd_report(csv: &Path, out: Option<PathBuf>) -> Result<()> {
    require_exists(csv, "sweep CSV")?;
    let rows = parse_sweep_csv(csv)?;
    if rows.is_empty() {
        return Err(Error::Config(format!("{} has no data rows", csv.display())));
    }
    let out = match out {
        Some(dir) => dir,
        None => csv
            .parent()
            .map(Path::to_path_buf)
            .ok_or_else(|| Error::Config("cannot infer an output directory".into()))?,
    };
    std::fs::create_dir_all(&out)?;
    sweep_plots(&rows, &out)?;
    println!("plots regenerated in {}", out.display());
    Ok(())
}

fn split_dataset(ds: &DetectorDataset) -> (DetectorDataset, DetectorDataset) {
    let mut train = DetectorDataset { clips: Vec::new(), labels: Vec::new(), carrying: Vec::new() };
    let mut test = DetectorDataset { clips: Vec::new(), labels: Vec::new(), carrying: Vec::new() };
    for i in 0..ds.len() {
        let half = if i % 2 == 0 { &mut train } else { &mut test };
        half.clips.push(ds.clips[i].clone());
        half.labels.push(ds.labels[i]);
        half.carrying.push(ds.carrying[i]);
    }
    (train, test)
}

fn cmd_detect(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let sender = load_sender(&ck, hiding_config_of(&ck)?)?;
    let data_dir = data.unwrap_or_else(|| cfg.out_dir.join("data"));
    let chunks = pooled_chunks(&load_dataset(&data_dir, cfg.data.chunk_frames)?);
    let out = cfg.out_dir.join("detect");
    std::fs::create_dir_all(&out)?;

    let mut points = Vec::new();
    for (i, &r) in cfg.detect.r_grid.iter().enumerate() {
        let ds = build_detector_dataset(
            &sender,
            &chunks,
            r,
            cfg.detect.snr_db,
            cfg.detect.dataset_size,
            cfg.seed.wrapping_add(i as u64),
        )?;
        let (train_half, test_half) = split_dataset(&ds);
        let det = train_detector(&train_half, &cfg.detect.detector_config(r, cfg.seed))?;
        let curve = roc(&det.score_all(&test_half.clips)?, &test_half.labels)?;
        write_roc_csv(&out.join(format!("roc_r{r}.csv")), &curve, r, cfg.detect.snr_db, cfg.seed)?;
        println!("r={r}: auc {:.4} over {} held-out clips", curve.auc, test_half.len());
        points.push(json!({ "r": r, "snr_db": cfg.detect.snr_db, "auc": curve.auc }));
    }

    // control: shuffled training labels must erase the signal
    let r_max = cfg
        .detect
        .r_grid
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let ds = build_detector_dataset(
        &sender,
        &chunks,
        r_max,
        cfg.detect.snr_db,
        cfg.detect.dataset_size,
        cfg.seed.wrapping_add(1000),
    )?;
    let (mut train_half, test_half) = split_dataset(&ds);
    let mut rng = stream(cfg.seed, 0, Stream::Eval);
    for i in (1..train_half.labels.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        train_half.labels.swap(i, j);
    }
    let control_auc = match train_detector(&train_half, &cfg.detect.detector_config(r_max, cfg.seed)) {
        Ok(det) => {
            let curve = roc(&det.score_all(&test_half.clips)?, &test_half.labels)?;
            write_roc_csv(&out.join("roc_control.csv"), &curve, r_max, cfg.detect.snr_db, cfg.seed)?;
            curve.auc
        }
        Err(e) => return Err(e),
    };
    println!("shuffled-label control auc {control_auc:.4}");

    let summary = json!({
        "seed": cfg.seed,
        "version": version_string(),
        "points": points,
        "control_auc": control_auc,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn cmd_attack(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let hcfg = hiding_config_of(&ck)?;
    let codec = load_codec(&ck)?;
    let hider = load_hider(&ck, hcfg.clone())?;
    let extractor = load_extractor(&ck, hcfg)?;

    let data_dir = data.unwrap_or_else(|| cfg.out_dir.join("data"));
    let chunks = pooled_chunks(&load_dataset(&data_dir, cfg.data.chunk_frames)?);
    let pairs = (chunks.len() / 2).min(4);
    if pairs == 0 {
        return Err(Error::Config("attack needs at least two chunks (cover + secret)".into()));
    }
    let covers = &chunks[..pairs];
    let secrets = &chunks[pairs..2 * pairs];

    let fgsm_cfg =
        AttackConfig { method: AttackMethod::Fgsm, seed: cfg.seed, ..cfg.attack.clone() };
    let pgd_cfg = AttackConfig { method: AttackMethod::Pgd, ..fgsm_cfg.clone() };
    let snr_db = cfg.transmit.snr_db;
    let fgsm = attack(&codec, &hider, &extractor, covers, secrets, snr_db, &fgsm_cfg)?;
    let pgd = attack(&codec, &hider, &extractor, covers, secrets, snr_db, &pgd_cfg)?;

    let out = cfg.out_dir.join("attack");
    std::fs::create_dir_all(&out)?;
    let mut csv = format!(
        "# seed={} version={} epsilon={} beta={} pgd_steps={} pgd_step_size={} snr_db={snr_db}\n\
         method,target,psnr_before,psnr_after,delta_psnr,ssim_before,ssim_after,delta_ssim,delta_fvd,linf\n",
        cfg.seed,
        version_string(),
        cfg.attack.epsilon,
        cfg.attack.cover_penalty_beta,
        cfg.attack.steps,
        cfg.attack.step_size,
    );
    let mut push_rows = |label: &str, rep: &AttackReport| {
        for (target, m) in [("cover", &rep.cover), ("secret", &rep.secret)] {
            csv.push_str(&format!(
                "{label},{target},{},{},{},{},{},{},{},{}\n",
                fmt_metric(m.psnr_before),
                fmt_metric(m.psnr_after),
                fmt_metric(m.delta_psnr()),
                fmt_metric(m.ssim_before),
                fmt_metric(m.ssim_after),
                fmt_metric(m.delta_ssim()),
                fmt_metric(m.delta_fvd().unwrap_or(f64::NAN)),
                fmt_metric(rep.linf),
            ));
        }
    };
    push_rows("fgsm", &fgsm.report);
    push_rows("pgd", &pgd.report);
    std::fs::write(out.join("attack.csv"), csv)?;

    for (label, rep) in [("fgsm", &fgsm.report), ("pgd", &pgd.report)] {
        println!(
            "{label}: cover dPSNR {:+.2} dB, secret dPSNR {:+.2} dB (epsilon {})",
            rep.cover.delta_psnr(),
            rep.secret.delta_psnr(),
            rep.epsilon
        );
    }
    println!("table in {}", out.join("attack.csv").display());
    Ok(())
}
