//! Quality and similarity metrics: PSNR, SSIM, MSE, cosine similarity,
//! 1-D Wasserstein distance, and the aggregate report with CSV/JSON output.

use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::codec::LatentSample;
use crate::data::VideoChunk;
use crate::error::{Error, Result};
use crate::fvd::{fvd_lite, FvdFeatureNet};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Fixed seed of the FVD-lite feature network, recorded in every report.
pub const FVD_FEATURE_SEED: u64 = 42;

pub fn mse(x: &ArrayD<f64>, y: &ArrayD<f64>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "mse shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.len().max(1) as f64;
    Ok(x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// −10·log10(MSE) at peak 1.0, capped at 100 dB for identical inputs.
pub fn psnr(x: &VideoChunk, y: &VideoChunk) -> Result<f64> {
    let m = mse(&x.frames, &y.frames)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode Gaussian filter.
fn gauss_valid(img: &ArrayView2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = Array2::zeros((ho, w));
    for i in 0..ho {
        for j in 0..w {
            let mut acc = 0.0;
            for (d, kv) in k.iter().enumerate() {
                acc += kv * img[[i + d, j]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((ho, wo));
    for i in 0..ho {
        for j in 0..wo {
            let mut acc = 0.0;
            for (d, kv) in k.iter().enumerate() {
                acc += kv * rows[[i, j + d]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn ssim_frame(x: &ArrayView2<f64>, y: &ArrayView2<f64>, k: &[f64], c1: f64, c2: f64) -> f64 {
    let mu_x = gauss_valid(x, k);
    let mu_y = gauss_valid(y, k);
    let xx = gauss_valid(&x.mapv(|v| v * v).view(), k);
    let yy = gauss_valid(&y.mapv(|v| v * v).view(), k);
    let xy = gauss_valid(&(x * y).view(), k);
    let mut acc = 0.0;
    for ((i, j), mx) in mu_x.indexed_iter() {
        let my = mu_y[[i, j]];
        let sx = xx[[i, j]] - mx * mx;
        let sy = yy[[i, j]] - my * my;
        let sxy = xy[[i, j]] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
            / ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
    acc / mu_x.len() as f64
}

/// Mean local SSIM over a Gaussian window, per frame and channel.
pub fn ssim_with(
    x: &VideoChunk,
    y: &VideoChunk,
    window: usize,
    sigma: f64,
    c1: f64,
    c2: f64,
) -> Result<f64> {
    let (xs, ys) = (x.frames.shape(), y.frames.shape());
    if xs != ys {
        return Err(Error::Shape(format!("ssim shapes differ: {xs:?} vs {ys:?}")));
    }
    let (c, t, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if h < window || w < window {
        return Err(Error::Shape(format!(
            "frame {h}x{w} smaller than ssim window {window}"
        )));
    }
    let k = gaussian_kernel(window, sigma);
    let x4 = x.frames.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let y4 = y.frames.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let mut acc = 0.0;
    for ci in 0..c {
        for ti in 0..t {
            let xf = x4.index_axis(ndarray::Axis(0), ci);
            let xf = xf.index_axis(ndarray::Axis(0), ti);
            let yf = y4.index_axis(ndarray::Axis(0), ci);
            let yf = yf.index_axis(ndarray::Axis(0), ti);
            acc += ssim_frame(&xf, &yf, &k, c1, c2);
        }
    }
    Ok(acc / (c * t) as f64)
}

pub fn ssim(x: &VideoChunk, y: &VideoChunk) -> Result<f64> {
    ssim_with(x, y, SSIM_WINDOW, SSIM_SIGMA, SSIM_C1, SSIM_C2)
}

/// ⟨a,b⟩ / (‖a‖·‖b‖) over flattened latents.
pub fn cosine_similarity(a: &LatentSample, b: &LatentSample) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::Shape(format!(
            "cosine shapes differ: {:?} vs {:?}",
            a.values.shape(),
            b.values.shape()
        )));
    }
    let dot: f64 = a.values.iter().zip(b.values.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Config("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Exact 1-D W1 between equal-size empirical distributions: mean absolute
/// difference of sorted values.
pub fn wasserstein_1d(a: &LatentSample, b: &LatentSample) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::Shape(format!(
            "wasserstein element counts differ: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let mut av: Vec<f64> = a.values.iter().copied().collect();
    let mut bv: Vec<f64> = b.values.iter().copied().collect();
    av.sort_by(f64::total_cmp);
    bv.sort_by(f64::total_cmp);
    let n = av.len().max(1) as f64;
    Ok(av.iter().zip(bv.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub cosine: f64,
    pub wasserstein: f64,
    pub fvd_lite: f64,
}

impl MetricReport {
    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("mse", self.mse),
            ("cosine", self.cosine),
            ("wasserstein", self.wasserstein),
            ("fvd_lite", self.fvd_lite),
        ]
    }
}

/// Aggregate all metrics over aligned (reconstruction, reference) pairs.
/// Pixel metrics average over cover and secret pairs together; latent
/// metrics average over latent pairs; FVD-lite compares the pooled
/// reconstruction set against the pooled reference set.
pub fn report(
    cover_pairs: &[(VideoChunk, VideoChunk)],
    secret_pairs: &[(VideoChunk, VideoChunk)],
    latent_pairs: &[(LatentSample, LatentSample)],
) -> Result<MetricReport> {
    let video_pairs: Vec<&(VideoChunk, VideoChunk)> =
        cover_pairs.iter().chain(secret_pairs.iter()).collect();
    if video_pairs.is_empty() || latent_pairs.is_empty() {
        return Err(Error::Config("metric report needs video and latent pairs".into()));
    }
    if video_pairs.len() < 2 {
        return Err(Error::Config("fvd_lite needs at least 2 video pairs".into()));
    }
    let n = video_pairs.len() as f64;
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    let mut mse_acc = 0.0;
    for (recon, reference) in &video_pairs {
        psnr_acc += psnr(recon, reference)?;
        ssim_acc += ssim(recon, reference)?;
        mse_acc += mse(&recon.frames, &reference.frames)?;
    }
    let m = latent_pairs.len() as f64;
    let mut cos_acc = 0.0;
    let mut w_acc = 0.0;
    for (a, b) in latent_pairs {
        cos_acc += cosine_similarity(a, b)?;
        w_acc += wasserstein_1d(a, b)?;
    }
    let net = FvdFeatureNet::new(FVD_FEATURE_SEED);
    let recons: Vec<VideoChunk> = video_pairs.iter().map(|(r, _)| r.clone()).collect();
    let refs: Vec<VideoChunk> = video_pairs.iter().map(|(_, t)| t.clone()).collect();
    let fvd = fvd_lite(&recons, &refs, &net)?;
    Ok(MetricReport {
        psnr: psnr_acc / n,
        ssim: ssim_acc / n,
        mse: mse_acc / n,
        cosine: cos_acc / m,
        wasserstein: w_acc / m,
        fvd_lite: fvd,
    })
}

fn provenance_comment(seed: u64, version: &str) -> String {
    format!(
        "# seed={seed} version={version} feature_net_seed={FVD_FEATURE_SEED} \
         ssim_window={SSIM_WINDOW} psnr_cap_db={PSNR_CAP_DB}"
    )
}

pub fn write_report_csv(path: &Path, r: &MetricReport, seed: u64, version: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&provenance_comment(seed, version));
    out.push_str("\nmetric,value\n");
    for (name, value) in r.fields() {
        out.push_str(&format!("{name},{value:.6}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path)?;
    let mut r = MetricReport {
        psnr: f64::NAN,
        ssim: f64::NAN,
        mse: f64::NAN,
        cosine: f64::NAN,
        wasserstein: f64::NAN,
        fvd_lite: f64::NAN,
    };
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("metric,") || line.is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("malformed report row: {line}")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("bad metric value in row: {line}")))?;
        match name {
            "psnr" => r.psnr = v,
            "ssim" => r.ssim = v,
            "mse" => r.mse = v,
            "cosine" => r.cosine = v,
            "wasserstein" => r.wasserstein = v,
            "fvd_lite" => r.fvd_lite = v,
            other => return Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
    if r.fields().iter().any(|(_, v)| v.is_nan()) {
        return Err(Error::Config("report csv missing metrics".into()));
    }
    Ok(r)
}

pub fn write_report_json(path: &Path, r: &MetricReport, seed: u64, version: &str) -> Result<()> {
    let doc = serde_json::json!({
        "seed": seed,
        "version": version,
        "provenance": {
            "feature_net_seed": FVD_FEATURE_SEED,
            "ssim_window": SSIM_WINDOW,
            "psnr_cap_db": PSNR_CAP_DB,
        },
        "metrics": r,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::IxDyn;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn rand_chunk(seed: u64, t: usize, h: usize, w: usize) -> VideoChunk {
        let mut rng = stream(seed, 0, Stream::DataGen);
        VideoChunk::new(ArrayD::from_shape_fn(IxDyn(&[3, t, h, w]), |_| rng.random_range(0.0..1.0)))
            .unwrap()
    }

    fn latent(values: Vec<f64>) -> LatentSample {
        let n = values.len();
        LatentSample { values: ArrayD::from_shape_vec(IxDyn(&[n]), values).unwrap() }
    }

    #[test]
    fn psnr_oracle_values() {
        let x = rand_chunk(1, 5, 16, 16);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);

        let y = VideoChunk::new(x.frames.mapv(|v| (v + 0.1).min(1.0))).unwrap();
        let m = mse(&x.frames, &y.frames).unwrap();
        let p = psnr(&x, &y).unwrap();
        assert!((p - (-10.0 * m.log10())).abs() < 1e-12);

        // mse 0.01 -> 20 dB, mse 1 -> 0 dB checked on the raw formula
        assert!((-10.0 * 0.01f64.log10() - 20.0).abs() < 1e-12);
        assert!((-10.0 * 1.0f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_and_bounds() {
        let x = rand_chunk(2, 5, 16, 16);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = rand_chunk(3, 5, 16, 16);
        let s = ssim(&x, &y).unwrap();
        assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s));
    }

    #[test]
    fn ssim_constant_offset_matches_luminance_closed_form() {
        let x = VideoChunk::new(ArrayD::from_elem(IxDyn(&[3, 5, 16, 16]), 0.4)).unwrap();
        let y = VideoChunk::new(ArrayD::from_elem(IxDyn(&[3, 5, 16, 16]), 0.5)).unwrap();
        let want = (2.0 * 0.4 * 0.5 + SSIM_C1) / (0.4 * 0.4 + 0.5 * 0.5 + SSIM_C1);
        assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_anticorrelated_stripes_are_nonpositive() {
        let x = VideoChunk::new(ArrayD::from_shape_fn(IxDyn(&[3, 5, 16, 16]), |ix| {
            if ix[2] % 2 == 0 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let y = VideoChunk::new(x.frames.mapv(|v| 1.0 - v)).unwrap();
        assert!(ssim(&x, &y).unwrap() <= 0.0);
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let x = rand_chunk(4, 5, 8, 8);
        assert!(ssim(&x, &x).is_err());
    }

    #[test]
    fn cosine_oracle_values() {
        let a = latent(vec![1.0, 0.0, 0.0]);
        let b = latent(vec![0.0, 1.0, 0.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let neg = latent(vec![-1.0, 0.0, 0.0]);
        assert_eq!(cosine_similarity(&a, &neg).unwrap(), -1.0);
        let zero = latent(vec![0.0, 0.0, 0.0]);
        assert!(cosine_similarity(&a, &zero).is_err());
    }

    #[test]
    fn psnr_and_cosine_are_permutation_covariant() {
        let x = rand_chunk(5, 5, 16, 16);
        let y = rand_chunk(6, 5, 16, 16);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..16).collect();
            p.shuffle(&mut stream(7, 0, Stream::Eval));
            p
        };
        let permute = |c: &VideoChunk| {
            let mut out = c.frames.clone();
            for ci in 0..3 {
                for t in 0..5 {
                    for h in 0..16 {
                        for w in 0..16 {
                            out[[ci, t, h, w]] = c.frames[[ci, t, h, perm[w]]];
                        }
                    }
                }
            }
            VideoChunk::new(out).unwrap()
        };
        let (xp, yp) = (permute(&x), permute(&y));
        assert!((psnr(&x, &y).unwrap() - psnr(&xp, &yp).unwrap()).abs() < 1e-9);
        let a = LatentSample { values: x.frames.clone() };
        let b = LatentSample { values: y.frames.clone() };
        let ap = LatentSample { values: xp.frames.clone() };
        let bp = LatentSample { values: yp.frames.clone() };
        assert!(
            (cosine_similarity(&a, &b).unwrap() - cosine_similarity(&ap, &bp).unwrap()).abs()
                < 1e-12
        );
    }

    #[test]
    fn wasserstein_oracle_values() {
        let a = latent(vec![3.0, 1.0, 2.0]);
        let b = latent(vec![2.0, 3.0, 1.0]);
        assert_eq!(wasserstein_1d(&a, &b).unwrap(), 0.0);

        let z = latent(vec![0.0, 0.0]);
        let o = latent(vec![1.0, 1.0]);
        assert_eq!(wasserstein_1d(&z, &o).unwrap(), 1.0);

        let shifted = latent(vec![3.0 + 0.37, 1.0 + 0.37, 2.0 + 0.37]);
        assert!((wasserstein_1d(&a, &shifted).unwrap() - 0.37).abs() < 1e-12);
    }

    /// Hungarian-style brute force over all assignments for n <= 8.
    fn brute_force_w1(a: &[f64], b: &[f64]) -> f64 {
        fn go(a: &[f64], b: &mut Vec<f64>, used: &mut Vec<bool>, i: usize, acc: f64, best: &mut f64) {
            if acc >= *best {
                return;
            }
            if i == a.len() {
                *best = acc;
                return;
            }
            for j in 0..b.len() {
                if !used[j] {
                    used[j] = true;
                    go(a, b, used, i + 1, acc + (a[i] - b[j]).abs(), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut bv = b.to_vec();
        go(a, &mut bv, &mut vec![false; b.len()], 0, 0.0, &mut best);
        best / a.len() as f64
    }

    #[test]
    fn wasserstein_matches_bruteforce_assignment() {
        let mut rng = stream(8, 0, Stream::Eval);
        for n in [2usize, 4, 6, 8] {
            let av: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let bv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fast = wasserstein_1d(&latent(av.clone()), &latent(bv.clone())).unwrap();
            let slow = brute_force_w1(&av, &bv);
            assert!((fast - slow).abs() < 1e-12, "n={n}: {fast} vs {slow}");
        }
    }

    #[test]
    fn report_matches_per_metric_calls_and_round_trips() {
        let pairs: Vec<(VideoChunk, VideoChunk)> = (0..3)
            .map(|i| (rand_chunk(10 + i, 5, 16, 16), rand_chunk(20 + i, 5, 16, 16)))
            .collect();
        let lat: Vec<(LatentSample, LatentSample)> = (0..2)
            .map(|i| {
                let mut rng = stream(30 + i, 0, Stream::Eval);
                (
                    latent((0..32).map(|_| rng.random_range(-1.0..1.0)).collect()),
                    latent((0..32).map(|_| rng.random_range(-1.0..1.0)).collect()),
                )
            })
            .collect();
        let r = report(&pairs, &[], &lat).unwrap();
        let manual_psnr =
            pairs.iter().map(|(a, b)| psnr(a, b).unwrap()).sum::<f64>() / pairs.len() as f64;
        assert!((r.psnr - manual_psnr).abs() < 1e-12);
        let manual_cos = lat
            .iter()
            .map(|(a, b)| cosine_similarity(a, b).unwrap())
            .sum::<f64>()
            / lat.len() as f64;
        assert!((r.cosine - manual_cos).abs() < 1e-12);

        let r2 = report(&pairs, &[], &lat).unwrap();
        assert_eq!(r, r2);

        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("report.csv");
        write_report_csv(&csv, &r, 7, "test").unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with('#'), "missing metadata comment line");
        assert!(text.contains("metric,value"));
        let back = read_report_csv(&csv).unwrap();
        for ((_, a), (_, b)) in r.fields().iter().zip(back.fields().iter()) {
            assert!((a - b).abs() <= 5e-7, "{a} vs {b}");
        }

        let json = dir.path().join("report.json");
        write_report_json(&json, &r, 7, "test").unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(doc["provenance"]["feature_net_seed"], 42);
    }

    #[test]
    fn report_rejects_empty_inputs() {
        assert!(report(&[], &[], &[]).is_err());
        let one = vec![(rand_chunk(40, 5, 16, 16), rand_chunk(41, 5, 16, 16))];
        let lat = vec![(latent(vec![1.0, 2.0]), latent(vec![0.5, 1.5]))];
        assert!(report(&one, &[], &lat).is_err());
    }
}
