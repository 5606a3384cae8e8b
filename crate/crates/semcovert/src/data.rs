//! Video tensors, synthetic scene generation, frame-directory ingestion,
//! and chunking.
//!
//! Videos are `(3, T, H, W)` tensors with values in [0,1]. On disk a video
//! is a directory of `frames/%06d.png` files plus a `manifest.json`.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{ArrayD, Axis, IxDyn, Slice};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct VideoTensor {
    pub frames: ArrayD<f64>,
    pub frame_rate: f64,
}

impl VideoTensor {
    pub fn new(frames: ArrayD<f64>, frame_rate: f64) -> Result<Self> {
        let s = frames.shape().to_vec();
        if s.len() != 4 || s[0] != CHANNELS {
            return Err(Error::Shape(format!("video must be (3,T,H,W), got {s:?}")));
        }
        if s[1] < 5 {
            return Err(Error::Shape(format!("video needs at least 5 frames, got {}", s[1])));
        }
        if s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(Error::Shape(format!(
                "video H and W must be divisible by 8, got {}x{}",
                s[2], s[3]
            )));
        }
        check_unit_range(&frames)?;
        Ok(Self { frames, frame_rate })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }
}

#[derive(Debug, Clone)]
pub struct VideoChunk {
    pub frames: ArrayD<f64>,
}

impl VideoChunk {
    pub fn new(frames: ArrayD<f64>) -> Result<Self> {
        let s = frames.shape().to_vec();
        if s.len() != 4 || s[0] != CHANNELS {
            return Err(Error::Shape(format!("chunk must be (3,T,H,W), got {s:?}")));
        }
        if s[1] % 4 != 1 {
            return Err(Error::Shape(format!(
                "chunk length must satisfy T = 4k+1, got {}",
                s[1]
            )));
        }
        check_unit_range(&frames)?;
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }
}

fn check_unit_range(frames: &ArrayD<f64>) -> Result<()> {
    for &v in frames.iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Shape(format!("pixel value {v} outside [0,1]")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Circle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub num_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Speed bounds in pixels per frame.
    pub velocity_range: (f64, f64),
    /// (H, W), each divisible by 8.
    pub resolution: (usize, usize),
    pub length: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            num_shapes: 3,
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Circle],
            velocity_range: (0.5, 2.5),
            resolution: (64, 64),
            length: 5,
            seed: 0,
        }
    }
}

struct MovingShape {
    kind: ShapeKind,
    pos: (f64, f64),
    vel: (f64, f64),
    half: (f64, f64),
    color: [f64; 3],
}

/// Render moving shapes over a static low-frequency gradient background.
/// Pure function of the config: the same config always yields the same video.
pub fn generate_synthetic(config: &SyntheticSceneConfig) -> Result<VideoTensor> {
    let (h, w) = config.resolution;
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "synthetic resolution must be divisible by 8, got {h}x{w}"
        )));
    }
    if config.length < 5 {
        return Err(Error::Config(format!(
            "synthetic video needs at least 5 frames, got {}",
            config.length
        )));
    }
    if config.velocity_range.0 < 0.0 || config.velocity_range.1 < config.velocity_range.0 {
        return Err(Error::Config(format!(
            "invalid velocity range {:?}",
            config.velocity_range
        )));
    }
    if config.num_shapes > 0 && config.shape_kinds.is_empty() {
        return Err(Error::Config("num_shapes > 0 but no shape kinds allowed".into()));
    }

    let mut rng = stream(config.seed, 0, Stream::DataGen);

    // background: sum of two low-frequency plane waves per channel
    let mut background = vec![[0.0f64; 3]; h * w];
    let mut waves = [[0.0f64; 5]; 6];
    for wave in waves.iter_mut() {
        *wave = [
            rng.random_range(0.5..1.5),
            rng.random_range(0.5..1.5),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.06..0.14),
            rng.random_range(0.0..1.0),
        ];
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut v = 0.45;
                for k in 0..2 {
                    let [fy, fx, phase, amp, _] = waves[c * 2 + k];
                    v += amp
                        * (std::f64::consts::TAU
                            * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                            + phase)
                            .sin();
                }
                background[y * w + x][c] = v.clamp(0.05, 0.95);
            }
        }
    }

    let mut shapes = Vec::with_capacity(config.num_shapes);
    let min_dim = h.min(w) as f64;
    for i in 0..config.num_shapes {
        let kind = config.shape_kinds[i % config.shape_kinds.len()];
        let half_h = rng.random_range(min_dim / 12.0..min_dim / 5.0);
        let half_w = match kind {
            ShapeKind::Circle => half_h,
            ShapeKind::Rectangle => rng.random_range(min_dim / 12.0..min_dim / 5.0),
        };
        let pos = (
            rng.random_range(half_h..h as f64 - half_h),
            rng.random_range(half_w..w as f64 - half_w),
        );
        let speed = rng.random_range(config.velocity_range.0..=config.velocity_range.1);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        shapes.push(MovingShape {
            kind,
            pos,
            vel: (speed * angle.sin(), speed * angle.cos()),
            half: (half_h, half_w),
            color: [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ],
        });
    }

    let mut frames = ArrayD::zeros(IxDyn(&[CHANNELS, config.length, h, w]));
    for t in 0..config.length {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    frames[[c, t, y, x]] = background[y * w + x][c];
                }
            }
        }
        for s in &shapes {
            paint(&mut frames, t, s, h, w);
        }
        for s in &mut shapes {
            step(s, h as f64, w as f64);
        }
    }
    VideoTensor::new(frames, 12.0)
}

fn paint(frames: &mut ArrayD<f64>, t: usize, s: &MovingShape, h: usize, w: usize) {
    let y0 = ((s.pos.0 - s.half.0).floor().max(0.0)) as usize;
    let y1 = ((s.pos.0 + s.half.0).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((s.pos.1 - s.half.1).floor().max(0.0)) as usize;
    let x1 = ((s.pos.1 + s.half.1).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - s.pos.0;
            let dx = x as f64 - s.pos.1;
            let inside = match s.kind {
                ShapeKind::Rectangle => dy.abs() <= s.half.0 && dx.abs() <= s.half.1,
                ShapeKind::Circle => dy * dy + dx * dx <= s.half.0 * s.half.0,
            };
            if inside {
                for c in 0..3 {
                    frames[[c, t, y, x]] = s.color[c];
                }
            }
        }
    }
}

fn step(s: &mut MovingShape, h: f64, w: f64) {
    s.pos.0 += s.vel.0;
    s.pos.1 += s.vel.1;
    let bounds = [(s.half.0, h - 1.0 - s.half.0), (s.half.1, w - 1.0 - s.half.1)];
    let pos = [&mut s.pos.0, &mut s.pos.1];
    let vel = [&mut s.vel.0, &mut s.vel.1];
    for ((p, v), (lo, hi)) in pos.into_iter().zip(vel).zip(bounds) {
        if *p < lo {
            *p = lo + (lo - *p);
            *v = -*v;
        } else if *p > hi {
            *p = hi - (*p - hi);
            *v = -*v;
        }
        *p = p.clamp(lo, hi);
    }
}

/// Slice a video into consecutive non-overlapping chunks of `t` frames.
/// Trailing frames that do not fill a chunk are dropped.
pub fn chunk_video(video: &VideoTensor, t: usize) -> Result<Vec<VideoChunk>> {
    if t % 4 != 1 {
        return Err(Error::Config(format!("chunk length must be 4k+1, got {t}")));
    }
    let total = video.num_frames();
    if total < t {
        return Err(Error::Config(format!(
            "video shorter than one chunk: {total} frames < chunk length {t}"
        )));
    }
    let n = total / t;
    let mut chunks = Vec::with_capacity(n);
    for i in 0..n {
        let frames = video
            .frames
            .slice_axis(Axis(1), Slice::from(i * t..(i + 1) * t))
            .to_owned();
        chunks.push(VideoChunk::new(frames)?);
    }
    Ok(chunks)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameManifest {
    pub frame_count: usize,
    /// (H, W) of the frames on disk.
    pub resolution: (usize, usize),
    /// Optional (H, W) to resize to after decoding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resize: Option<(usize, usize)>,
    /// Explicit frame indices; defaults to 0..frame_count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<usize>>,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
}

fn default_frame_rate() -> f64 {
    12.0
}

pub fn frame_file(index: usize) -> String {
    format!("{index:06}.png")
}

/// Load a frame directory (`manifest.json` + `frames/%06d.png`).
pub fn load_frames(dir: &Path) -> Result<VideoTensor> {
    let manifest_path = dir.join("manifest.json");
    let manifest: FrameManifest = serde_json::from_reader(
        std::fs::File::open(&manifest_path)
            .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", manifest_path.display())))?,
    )?;
    if manifest.frame_count == 0 {
        return Err(Error::Ingest(format!(
            "no frames listed in {}",
            manifest_path.display()
        )));
    }

    let indices: Vec<usize> = match &manifest.frames {
        None => (0..manifest.frame_count).collect(),
        Some(list) => {
            let mut seen = vec![false; manifest.frame_count];
            for &ix in list {
                if ix >= manifest.frame_count {
                    return Err(Error::Ingest(format!(
                        "frame index {ix} out of range (frame_count {})",
                        manifest.frame_count
                    )));
                }
                if seen[ix] {
                    return Err(Error::Ingest(format!("duplicate frame index {ix} in manifest")));
                }
                seen[ix] = true;
            }
            if let Some(gap) = seen.iter().position(|s| !s) {
                return Err(Error::Ingest(format!("missing frame index {gap} in manifest")));
            }
            (0..manifest.frame_count).collect()
        }
    };

    let (h, w) = manifest.resolution;
    let (th, tw) = manifest.resize.unwrap_or((h, w));
    if th % 8 != 0 || tw % 8 != 0 {
        return Err(Error::Config(format!(
            "frame dimensions {th}x{tw} not divisible by 8; set a resize target in the manifest"
        )));
    }

    let mut frames = ArrayD::zeros(IxDyn(&[CHANNELS, indices.len(), th, tw]));
    for (t, &ix) in indices.iter().enumerate() {
        let path = dir.join("frames").join(frame_file(ix));
        if !path.exists() {
            return Err(Error::Ingest(format!("missing frame file {}", path.display())));
        }
        let img = image::open(&path)?.to_rgb8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::Ingest(format!(
                "frame {ix} is {}x{}, manifest says {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        let img = if (th, tw) != (h, w) {
            image::imageops::resize(&img, tw as u32, th as u32, FilterType::Triangle)
        } else {
            img
        };
        for (y, x, px) in pixels(&img) {
            for c in 0..3 {
                frames[[c, t, y, x]] = px[c] as f64 / 255.0;
            }
        }
    }
    VideoTensor::new(frames, manifest.frame_rate)
}

fn pixels(img: &RgbImage) -> impl Iterator<Item = (usize, usize, [u8; 3])> + '_ {
    img.enumerate_pixels()
        .map(|(x, y, p)| (y as usize, x as usize, p.0))
}

/// Write a video as a frame directory readable by [`load_frames`].
pub fn save_frames(dir: &Path, video: &VideoTensor) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let (h, w) = video.resolution();
    for t in 0..video.num_frames() {
        let mut img: RgbImage = ImageBuffer::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    to_u8(video.frames[[0, t, y, x]]),
                    to_u8(video.frames[[1, t, y, x]]),
                    to_u8(video.frames[[2, t, y, x]]),
                ];
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        img.save(frames_dir.join(frame_file(t)))?;
    }
    let manifest = FrameManifest {
        frame_count: video.num_frames(),
        resolution: (h, w),
        resize: None,
        frames: None,
        frame_rate: video.frame_rate,
    };
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
