//! FVD-lite: Fréchet distance between Gaussian fits of features from a
//! fixed-seed, untrained 3D convolution network. A desk-scale stand-in for
//! pretrained-backbone FVD; values are comparable across runs only for the
//! same feature seed.

use ndarray::{Array1, Array2, ArrayD};

use crate::data::VideoChunk;
use crate::error::{Error, Result};
use crate::nn::Conv3dLayer;
use crate::rng::{stream, Stream};
use crate::tensor::params::ParamStore;
use crate::tensor::Graph;

pub const FVD_FEATURE_DIM: usize = 64;

/// Four-stage strided 3D conv stack ending in a global average pool.
pub struct FvdFeatureNet {
    params: ParamStore,
    layers: Vec<Conv3dLayer>,
    strides: Vec<(usize, usize, usize)>,
}

impl FvdFeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let rng = &mut stream(seed, 4, Stream::ParamInit);
        let widths = [16, 32, 48, FVD_FEATURE_DIM];
        let strides = [(1, 2, 2), (2, 2, 2), (1, 2, 2), (2, 2, 2)];
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, (&w, &s)) in widths.iter().zip(strides.iter()).enumerate() {
            layers.push(Conv3dLayer::new(
                &mut params,
                rng,
                &format!("fvd{i}"),
                cin,
                w,
                (3, 3, 3),
                s,
                (1, 1, 1),
            ));
            cin = w;
        }
        Self { params, layers, strides: strides.to_vec() }
    }

    /// 64-dim feature vector for one video tensor `(3, T, H, W)`.
    pub fn features(&self, frames: &ArrayD<f64>) -> Result<Array1<f64>> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[0] != 3 {
            return Err(Error::Shape(format!("fvd features expect (3,T,H,W), got {shape:?}")));
        }
        let min_hw = self.strides.iter().map(|s| s.1).product::<usize>();
        if shape[2] < min_hw || shape[3] < min_hw {
            return Err(Error::Shape(format!(
                "fvd features need at least {min_hw}x{min_hw} frames, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mut h = g.constant(frames.clone());
        for layer in &self.layers {
            h = layer.forward(&mut g, &p, h);
            h = g.silu(h);
        }
        let v = g.value(h);
        let c = v.shape()[0];
        let per = v.len() / c;
        let flat = v.as_standard_layout();
        let sl = flat.as_slice().unwrap();
        Ok(Array1::from_iter(
            (0..c).map(|ci| sl[ci * per..(ci + 1) * per].iter().sum::<f64>() / per as f64),
        ))
    }
}

/// Row-per-sample feature matrix for a set of videos.
pub fn feature_matrix(net: &FvdFeatureNet, set: &[VideoChunk]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((set.len(), FVD_FEATURE_DIM));
    for (i, chunk) in set.iter().enumerate() {
        out.row_mut(i).assign(&net.features(&chunk.frames)?);
    }
    Ok(out)
}

fn mean_cov(f: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = f.dim();
    let mu = f.mean_axis(ndarray::Axis(0)).unwrap();
    let mut cov = Array2::zeros((d, d));
    for row in f.rows() {
        let c = &row - &mu;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn sym_sqrt(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn to_na(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().copied())
}

/// ‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2}) from row-per-sample feature
/// matrices. The cross term uses Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2}), which
/// keeps every eigendecomposition symmetric.
pub fn frechet_from_features(fa: &Array2<f64>, fb: &Array2<f64>) -> Result<f64> {
    if fa.nrows() < 2 || fb.nrows() < 2 {
        return Err(Error::Config(format!(
            "frechet distance needs >= 2 samples per set, got {} and {}",
            fa.nrows(),
            fb.nrows()
        )));
    }
    if fa.ncols() != fb.ncols() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            fa.ncols(),
            fb.ncols()
        )));
    }
    let (mu_a, cov_a) = mean_cov(fa);
    let (mu_b, cov_b) = mean_cov(fb);
    let d2: f64 = mu_a.iter().zip(mu_b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();

    let ca = to_na(&cov_a);
    let cb = to_na(&cov_b);
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let cross = sym_sqrt(&inner).trace();
    Ok(d2 + ca.trace() + cb.trace() - 2.0 * cross)
}

pub fn fvd_lite(set_a: &[VideoChunk], set_b: &[VideoChunk], net: &FvdFeatureNet) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Config(format!(
            "fvd_lite needs >= 2 videos per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let fa = feature_matrix(net, set_a)?;
    let fb = feature_matrix(net, set_b)?;
    frechet_from_features(&fa, &fb)
}
