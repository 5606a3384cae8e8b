//! Layers shared by the codec, hiding networks, and the detector.
//!
//! Layers register their parameters in a `ParamStore` at construction and
//! only hold ids plus hyperparameters; forward passes run against whatever
//! binding of that store the caller provides. Dense weights are stored
//! `(in, out)` so activations multiply without transposition.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Ix};

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

pub struct Conv2dLayer {
    w: ParamId,
    b: ParamId,
    cout: usize,
    stride: usize,
    pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.register(&format!("{name}.w"), uniform_init(rng, &[cout, cin, k, k], fan_in));
        let b = store.register(&format!("{name}.b"), uniform_init(rng, &[cout], fan_in));
        Self { w, b, cout, stride, pad }
    }

    /// Zero-initialized variant for residual output heads: the layer
    /// contributes nothing at construction and wakes up through its own
    /// weight gradient on the first step.
    pub fn new_zero(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[cout, cin, k, k])));
        let b = store.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Self { w, b, cout, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Ix) -> Ix {
        let y = g.conv2d(x, p.node(self.w), self.stride, self.pad);
        let b = g.reshape(p.node(self.b), &[self.cout, 1, 1, 1]);
        g.add(y, b)
    }
}

pub struct TemporalConvLayer {
    w: ParamId,
    b: ParamId,
    cout: usize,
    stride: usize,
}

impl TemporalConvLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * k;
        let w = store.register(&format!("{name}.w"), uniform_init(rng, &[cout, cin, k], fan_in));
        let b = store.register(&format!("{name}.b"), uniform_init(rng, &[cout], fan_in));
        Self { w, b, cout, stride }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Ix) -> Ix {
        let y = g.conv_temporal(x, p.node(self.w), self.stride);
        let b = g.reshape(p.node(self.b), &[self.cout, 1, 1, 1]);
        g.add(y, b)
    }
}

pub struct Conv3dLayer {
    w: ParamId,
    b: ParamId,
    cout: usize,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
}

impl Conv3dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Self {
        let fan_in = cin * k.0 * k.1 * k.2;
        let w = store.register(
            &format!("{name}.w"),
            uniform_init(rng, &[cout, cin, k.0, k.1, k.2], fan_in),
        );
        let b = store.register(&format!("{name}.b"), uniform_init(rng, &[cout], fan_in));
        Self { w, b, cout, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Ix) -> Ix {
        let y = g.conv3d(x, p.node(self.w), self.stride, self.pad);
        let b = g.reshape(p.node(self.b), &[self.cout, 1, 1, 1]);
        g.add(y, b)
    }
}

pub struct Linear {
    w: ParamId,
    b: ParamId,
    dout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), uniform_init(rng, &[din, dout], din));
        let b = store.register(&format!("{name}.b"), uniform_init(rng, &[dout], din));
        Self { w, b, dout }
    }

    /// `x: (N, din) -> (N, dout)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Ix) -> Ix {
        let y = g.matmul(x, p.node(self.w));
        let b = g.reshape(p.node(self.b), &[1, self.dout]);
        g.add(y, b)
    }
}

/// RMS normalization over the channel axis of a `(C, T, H, W)` tensor.
pub struct RmsNorm {
    gain: ParamId,
    c: usize,
}

impl RmsNorm {
    const EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let gain = store.register(&format!("{name}.gain"), ArrayD::ones(IxDyn(&[c])));
        Self { gain, c }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Ix) -> Ix {
        let sq = g.square(x);
        let ms = g.mean_axis(sq, 0);
        let eps = g.add_scalar(ms, Self::EPS);
        let rms = g.sqrt(eps);
        let inv = g.recip(rms);
        let normed = g.mul(x, inv);
        let gain = g.reshape(p.node(self.gain), &[self.c, 1, 1, 1]);
        g.mul(normed, gain)
    }
}

/// Multi-head self-attention along the temporal axis of `(C, T, H, W)`.
/// Every spatial site attends over its own frame sequence with shared
/// projection weights; spatial positions never mix.
pub struct TemporalAttention {
    wqkv: ParamId,
    bqkv: ParamId,
    wo: ParamId,
    bo: ParamId,
    c: usize,
    heads: usize,
}

impl TemporalAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(c % heads, 0, "model dim {c} not divisible by {heads} heads");
        let wqkv = store.register(&format!("{name}.wqkv"), uniform_init(rng, &[c, 3 * c], c));
        let bqkv = store.register(&format!("{name}.bqkv"), uniform_init(rng, &[3 * c], c));
        let wo = store.register(&format!("{name}.wo"), uniform_init(rng, &[c, c], c));
        let bo = store.register(&format!("{name}.bo"), uniform_init(rng, &[c], c));
        Self { wqkv, bqkv, wo, bo, c, heads }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Ix) -> Ix {
        let (c, t, h, w) = {
            let s = g.shape(x);
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(c, self.c, "attention channel dim");
        let (nh, hd) = (self.heads, self.c / self.heads);
        let sites = h * w;

        let xp = g.permute(x, &[2, 3, 1, 0]);
        let x2 = g.reshape(xp, &[sites * t, c]);
        let qkv0 = g.matmul(x2, p.node(self.wqkv));
        let bqkv = g.reshape(p.node(self.bqkv), &[1, 3 * c]);
        let qkv = g.add(qkv0, bqkv);

        let split_heads = |g: &mut Graph, part: Ix| {
            let r = g.reshape(part, &[sites, t, nh, hd]);
            let pm = g.permute(r, &[0, 2, 1, 3]);
            g.reshape(pm, &[sites * nh, t, hd])
        };
        let q = g.narrow(qkv, 1, 0, c);
        let k = g.narrow(qkv, 1, c, c);
        let v = g.narrow(qkv, 1, 2 * c, c);
        let qh = split_heads(g, q);
        let kh = split_heads(g, k);
        let vh = split_heads(g, v);

        let kt = g.permute(kh, &[0, 2, 1]);
        let logits = g.bat_matmul(qh, kt);
        let scaled = g.scale(logits, 1.0 / (hd as f64).sqrt());
        let attn = g.softmax(scaled);
        let ctx = g.bat_matmul(attn, vh);

        let cr = g.reshape(ctx, &[sites, nh, t, hd]);
        let cp = g.permute(cr, &[0, 2, 1, 3]);
        let c2 = g.reshape(cp, &[sites * t, c]);
        let out0 = g.matmul(c2, p.node(self.wo));
        let bo = g.reshape(p.node(self.bo), &[1, c]);
        let out = g.add(out0, bo);

        let o4 = g.reshape(out, &[h, w, t, c]);
        g.permute(o4, &[3, 2, 0, 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tensor::gradcheck::max_rel_err_at;
    use ndarray::IxDyn;
    use rand::Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = stream(seed, 0, Stream::DataGen);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn attention_is_spatially_local() {
        // Changing one spatial site must not affect any other site's output.
        let mut rng = stream(1, 0, Stream::ParamInit);
        let mut store = ParamStore::new();
        let attn = TemporalAttention::new(&mut store, &mut rng, "attn", 8, 2);

        let x0 = rand_arr(&[8, 3, 2, 2], 2);
        let mut x1 = x0.clone();
        for ci in 0..8 {
            for ti in 0..3 {
                x1[[ci, ti, 0, 0]] += 1.0;
            }
        }

        let run = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let xin = g.constant(x.clone());
            let y = attn.forward(&mut g, &p, xin);
            g.value(y).clone()
        };
        let y0 = run(&x0);
        let y1 = run(&x1);
        for ci in 0..8 {
            for ti in 0..3 {
                assert_ne!(y0[[ci, ti, 0, 0]], y1[[ci, ti, 0, 0]]);
                for (hh, ww) in [(0, 1), (1, 0), (1, 1)] {
                    let a = y0[[ci, ti, hh, ww]];
                    let b = y1[[ci, ti, hh, ww]];
                    assert!((a - b).abs() < 1e-12, "site ({hh},{ww}) leaked");
                }
            }
        }
    }

    #[test]
    fn attention_commutes_with_spatial_permutation() {
        // Swapping two spatial sites of the input swaps the outputs and
        // changes nothing else: attention treats sites as an unordered batch.
        let mut rng = stream(8, 0, Stream::ParamInit);
        let mut store = ParamStore::new();
        let attn = TemporalAttention::new(&mut store, &mut rng, "attn", 8, 2);
        let x = rand_arr(&[8, 3, 2, 2], 9);
        let mut xp = x.clone();
        for ci in 0..8 {
            for ti in 0..3 {
                let a = xp[[ci, ti, 0, 0]];
                xp[[ci, ti, 0, 0]] = xp[[ci, ti, 1, 1]];
                xp[[ci, ti, 1, 1]] = a;
            }
        }
        let run = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let xin = g.constant(x.clone());
            let y = attn.forward(&mut g, &p, xin);
            g.value(y).clone()
        };
        let y = run(&x);
        let yp = run(&xp);
        for ci in 0..8 {
            for ti in 0..3 {
                assert!((y[[ci, ti, 0, 0]] - yp[[ci, ti, 1, 1]]).abs() < 1e-12);
                assert!((y[[ci, ti, 1, 1]] - yp[[ci, ti, 0, 0]]).abs() < 1e-12);
                assert!((y[[ci, ti, 0, 1]] - yp[[ci, ti, 0, 1]]).abs() < 1e-12);
                assert!((y[[ci, ti, 1, 0]] - yp[[ci, ti, 1, 0]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = stream(3, 0, Stream::ParamInit);
        let mut store = ParamStore::new();
        let _attn = TemporalAttention::new(&mut store, &mut rng, "attn", 4, 2);
        let _norm = RmsNorm::new(&mut store, "norm", 4);
        let x = rand_arr(&[4, 3, 2, 2], 4);

        // check wrt both the input and every parameter tensor
        let mut inputs = vec![x];
        for id in store.ids() {
            inputs.push(store.value(id).clone());
        }
        let build = |g: &mut Graph, ids: &[crate::tensor::Ix]| {
            let mut shadow = ParamStore::new();
            let a2 = TemporalAttention::new(
                &mut shadow,
                &mut stream(3, 0, Stream::ParamInit),
                "attn",
                4,
                2,
            );
            let n2 = RmsNorm::new(&mut shadow, "norm", 4);
            let p = Bound::from_nodes(ids[1..].to_vec());
            let h = n2.forward(g, &p, ids[0]);
            let y = a2.forward(g, &p, h);
            let s = g.square(y);
            g.sum(s)
        };
        let mut coords = Vec::new();
        let mut crng = stream(5, 0, Stream::DataGen);
        for (i, arr) in inputs.iter().enumerate() {
            for _ in 0..4 {
                coords.push((i, crng.random_range(0..arr.len())));
            }
        }
        let err = max_rel_err_at(&build, &inputs, &coords, 1e-5);
        assert!(err < 1e-4, "attention grad rel err {err:.3e}");
    }
}
