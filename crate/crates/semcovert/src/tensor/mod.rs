//! Reverse-mode autodiff over dynamically shaped f64 tensors.
//!
//! Each forward pass builds a fresh `Graph` (a tape). Nodes own their values;
//! `backward` walks the tape once in reverse, dropping intermediate gradient
//! buffers as soon as they have been consumed. Only leaf gradients survive,
//! which is all callers need: model parameters are re-bound as leaves on
//! every tape and their gradients are routed back to parameter storage.
//!
//! Shape violations inside the graph are programming errors and panic;
//! fallible validation happens at the model boundaries.

pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod params;

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice, Zip};

use conv::{
    col2im_2d, col2im_3d, col2im_temporal, im2col_2d, im2col_3d, im2col_temporal, out_len,
};
use gemm::{gemm_into, matmul};

pub type Ix = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Ix, Ix),
    Sub(Ix, Ix),
    Mul(Ix, Ix),
    Neg(Ix),
    Scale(Ix, f64),
    AddScalar(Ix),
    Recip(Ix),
    Sqrt(Ix),
    Exp(Ix),
    Ln(Ix),
    Square(Ix),
    Sigmoid(Ix),
    Silu(Ix),
    Softplus(Ix),
    Clamp(Ix, f64, f64),
    Sum(Ix),
    Mean(Ix),
    MeanAxis(Ix, usize),
    Matmul(Ix, Ix),
    BatMatmul(Ix, Ix),
    Conv2d { x: Ix, w: Ix, stride: usize, pad: usize },
    ConvTemporal { x: Ix, w: Ix, stride: usize },
    Conv3d { x: Ix, w: Ix, stride: (usize, usize, usize), pad: (usize, usize, usize) },
    Upsample2Spatial(Ix),
    Upsample2Temporal(Ix),
    Reshape(Ix),
    Permute(Ix, Vec<usize>),
    Concat(Vec<Ix>, usize),
    Narrow { x: Ix, axis: usize, start: usize, len: usize },
    Softmax(Ix),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, ix: Ix) -> Option<&ArrayD<f64>> {
        self.g.get(ix).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, ix: Ix) -> Option<ArrayD<f64>> {
        self.g.get_mut(ix).and_then(|o| o.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_out_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ad = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let bd = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        assert!(
            ad == bd || ad == 1 || bd == 1,
            "cannot broadcast {a:?} with {b:?}"
        );
        out[i] = ad.max(bd);
    }
    out
}

fn bin_broadcast(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_out_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sum `g` down to `target` shape, inverting numpy-style broadcasting.
fn reduce_to(g: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    if g.shape() == target {
        return g;
    }
    let mut cur = g;
    while cur.ndim() > target.len() {
        cur = cur.sum_axis(Axis(0));
    }
    for (i, &t) in target.iter().enumerate() {
        if cur.shape()[i] != t {
            debug_assert_eq!(t, 1, "reduce_to target {target:?} from {:?}", cur.shape());
            cur = cur.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    cur
}

/// Reshape through a standard-layout copy.
pub fn reshaped(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    assert_eq!(
        a.len(),
        shape.iter().product::<usize>(),
        "reshape {:?} -> {shape:?}",
        a.shape()
    );
    let std = a.as_standard_layout();
    ArrayD::from_shape_vec(IxDyn(shape), std.iter().copied().collect()).unwrap()
}

fn permuted(a: &ArrayD<f64>, axes: &[usize]) -> ArrayD<f64> {
    a.view()
        .permuted_axes(IxDyn(axes))
        .as_standard_layout()
        .into_owned()
}

fn invert_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, ix: Ix) -> &ArrayD<f64> {
        &self.nodes[ix].value
    }

    pub fn shape(&self, ix: Ix) -> &[usize] {
        self.nodes[ix].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, ix: Ix) -> f64 {
        let v = &self.nodes[ix].value;
        assert_eq!(v.len(), 1, "scalar_value on shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Ix {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, ix: Ix) -> bool {
        self.nodes[ix].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> Ix {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Ix {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Ix {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn unary(&mut self, a: Ix, op: Op, f: impl Fn(f64) -> f64) -> Ix {
        let value = self.nodes[a].value.mapv(f);
        let needs = self.ng(a);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Ix, b: Ix, op: Op, f: impl Fn(f64, f64) -> f64) -> Ix {
        let value = bin_broadcast(&self.nodes[a].value, &self.nodes[b].value, f);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Ix, b: Ix) -> Ix {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Ix, b: Ix) -> Ix {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Ix, b: Ix) -> Ix {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Ix, b: Ix) -> Ix {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn neg(&mut self, a: Ix) -> Ix {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Ix, c: f64) -> Ix {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Ix, c: f64) -> Ix {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn recip(&mut self, a: Ix) -> Ix {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Ix) -> Ix {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn exp(&mut self, a: Ix) -> Ix {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Ix) -> Ix {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Ix) -> Ix {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sigmoid(&mut self, a: Ix) -> Ix {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Ix) -> Ix {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn softplus(&mut self, a: Ix) -> Ix {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn clamp(&mut self, a: Ix, lo: f64, hi: f64) -> Ix {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Ix) -> Ix {
        let v = self.nodes[a].value.sum();
        let needs = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Ix) -> Ix {
        let n = self.nodes[a].value.len().max(1) as f64;
        let v = self.nodes[a].value.sum() / n;
        let needs = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Mean(a), needs)
    }

    /// Mean along one axis, keeping it as a length-1 dim.
    pub fn mean_axis(&mut self, a: Ix, axis: usize) -> Ix {
        let value = self.nodes[a]
            .value
            .mean_axis(Axis(axis))
            .expect("mean_axis on empty axis")
            .insert_axis(Axis(axis));
        let needs = self.ng(a);
        self.push(value, Op::MeanAxis(a, axis), needs)
    }

    pub fn matmul(&mut self, a: Ix, b: Ix) -> Ix {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.ndim(), 2, "matmul lhs rank");
        assert_eq!(bv.ndim(), 2, "matmul rhs rank");
        let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let value = matmul(&a2.view(), &b2.view()).into_dyn();
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Matmul(a, b), needs)
    }

    /// Batched matmul: `(B, m, k) @ (B, k, n) -> (B, m, n)`.
    pub fn bat_matmul(&mut self, a: Ix, b: Ix) -> Ix {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.ndim(), 3, "bat_matmul lhs rank");
        assert_eq!(bv.ndim(), 3, "bat_matmul rhs rank");
        let (bb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bb2, k2, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(bb, bb2, "bat_matmul batch");
        assert_eq!(k, k2, "bat_matmul inner");
        let mut out = ArrayD::zeros(IxDyn(&[bb, m, n]));
        for i in 0..bb {
            let ai = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bi = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut oi = out
                .index_axis_mut(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            gemm_into(&mut oi, 1.0, &ai, &bi, 0.0);
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::BatMatmul(a, b), needs)
    }

    /// Per-frame 2D conv. `x: (Cin, B, H, W)`, `w: (Cout, Cin, kh, kw)`.
    pub fn conv2d(&mut self, x: Ix, w: Ix, stride: usize, pad: usize) -> Ix {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        assert_eq!(xv.ndim(), 4, "conv2d input rank");
        assert_eq!(wv.ndim(), 4, "conv2d weight rank");
        let (cin, b, h, ww) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, cin2, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, cin2, "conv2d channels");
        let ho = out_len(h, kh, stride, pad);
        let wo = out_len(ww, kw, stride, pad);
        let cols = im2col_2d(&xv.view(), kh, kw, stride, pad);
        let w2std = wv.as_standard_layout();
        let w2 = w2std.to_shape((co, cin * kh * kw)).unwrap();
        let y2 = matmul(&w2.view(), &cols.view());
        let value = reshaped(&y2.into_dyn(), &[co, b, ho, wo]);
        let needs = self.ng(x) || self.ng(w);
        self.push(value, Op::Conv2d { x, w, stride, pad }, needs)
    }

    /// Causal temporal conv. `x: (Cin, T, H, W)`, `w: (Cout, Cin, k)`.
    pub fn conv_temporal(&mut self, x: Ix, w: Ix, stride: usize) -> Ix {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        assert_eq!(xv.ndim(), 4, "conv_temporal input rank");
        assert_eq!(wv.ndim(), 3, "conv_temporal weight rank");
        let (cin, t, h, ww) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, cin2, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(cin, cin2, "conv_temporal channels");
        let to = (t - 1) / stride + 1;
        let cols = im2col_temporal(&xv.view(), k, stride);
        let w2std = wv.as_standard_layout();
        let w2 = w2std.to_shape((co, cin * k)).unwrap();
        let y2 = matmul(&w2.view(), &cols.view());
        let value = reshaped(&y2.into_dyn(), &[co, to, h, ww]);
        let needs = self.ng(x) || self.ng(w);
        self.push(value, Op::ConvTemporal { x, w, stride }, needs)
    }

    /// 3D conv with symmetric zero padding. `x: (Cin, T, H, W)`,
    /// `w: (Cout, Cin, kt, kh, kw)`.
    pub fn conv3d(
        &mut self,
        x: Ix,
        w: Ix,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Ix {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        assert_eq!(xv.ndim(), 4, "conv3d input rank");
        assert_eq!(wv.ndim(), 5, "conv3d weight rank");
        let (cin, t, h, ww) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let ws = wv.shape().to_vec();
        let (co, cin2, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
        assert_eq!(cin, cin2, "conv3d channels");
        let to = out_len(t, kt, stride.0, pad.0);
        let ho = out_len(h, kh, stride.1, pad.1);
        let wo = out_len(ww, kw, stride.2, pad.2);
        let cols = im2col_3d(&xv.view(), (kt, kh, kw), stride, pad);
        let w2std = wv.as_standard_layout();
        let w2 = w2std.to_shape((co, cin * kt * kh * kw)).unwrap();
        let y2 = matmul(&w2.view(), &cols.view());
        let value = reshaped(&y2.into_dyn(), &[co, to, ho, wo]);
        let needs = self.ng(x) || self.ng(w);
        self.push(value, Op::Conv3d { x, w, stride, pad }, needs)
    }

    /// Nearest-neighbour 2x upsample on the two trailing spatial axes of a
    /// `(C, T, H, W)` tensor.
    pub fn upsample2_spatial(&mut self, a: Ix) -> Ix {
        let v = &self.nodes[a].value;
        assert_eq!(v.ndim(), 4, "upsample2_spatial rank");
        let (c, t, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let vs = v.as_standard_layout();
        let src = vs.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c, t, 2 * h, 2 * w]));
        {
            let dst = out.as_slice_mut().unwrap();
            let ow = 2 * w;
            for ct in 0..c * t {
                for hh in 0..h {
                    let s = (ct * h + hh) * w;
                    let d = (ct * 2 * h + 2 * hh) * ow;
                    for x in 0..w {
                        let val = src[s + x];
                        dst[d + 2 * x] = val;
                        dst[d + 2 * x + 1] = val;
                    }
                    dst.copy_within(d..d + ow, d + ow);
                }
            }
        }
        let needs = self.ng(a);
        self.push(out, Op::Upsample2Spatial(a), needs)
    }

    /// Nearest-neighbour 2x upsample along the temporal axis of `(C, T, H, W)`.
    pub fn upsample2_temporal(&mut self, a: Ix) -> Ix {
        let v = &self.nodes[a].value;
        assert_eq!(v.ndim(), 4, "upsample2_temporal rank");
        let (c, t, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let hw = h * w;
        let vs = v.as_standard_layout();
        let src = vs.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c, 2 * t, h, w]));
        {
            let dst = out.as_slice_mut().unwrap();
            for cc in 0..c {
                for tt in 0..t {
                    let s = (cc * t + tt) * hw;
                    let d = (cc * 2 * t + 2 * tt) * hw;
                    dst[d..d + hw].copy_from_slice(&src[s..s + hw]);
                    dst.copy_within(d..d + hw, d + hw);
                }
            }
        }
        let needs = self.ng(a);
        self.push(out, Op::Upsample2Temporal(a), needs)
    }

    pub fn reshape(&mut self, a: Ix, shape: &[usize]) -> Ix {
        let value = reshaped(&self.nodes[a].value, shape);
        let needs = self.ng(a);
        self.push(value, Op::Reshape(a), needs)
    }

    pub fn permute(&mut self, a: Ix, axes: &[usize]) -> Ix {
        let value = permuted(&self.nodes[a].value, axes);
        let needs = self.ng(a);
        self.push(value, Op::Permute(a, axes.to_vec()), needs)
    }

    pub fn concat(&mut self, parts: &[Ix], axis: usize) -> Ix {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat shapes");
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat(parts.to_vec(), axis), needs)
    }

    pub fn narrow(&mut self, a: Ix, axis: usize, start: usize, len: usize) -> Ix {
        let value = self.nodes[a]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        let needs = self.ng(a);
        self.push(value, Op::Narrow { x: a, axis, start, len }, needs)
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax(&mut self, a: Ix) -> Ix {
        let v = &self.nodes[a].value;
        let last = Axis(v.ndim() - 1);
        let mut y = v.as_standard_layout().into_owned();
        for mut lane in y.lanes_mut(last) {
            let m = lane.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let mut s = 0.0;
            lane.mapv_inplace(|x| {
                let e = (x - m).exp();
                s += e;
                e
            });
            lane.mapv_inplace(|e| e / s);
        }
        let needs = self.ng(a);
        self.push(y, Op::Softmax(a), needs)
    }

    /// Backpropagate from a single-element node. Returns gradients for every
    /// leaf reachable from `root` that was created with `needs_grad`.
    pub fn backward(&self, root: Ix) -> Grads {
        assert_eq!(
            self.nodes[root].value.len(),
            1,
            "backward root must be a scalar, got {:?}",
            self.nodes[root].value.shape()
        );
        let mut g: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root] = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));

        for i in (0..=root).rev() {
            if !self.nodes[i].needs_grad {
                g[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let go = match g[i].take() {
                Some(go) => go,
                None => continue,
            };
            self.prop(i, go, &mut g);
        }
        Grads { g }
    }

    fn acc(&self, g: &mut [Option<ArrayD<f64>>], ix: Ix, contrib: ArrayD<f64>) {
        if !self.ng(ix) {
            return;
        }
        debug_assert_eq!(contrib.shape(), self.nodes[ix].value.shape());
        match &mut g[ix] {
            Some(cur) => *cur += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn prop(&self, i: Ix, go: ArrayD<f64>, g: &mut [Option<ArrayD<f64>>]) {
        let val = |ix: Ix| &self.nodes[ix].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.acc(g, *b, reduce_to(go.clone(), val(*b).shape()));
                }
                self.acc(g, *a, reduce_to(go, val(*a).shape()));
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(g, *b, reduce_to(go.mapv(|v| -v), val(*b).shape()));
                }
                self.acc(g, *a, reduce_to(go, val(*a).shape()));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let da = bin_broadcast(&go, val(*b), |x, y| x * y);
                    self.acc(g, *a, reduce_to(da, val(*a).shape()));
                }
                if self.ng(*b) {
                    let db = bin_broadcast(&go, val(*a), |x, y| x * y);
                    self.acc(g, *b, reduce_to(db, val(*b).shape()));
                }
            }
            Op::Neg(a) => self.acc(g, *a, go.mapv(|v| -v)),
            Op::Scale(a, c) => self.acc(g, *a, go.mapv(|v| v * c)),
            Op::AddScalar(a) => self.acc(g, *a, go),
            Op::Recip(a) => {
                let y = &self.nodes[i].value;
                let mut d = go;
                d.zip_mut_with(y, |gv, &yv| *gv *= -yv * yv);
                self.acc(g, *a, d);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let mut d = go;
                d.zip_mut_with(y, |gv, &yv| *gv *= 0.5 / yv);
                self.acc(g, *a, d);
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let mut d = go;
                d.zip_mut_with(y, |gv, &yv| *gv *= yv);
                self.acc(g, *a, d);
            }
            Op::Ln(a) => {
                let mut d = go;
                d.zip_mut_with(val(*a), |gv, &xv| *gv /= xv);
                self.acc(g, *a, d);
            }
            Op::Square(a) => {
                let mut d = go;
                d.zip_mut_with(val(*a), |gv, &xv| *gv *= 2.0 * xv);
                self.acc(g, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let mut d = go;
                d.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                self.acc(g, *a, d);
            }
            Op::Silu(a) => {
                let mut d = go;
                d.zip_mut_with(val(*a), |gv, &xv| {
                    let s = sigmoid(xv);
                    *gv *= s * (1.0 + xv * (1.0 - s));
                });
                self.acc(g, *a, d);
            }
            Op::Softplus(a) => {
                let mut d = go;
                d.zip_mut_with(val(*a), |gv, &xv| *gv *= sigmoid(xv));
                self.acc(g, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = go;
                d.zip_mut_with(val(*a), |gv, &xv| {
                    if xv < *lo || xv > *hi {
                        *gv = 0.0;
                    }
                });
                self.acc(g, *a, d);
            }
            Op::Sum(a) => {
                let gv = *go.iter().next().unwrap();
                self.acc(g, *a, ArrayD::from_elem(val(*a).raw_dim(), gv));
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                let gv = *go.iter().next().unwrap() / n;
                self.acc(g, *a, ArrayD::from_elem(val(*a).raw_dim(), gv));
            }
            Op::MeanAxis(a, axis) => {
                let n = val(*a).shape()[*axis] as f64;
                let scaled = go.mapv(|v| v / n);
                let b = scaled
                    .broadcast(val(*a).raw_dim())
                    .expect("mean_axis backward broadcast")
                    .to_owned();
                self.acc(g, *a, b);
            }
            Op::Matmul(a, b) => {
                let av = val(*a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let bv = val(*b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gov = go.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if self.ng(*a) {
                    let da = matmul(&gov.view(), &bv.t());
                    self.acc(g, *a, da.into_dyn());
                }
                if self.ng(*b) {
                    let db = matmul(&av.t(), &gov.view());
                    self.acc(g, *b, db.into_dyn());
                }
            }
            Op::BatMatmul(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let nb = av.shape()[0];
                if self.ng(*a) {
                    let mut da = ArrayD::zeros(av.raw_dim());
                    for k in 0..nb {
                        let gk = go
                            .index_axis(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let bk = bv
                            .index_axis(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let mut dk = da
                            .index_axis_mut(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        gemm_into(&mut dk, 1.0, &gk, &bk.t(), 0.0);
                    }
                    self.acc(g, *a, da);
                }
                if self.ng(*b) {
                    let mut db = ArrayD::zeros(bv.raw_dim());
                    for k in 0..nb {
                        let gk = go
                            .index_axis(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let ak = av
                            .index_axis(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let mut dk = db
                            .index_axis_mut(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        gemm_into(&mut dk, 1.0, &ak.t(), &gk, 0.0);
                    }
                    self.acc(g, *b, db);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = val(*x);
                let wv = val(*w);
                let ws = wv.shape();
                let (co, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let ncol = go.len() / co;
                let go2std = go.as_standard_layout();
                let go2 = go2std.to_shape((co, ncol)).unwrap();
                if self.ng(*w) {
                    let cols = im2col_2d(&xv.view(), kh, kw, *stride, *pad);
                    let dw2 = matmul(&go2.view(), &cols.t());
                    self.acc(g, *w, reshaped(&dw2.into_dyn(), &[co, cin, kh, kw]));
                }
                if self.ng(*x) {
                    let w2std = wv.as_standard_layout();
                    let w2 = w2std.to_shape((co, cin * kh * kw)).unwrap();
                    let dcols = matmul(&w2.t(), &go2.view());
                    self.acc(g, *x, col2im_2d(&dcols, xv.shape(), kh, kw, *stride, *pad));
                }
            }
            Op::ConvTemporal { x, w, stride } => {
                let xv = val(*x);
                let wv = val(*w);
                let ws = wv.shape();
                let (co, cin, k) = (ws[0], ws[1], ws[2]);
                let ncol = go.len() / co;
                let go2std = go.as_standard_layout();
                let go2 = go2std.to_shape((co, ncol)).unwrap();
                if self.ng(*w) {
                    let cols = im2col_temporal(&xv.view(), k, *stride);
                    let dw2 = matmul(&go2.view(), &cols.t());
                    self.acc(g, *w, reshaped(&dw2.into_dyn(), &[co, cin, k]));
                }
                if self.ng(*x) {
                    let w2std = wv.as_standard_layout();
                    let w2 = w2std.to_shape((co, cin * k)).unwrap();
                    let dcols = matmul(&w2.t(), &go2.view());
                    self.acc(g, *x, col2im_temporal(&dcols, xv.shape(), k, *stride));
                }
            }
            Op::Conv3d { x, w, stride, pad } => {
                let xv = val(*x);
                let wv = val(*w);
                let ws = wv.shape().to_vec();
                let (co, cin, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
                let ncol = go.len() / co;
                let go2std = go.as_standard_layout();
                let go2 = go2std.to_shape((co, ncol)).unwrap();
                if self.ng(*w) {
                    let cols = im2col_3d(&xv.view(), (kt, kh, kw), *stride, *pad);
                    let dw2 = matmul(&go2.view(), &cols.t());
                    self.acc(g, *w, reshaped(&dw2.into_dyn(), &[co, cin, kt, kh, kw]));
                }
                if self.ng(*x) {
                    let w2std = wv.as_standard_layout();
                    let w2 = w2std.to_shape((co, cin * kt * kh * kw)).unwrap();
                    let dcols = matmul(&w2.t(), &go2.view());
                    self.acc(g, *x, col2im_3d(&dcols, xv.shape(), (kt, kh, kw), *stride, *pad));
                }
            }
            Op::Upsample2Spatial(a) => {
                let xs = val(*a).shape();
                let (c, t, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let gos = go.as_standard_layout();
                let src = gos.as_slice().unwrap();
                let mut d = ArrayD::zeros(val(*a).raw_dim());
                {
                    let dst = d.as_slice_mut().unwrap();
                    let ow = 2 * w;
                    for ct in 0..c * t {
                        for hh in 0..h {
                            let drow = (ct * h + hh) * w;
                            let s0 = (ct * 2 * h + 2 * hh) * ow;
                            let s1 = s0 + ow;
                            for x in 0..w {
                                dst[drow + x] = src[s0 + 2 * x]
                                    + src[s0 + 2 * x + 1]
                                    + src[s1 + 2 * x]
                                    + src[s1 + 2 * x + 1];
                            }
                        }
                    }
                }
                self.acc(g, *a, d);
            }
            Op::Upsample2Temporal(a) => {
                let xs = val(*a).shape();
                let (c, t, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let gos = go.as_standard_layout();
                let src = gos.as_slice().unwrap();
                let mut d = ArrayD::zeros(val(*a).raw_dim());
                {
                    let dst = d.as_slice_mut().unwrap();
                    for cc in 0..c {
                        for tt in 0..t {
                            let drow = (cc * t + tt) * hw;
                            let s0 = (cc * 2 * t + 2 * tt) * hw;
                            for p in 0..hw {
                                dst[drow + p] = src[s0 + p] + src[s0 + hw + p];
                            }
                        }
                    }
                }
                self.acc(g, *a, d);
            }
            Op::Reshape(a) => {
                self.acc(g, *a, reshaped(&go, val(*a).shape()));
            }
            Op::Permute(a, axes) => {
                self.acc(g, *a, permuted(&go, &invert_perm(axes)));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if self.ng(p) {
                        let piece = go
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .as_standard_layout()
                            .into_owned();
                        self.acc(g, p, piece);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let mut d = ArrayD::zeros(val(*x).raw_dim());
                d.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(&go);
                self.acc(g, *x, d);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let last = Axis(y.ndim() - 1);
                let mut d = ArrayD::zeros(y.raw_dim());
                Zip::from(d.lanes_mut(last))
                    .and(y.lanes(last))
                    .and(go.lanes(last))
                    .for_each(|mut dl, yl, gl| {
                        let dot: f64 = yl.iter().zip(gl.iter()).map(|(a, b)| a * b).sum();
                        for k in 0..dl.len() {
                            dl[k] = yl[k] * (gl[k] - dot);
                        }
                    });
                self.acc(g, *a, d);
            }
        }
    }
}
