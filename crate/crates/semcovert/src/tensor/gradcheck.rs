//! Finite-difference gradient checks used by the test suites.

use ndarray::ArrayD;

use super::{Grads, Graph, Ix};

/// Relative error between analytic and numeric derivatives with an absolute
/// floor so near-zero gradients compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

fn eval(build: &impl Fn(&mut Graph, &[Ix]) -> Ix, inputs: &[ArrayD<f64>]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<Ix> = inputs.iter().map(|v| g.leaf(v.clone(), false)).collect();
    let root = build(&mut g, &ids);
    g.scalar_value(root)
}

fn analytic(build: &impl Fn(&mut Graph, &[Ix]) -> Ix, inputs: &[ArrayD<f64>]) -> (Vec<Ix>, Graph, Grads) {
    let mut g = Graph::new();
    let ids: Vec<Ix> = inputs.iter().map(|v| g.leaf(v.clone(), true)).collect();
    let root = build(&mut g, &ids);
    let grads = g.backward(root);
    (ids, g, grads)
}

/// Central difference of the built scalar wrt one input coordinate.
pub fn central_diff(
    build: &impl Fn(&mut Graph, &[Ix]) -> Ix,
    inputs: &[ArrayD<f64>],
    input: usize,
    flat: usize,
    h: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[input].as_slice_mut().unwrap()[flat] += h;
    let mut minus = inputs.to_vec();
    minus[input].as_slice_mut().unwrap()[flat] -= h;
    (eval(build, &plus) - eval(build, &minus)) / (2.0 * h)
}

/// Max relative error over every coordinate of every input. Only suitable
/// for small tensors.
pub fn max_rel_err_all(build: &impl Fn(&mut Graph, &[Ix]) -> Ix, inputs: &[ArrayD<f64>]) -> f64 {
    let (ids, _g, grads) = analytic(build, inputs);
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let zero = ArrayD::zeros(x.raw_dim());
        let ga = grads.get(ids[i]).unwrap_or(&zero);
        let gs = ga.as_standard_layout();
        let gsl = gs.as_slice().unwrap();
        for flat in 0..x.len() {
            let num = central_diff(build, inputs, i, flat, 1e-5);
            worst = worst.max(rel_err(gsl[flat], num));
        }
    }
    worst
}

/// Max relative error over chosen `(input, flat)` coordinates.
pub fn max_rel_err_at(
    build: &impl Fn(&mut Graph, &[Ix]) -> Ix,
    inputs: &[ArrayD<f64>],
    coords: &[(usize, usize)],
    h: f64,
) -> f64 {
    let (ids, _g, grads) = analytic(build, inputs);
    let mut worst = 0.0f64;
    for &(i, flat) in coords {
        let zero = ArrayD::zeros(inputs[i].raw_dim());
        let ga = grads.get(ids[i]).unwrap_or(&zero);
        let gs = ga.as_standard_layout();
        let a = gs.as_slice().unwrap()[flat];
        let num = central_diff(build, inputs, i, flat, h);
        worst = worst.max(rel_err(a, num));
    }
    worst
}
