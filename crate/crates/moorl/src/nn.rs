//! Dense-network primitives on flat `f64` parameter vectors: Glorot-uniform
//! init, forward/backward passes with explicit gradients, Adam, and a central
//! finite-difference oracle used by the gradient tests.
//!
//! Parameter layout for a net with widths `[n0, n1, ..., nL]`: for each layer
//! `l`, the weight matrix `W_l` (`n_{l+1} x n_l`, row-major) followed by the
//! bias `b_l`. Hidden layers share one activation; the output layer is linear.

use rand::Rng;

use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Flat parameter vector. All entries are finite in a well-formed agent;
/// optimizer steps reject non-finite gradients before they can poison one.
pub type ParamVector = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output. Valid for the
    /// three supported activations; relu uses subgradient 0 at the kink.
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "mlp needs an input and an output layer, got widths {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero-width layer in {widths:?}"
            )));
        }
        Ok(MlpSpec { widths, activation })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        (0..self.layer_count())
            .map(|l| self.widths[l] * self.widths[l + 1] + self.widths[l + 1])
            .sum()
    }

    /// Offset of layer `l`'s weight block; its bias block starts at
    /// `offset + in_w * out_w`.
    fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| self.widths[k] * self.widths[k + 1] + self.widths[k + 1])
            .sum()
    }

    pub fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }
}

/// Network input. `OneHot(k)` is exactly the dense basis vector `e_k`; the
/// two forms produce bit-identical outputs and gradients, the one-hot form
/// just skips the zero columns.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Dense(&'a [f64]),
    OneHot(usize),
}

impl Input<'_> {
    fn check(&self, dim: usize) -> Result<()> {
        match self {
            Input::Dense(x) if x.len() != dim => Err(Error::Shape(format!(
                "input length {} does not match input width {dim}",
                x.len()
            ))),
            Input::OneHot(k) if *k >= dim => Err(Error::Shape(format!(
                "one-hot index {k} out of range for input width {dim}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Per-layer activation buffers reused across forward/backward calls so the
/// training loops stay allocation-free per sample.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("forward_trace before output")
    }

    fn resize(&mut self, spec: &MlpSpec) {
        self.acts.resize(spec.layer_count(), Vec::new());
        for (l, a) in self.acts.iter_mut().enumerate() {
            a.resize(spec.widths[l + 1], 0.0);
        }
    }
}

/// Forward pass recording every layer's activation into `trace`. Returns
/// nothing; read `trace.output()`.
pub fn forward_trace(
    spec: &MlpSpec,
    params: &[f64],
    input: Input<'_>,
    trace: &mut Trace,
) -> Result<()> {
    spec.check_params(params)?;
    input.check(spec.input_dim())?;
    trace.resize(spec);
    let last = spec.layer_count() - 1;
    for l in 0..spec.layer_count() {
        let in_w = spec.widths[l];
        let out_w = spec.widths[l + 1];
        let off = spec.layer_offset(l);
        let bias = &params[off + in_w * out_w..off + in_w * out_w + out_w];
        let act = if l == last {
            Activation::Identity
        } else {
            spec.activation
        };
        // Split borrow: previous activation lives in trace.acts[l - 1].
        let (done, rest) = trace.acts.split_at_mut(l);
        let out = &mut rest[0];
        for j in 0..out_w {
            let row = &params[off + j * in_w..off + (j + 1) * in_w];
            let z = if l == 0 {
                match input {
                    Input::Dense(x) => bias[j] + dot(row, x),
                    Input::OneHot(k) => bias[j] + row[k],
                }
            } else {
                bias[j] + dot(row, &done[l - 1])
            };
            out[j] = act.apply(z);
        }
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Backward pass for the forward recorded in `trace`. Accumulates parameter
/// gradients into `param_grad` (callers zero it when they want a plain
/// gradient) and, when `input_grad` is given, accumulates the gradient with
/// respect to the input as well.
pub fn backward_trace(
    spec: &MlpSpec,
    params: &[f64],
    input: Input<'_>,
    trace: &Trace,
    upstream: &[f64],
    param_grad: &mut [f64],
    mut input_grad: Option<&mut [f64]>,
) -> Result<()> {
    spec.check_params(params)?;
    if upstream.len() != spec.output_dim() {
        return Err(Error::Shape(format!(
            "upstream length {} does not match output width {}",
            upstream.len(),
            spec.output_dim()
        )));
    }
    if param_grad.len() != spec.param_count() {
        return Err(Error::Shape("param_grad length".into()));
    }
    let mut delta = upstream.to_vec();
    let mut delta_prev: Vec<f64> = Vec::new();
    for l in (0..spec.layer_count()).rev() {
        let in_w = spec.widths[l];
        let out_w = spec.widths[l + 1];
        let off = spec.layer_offset(l);
        // Weight and bias gradients.
        for j in 0..out_w {
            let d = delta[j];
            if d == 0.0 {
                continue;
            }
            let grow = &mut param_grad[off + j * in_w..off + (j + 1) * in_w];
            match (l, input) {
                (0, Input::OneHot(k)) => grow[k] += d,
                (0, Input::Dense(x)) => {
                    for i in 0..in_w {
                        grow[i] += d * x[i];
                    }
                }
                _ => {
                    let a_prev = &trace.acts[l - 1];
                    for i in 0..in_w {
                        grow[i] += d * a_prev[i];
                    }
                }
            }
            param_grad[off + in_w * out_w + j] += d;
        }
        // Propagate to the previous layer (or the input).
        if l > 0 {
            delta_prev.clear();
            delta_prev.resize(in_w, 0.0);
            for j in 0..out_w {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let row = &params[off + j * in_w..off + (j + 1) * in_w];
                for i in 0..in_w {
                    delta_prev[i] += row[i] * d;
                }
            }
            let a_prev = &trace.acts[l - 1];
            for i in 0..in_w {
                delta_prev[i] *= spec.activation.deriv_from_output(a_prev[i]);
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        } else if let Some(ig) = input_grad.as_deref_mut() {
            if ig.len() != in_w {
                return Err(Error::Shape("input_grad length".into()));
            }
            for j in 0..out_w {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let row = &params[off + j * in_w..off + (j + 1) * in_w];
                for i in 0..in_w {
                    ig[i] += row[i] * d;
                }
            }
        }
    }
    Ok(())
}

/// Convenience forward pass.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: Input<'_>) -> Result<Vec<f64>> {
    let mut trace = Trace::default();
    forward_trace(spec, params, input, &mut trace)?;
    Ok(trace.output().to_vec())
}

/// Convenience backward pass: gradient of `dot(upstream, f(input))` with
/// respect to parameters and input.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &[f64],
    input: Input<'_>,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut trace = Trace::default();
    forward_trace(spec, params, input, &mut trace)?;
    let mut pg = vec![0.0; spec.param_count()];
    let mut ig = vec![0.0; spec.input_dim()];
    backward_trace(spec, params, input, &trace, upstream, &mut pg, Some(&mut ig))?;
    Ok((pg, ig))
}

/// Glorot-uniform init: weights `U(-b, b)` with `b = sqrt(6 / (fan_in +
/// fan_out))`, biases zero. Draw order is fixed, so equal seeds give equal
/// parameters.
pub fn init_params<R: Rng>(spec: &MlpSpec, rng: &mut R) -> ParamVector {
    let mut params = vec![0.0; spec.param_count()];
    for l in 0..spec.layer_count() {
        let in_w = spec.widths[l];
        let out_w = spec.widths[l + 1];
        let off = spec.layer_offset(l);
        let b = (6.0 / (in_w + out_w) as f64).sqrt();
        for w in &mut params[off..off + in_w * out_w] {
            *w = rng.random_range(-b..b);
        }
    }
    params
}

/// Adam with bias correction. `lr` is mutable state so schedules can adjust
/// it between steps without resetting the moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        AdamState {
            lr,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }
}

/// One Adam update in place. Rejects non-finite gradient entries, naming the
/// first offending index; `lr = 0` leaves `params` unchanged while the
/// moments still advance.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != state.dim() || grad.len() != state.dim() {
        return Err(Error::Shape(format!(
            "adam dim {} vs params {} / grad {}",
            state.dim(),
            params.len(),
            grad.len()
        )));
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            index,
        });
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Central finite differences with step `h`: the gradient oracle every
/// analytic gradient in this crate is checked against.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(
    mut loss: F,
    params: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let p = params[i];
        work[i] = p + h;
        let up = loss(&work);
        work[i] = p - h;
        let down = loss(&work);
        work[i] = p;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    /// Independent scalar-by-scalar MLP evaluation, written against the
    /// parameter layout contract rather than the production code paths.
    fn reference_forward(widths: &[usize], act: Activation, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut off = 0;
        for l in 0..widths.len() - 1 {
            let (in_w, out_w) = (widths[l], widths[l + 1]);
            let mut next = vec![0.0; out_w];
            for j in 0..out_w {
                let mut z = params[off + in_w * out_w + j];
                for i in 0..in_w {
                    z += params[off + j * in_w + i] * cur[i];
                }
                next[j] = if l + 2 == widths.len() {
                    z
                } else {
                    match act {
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                        Activation::Identity => z,
                    }
                };
            }
            off += in_w * out_w + out_w;
            cur = next;
        }
        cur
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu).is_err());
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Relu).unwrap();
        let params = vec![0.0; spec.param_count()];
        assert!(mlp_forward(&spec, &params, Input::Dense(&[1.0])).is_err());
        assert!(mlp_forward(&spec, &params[1..], Input::Dense(&[1.0, 2.0])).is_err());
        assert!(mlp_forward(&spec, &params, Input::OneHot(2)).is_err());
    }

    #[test]
    fn forward_matches_independent_reference() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Relu).unwrap();
        let mut rng = stream(42, 0);
        let params = init_params(&spec, &mut rng);
        let x = [0.5, -0.5];
        let got = mlp_forward(&spec, &params, Input::Dense(&x)).unwrap();
        let want = reference_forward(&[2, 3, 1], Activation::Relu, &params, &x);
        assert_eq!(got.len(), 1);
        assert!((got[0] - want[0]).abs() < 1e-12, "{got:?} vs {want:?}");
    }

    #[test]
    fn forward_matches_reference_across_shapes() {
        for (seed, widths, act) in [
            (1u64, vec![4, 5, 3], Activation::Tanh),
            (2, vec![1, 1], Activation::Identity),
            (3, vec![6, 4, 4, 2], Activation::Relu),
        ] {
            let spec = MlpSpec::new(widths.clone(), act).unwrap();
            let mut rng = stream(seed, 0);
            let params = init_params(&spec, &mut rng);
            let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = mlp_forward(&spec, &params, Input::Dense(&x)).unwrap();
            let want = reference_forward(&widths, act, &params, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_path_is_bit_identical_to_dense() {
        let spec = MlpSpec::new(vec![7, 5, 3], Activation::Relu).unwrap();
        let mut rng = stream(9, 0);
        let params = init_params(&spec, &mut rng);
        for k in 0..7 {
            let mut dense = vec![0.0; 7];
            dense[k] = 1.0;
            let a = mlp_forward(&spec, &params, Input::Dense(&dense)).unwrap();
            let b = mlp_forward(&spec, &params, Input::OneHot(k)).unwrap();
            assert_eq!(a, b);
            let up = [0.3, -1.0, 0.25];
            let (pg_a, ig_a) = mlp_backward(&spec, &params, Input::Dense(&dense), &up).unwrap();
            let (pg_b, ig_b) = mlp_backward(&spec, &params, Input::OneHot(k), &up).unwrap();
            assert_eq!(pg_a, pg_b);
            assert_eq!(ig_a, ig_b);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // 27 seeded configurations across shapes and activations.
        let shapes: [&[usize]; 3] = [&[2, 3, 1], &[4, 6, 6, 2], &[3, 8, 4]];
        let acts = [Activation::Relu, Activation::Tanh, Activation::Identity];
        let mut checked = 0;
        for (si, widths) in shapes.iter().enumerate() {
            for (ai, act) in acts.iter().enumerate() {
                for rep in 0..3 {
                    let seed = (si * 100 + ai * 10 + rep) as u64;
                    let spec = MlpSpec::new(widths.to_vec(), *act).unwrap();
                    let mut rng = stream(seed, 3);
                    let params = init_params(&spec, &mut rng);
                    let x: Vec<f64> =
                        (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let up: Vec<f64> = (0..*widths.last().unwrap())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect();
                    let (pg, ig) = mlp_backward(&spec, &params, Input::Dense(&x), &up).unwrap();
                    let fd_p = finite_diff_grad(
                        |p| {
                            let out = mlp_forward(&spec, p, Input::Dense(&x)).unwrap();
                            dot(&out, &up)
                        },
                        &params,
                        1e-5,
                    );
                    for i in 0..pg.len() {
                        assert!(
                            rel_err(pg[i], fd_p[i]) < 1e-4,
                            "param grad {i}: {} vs {}",
                            pg[i],
                            fd_p[i]
                        );
                    }
                    let fd_x = finite_diff_grad(
                        |xv| {
                            let out = mlp_forward(&spec, &params, Input::Dense(xv)).unwrap();
                            dot(&out, &up)
                        },
                        &x,
                        1e-5,
                    );
                    for i in 0..ig.len() {
                        assert!(rel_err(ig[i], fd_x[i]) < 1e-4);
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked >= 20);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut st = AdamState::new(1, 1e-3);
        let mut p = vec![0.0];
        adam_step(&mut st, &mut p, &[1.0]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-6 * 1e-3 + 1e-12, "{}", p[0]);
    }

    #[test]
    fn adam_zero_lr_is_identity_on_params() {
        let mut st = AdamState::new(3, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        adam_step(&mut st, &mut p, &[0.3, -0.7, 10.0]).unwrap();
        assert_eq!(p, before);
        assert!(st.m.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut st = AdamState::new(2, 1e-3);
        let mut p = vec![0.0, 0.0];
        let err = adam_step(&mut st, &mut p, &[0.0, f64::NAN]).unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn adam_matches_textbook_reference() {
        // Independent reference: the update equations transcribed directly,
        // scalars only.
        let mut st = AdamState::new(1, 0.01);
        let mut p = vec![0.3];
        let grads = [0.5, -0.2, 0.9, 0.1, -0.4];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        for (t, g) in grads.iter().enumerate() {
            adam_step(&mut st, &mut p, &[*g]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let c = [0.5, -1.5, 2.0];
        let p = [1.0, 2.0, -3.0];
        let g = finite_diff_grad(
            |q| q.iter().zip(&c).map(|(x, ci)| ci * x * x).sum(),
            &p,
            1e-5,
        );
        for i in 0..3 {
            assert!((g[i] - 2.0 * c[i] * p[i]).abs() < 1e-6);
        }
    }
}
