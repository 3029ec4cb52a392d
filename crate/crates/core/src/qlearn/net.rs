//! Dense tanh network with hand-written forward, backward and
//! Hessian-vector passes over a flat parameter vector.
//!
//! Hidden layers use `tanh`; the output layer is linear. The Hessian-vector
//! product is the R-operator: a forward pass carrying directional
//! derivatives followed by a backward pass that differentiates the ordinary
//! backward pass along the same direction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{LayerSlot, Layout, ParamVector, DEFAULT_MODEL_BYTES};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetConfig {
    pub layer_widths: Vec<usize>,
    /// Half-width of the uniform initializer. `None` uses `1/sqrt(fan_in)`
    /// per layer.
    #[serde(default)]
    pub init_scale: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for QNetConfig {
    fn default() -> Self {
        QNetConfig {
            layer_widths: vec![40, 64, 64, 4],
            init_scale: None,
            seed: 0,
        }
    }
}

impl QNetConfig {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Self {
        QNetConfig {
            layer_widths,
            init_scale: None,
            seed,
        }
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::from_widths(&self.layer_widths)
    }

    pub fn validate(&self, observation_len: usize, actions: usize) -> Result<()> {
        let layout = self.layout()?;
        if layout.input_width() != observation_len {
            return Err(Error::config(
                "qnet.layer_widths[0]",
                format!("expected observation length {observation_len}"),
            ));
        }
        if layout.output_width() != actions {
            return Err(Error::config(
                "qnet.layer_widths[-1]",
                format!("expected {actions} actions"),
            ));
        }
        if matches!(self.init_scale, Some(s) if !(s >= 0.0)) {
            return Err(Error::config("qnet.init_scale", "must be non-negative"));
        }
        Ok(())
    }

    /// Uniform initialization of weights and biases. Panics on an invalid
    /// width list; call [`QNetConfig::validate`] first for config input.
    pub fn init<T: Scalar>(&self) -> ParamVector<T> {
        self.init_with_seed(self.seed)
    }

    pub fn init_with_seed<T: Scalar>(&self, seed: u64) -> ParamVector<T> {
        let layout = self.layout().expect("valid layer widths");
        let mut rng = seed::rng(seed::derive(seed, seed::TAG_INIT));
        let mut values = Vec::with_capacity(layout.param_count());
        for shape in layout.layers() {
            let scale = self.init_scale.unwrap_or_else(|| 1.0 / (shape.inputs as f64).sqrt());
            for _ in 0..shape.param_count() {
                let u: f64 = rng.random_range(-1.0..=1.0);
                values.push(T::lit(u * scale));
            }
        }
        ParamVector::new(values, layout, DEFAULT_MODEL_BYTES).expect("length matches layout")
    }
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[l + 1]`
/// the output of layer `l`.
pub(crate) struct Trace<T> {
    pub acts: Vec<Vec<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("trace has an output")
    }
}

fn affine<T: Scalar>(w: &[T], slot: &LayerSlot, x: &[T]) -> Vec<T> {
    let n_in = slot.shape.inputs;
    (0..slot.shape.outputs)
        .map(|o| {
            let row = &w[slot.weights + o * n_in..slot.weights + (o + 1) * n_in];
            row.iter()
                .zip(x)
                .fold(w[slot.biases + o], |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect()
}

/// `W^T d` for the layer in `slot`.
fn affine_transpose<T: Scalar>(w: &[T], slot: &LayerSlot, d: &[T]) -> Vec<T> {
    let n_in = slot.shape.inputs;
    let mut out = vec![T::zero(); n_in];
    for (o, &dv) in d.iter().enumerate() {
        if dv == T::zero() {
            continue;
        }
        let row = &w[slot.weights + o * n_in..slot.weights + (o + 1) * n_in];
        for (acc, &wi) in out.iter_mut().zip(row) {
            *acc = *acc + wi * dv;
        }
    }
    out
}

pub(crate) fn forward_trace<T: Scalar>(params: &[T], layout: &Layout, input: &[T]) -> Trace<T> {
    let slots = layout.slots();
    let mut acts = Vec::with_capacity(slots.len() + 1);
    acts.push(input.to_vec());
    for (l, slot) in slots.iter().enumerate() {
        let mut z = affine(params, slot, &acts[l]);
        if l + 1 < slots.len() {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    Trace { acts }
}

/// Accumulates `d loss / d params` into `grad` given `d_out = d loss / d output`.
pub(crate) fn backward<T: Scalar>(params: &[T], layout: &Layout, trace: &Trace<T>, d_out: &[T], grad: &mut [T]) {
    let slots = layout.slots();
    let mut delta = d_out.to_vec();
    for l in (0..slots.len()).rev() {
        let slot = &slots[l];
        let x = &trace.acts[l];
        let n_in = slot.shape.inputs;
        for (o, &d) in delta.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            let row = &mut grad[slot.weights + o * n_in..slot.weights + (o + 1) * n_in];
            for (g, &xi) in row.iter_mut().zip(x) {
                *g = *g + d * xi;
            }
            grad[slot.biases + o] = grad[slot.biases + o] + d;
        }
        if l > 0 {
            let back = affine_transpose(params, slot, &delta);
            delta = back
                .iter()
                .zip(&trace.acts[l])
                .map(|(&e, &a)| e * (T::one() - a * a))
                .collect();
        }
    }
}

/// Second-order information about the loss as a function of the network
/// output, evaluated for one sample.
pub(crate) trait OutputLoss<T> {
    /// `d loss / d output`.
    fn gradient(&self, output: &[T]) -> Vec<T>;
    /// `(d^2 loss / d output^2) * r_output`.
    fn curvature(&self, output: &[T], r_output: &[T]) -> Vec<T>;
}

/// Accumulates `H v` into `out`, where `H` is the Hessian of the
/// single-sample loss with respect to the parameters.
pub(crate) fn hessian_vector<T: Scalar, L: OutputLoss<T>>(
    params: &[T],
    layout: &Layout,
    input: &[T],
    loss: &L,
    v: &[T],
    out: &mut [T],
) {
    let slots = layout.slots();
    let n = slots.len();

    // forward with directional derivatives
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    let mut r_acts: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    let mut r_pre: Vec<Vec<T>> = Vec::with_capacity(n);
    acts.push(input.to_vec());
    r_acts.push(vec![T::zero(); input.len()]);
    for (l, slot) in slots.iter().enumerate() {
        let x = &acts[l];
        let rx = &r_acts[l];
        let z = affine(params, slot, x);
        // R(z) = R(W) x + W R(x) + R(b)
        let a = affine(v, slot, x);
        let b = linear(params, slot, rx);
        let rz: Vec<T> = a.iter().zip(&b).map(|(&p, &q)| p + q).collect();
        if l + 1 < n {
            let y: Vec<T> = z.iter().map(|v| v.tanh()).collect();
            let ry = y.iter().zip(&rz).map(|(&yi, &r)| (T::one() - yi * yi) * r).collect();
            acts.push(y);
            r_acts.push(ry);
        } else {
            acts.push(z);
            r_acts.push(rz.clone());
        }
        r_pre.push(rz);
    }

    let output = &acts[n];
    let mut delta = loss.gradient(output);
    let mut r_delta = loss.curvature(output, &r_acts[n]);

    for l in (0..n).rev() {
        let slot = &slots[l];
        let x = &acts[l];
        let rx = &r_acts[l];
        let n_in = slot.shape.inputs;
        for o in 0..slot.shape.outputs {
            let (d, rd) = (delta[o], r_delta[o]);
            let row = &mut out[slot.weights + o * n_in..slot.weights + (o + 1) * n_in];
            for ((g, &xi), &rxi) in row.iter_mut().zip(x).zip(rx) {
                *g = *g + rd * xi + d * rxi;
            }
            out[slot.biases + o] = out[slot.biases + o] + rd;
        }
        if l > 0 {
            let e = affine_transpose(params, slot, &delta);
            let re1 = affine_transpose(v, slot, &delta);
            let re2 = affine_transpose(params, slot, &r_delta);
            let y = &acts[l];
            let rz = &r_pre[l - 1];
            let mut next = Vec::with_capacity(n_in);
            let mut r_next = Vec::with_capacity(n_in);
            for i in 0..n_in {
                let dt = T::one() - y[i] * y[i];
                let ddt = -(T::one() + T::one()) * y[i] * dt;
                next.push(e[i] * dt);
                r_next.push((re1[i] + re2[i]) * dt + e[i] * ddt * rz[i]);
            }
            delta = next;
            r_delta = r_next;
        }
    }
}

/// `W x` without the bias term.
fn linear<T: Scalar>(w: &[T], slot: &LayerSlot, x: &[T]) -> Vec<T> {
    let n_in = slot.shape.inputs;
    (0..slot.shape.outputs)
        .map(|o| {
            let row = &w[slot.weights + o * n_in..slot.weights + (o + 1) * n_in];
            row.iter().zip(x).fold(T::zero(), |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect()
}

/// Per-action Q-values for one observation.
pub fn q_forward<T: Scalar>(params: &ParamVector<T>, obs: &Observation<T>) -> Result<Vec<T>> {
    q_values(params.values(), params.layout(), obs.as_slice())
}

pub(crate) fn q_values<T: Scalar>(params: &[T], layout: &Layout, input: &[T]) -> Result<Vec<T>> {
    if input.len() != layout.input_width() {
        return Err(Error::Layout(format!(
            "observation of length {} for input width {}",
            input.len(),
            layout.input_width()
        )));
    }
    Ok(forward_trace(params, layout, input).acts.pop().expect("output layer"))
}
