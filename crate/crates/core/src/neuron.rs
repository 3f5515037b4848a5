//! Leaky integrate-and-fire dynamics with hard reset, and the arctangent
//! surrogate used in place of the Heaviside derivative during backward.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{SpikeTensor, Tensor};

/// Neuron constants. Defaults: τ = 2, V_th = 1, V_reset = 0.5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.5,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0) {
            return Err(Error::Config(format!("LIF tau must be >= 1, got {}", self.tau)));
        }
        if !(self.v_reset < self.v_th) {
            return Err(Error::Config(format!(
                "LIF v_reset ({}) must be below v_th ({})",
                self.v_reset, self.v_th
            )));
        }
        Ok(())
    }

    /// Charge step: leak toward `v_reset`, then integrate `x`.
    #[inline]
    pub fn charge(&self, v: f64, x: f64) -> f64 {
        v - (v - self.v_reset) / self.tau + x
    }
}

/// Sharpness of the arctangent surrogate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateParams {
    pub alpha: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { alpha: 5.0 }
    }
}

/// Surrogate derivative `α / (2 (1 + (π/2 · α · u)²))` for `u = H − V_th`.
#[inline]
pub fn surrogate_grad(u: f64, sg: SurrogateParams) -> f64 {
    let z = FRAC_PI_2 * sg.alpha * u;
    sg.alpha / (2.0 * (1.0 + z * z))
}

/// Smooth primitive of [`surrogate_grad`]: `atan(π/2 · α · u) / π + 1/2`.
#[inline]
pub fn surrogate_primitive(u: f64, sg: SurrogateParams) -> f64 {
    (FRAC_PI_2 * sg.alpha * u).atan() / PI + 0.5
}

/// How the spike nonlinearity is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Heaviside forward (`H ≥ V_th`), surrogate backward, reset gate detached.
    #[default]
    Heaviside,
    /// Smooth twin: forward uses [`surrogate_primitive`] and backward is its
    /// exact derivative, including the path through the reset gate.
    Smooth,
}

/// Membrane potential carried across steps, shape `[B × D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: Tensor,
}

impl LifState {
    pub fn reset(shape: &[usize], p: &LifParams) -> Self {
        Self {
            v: Tensor::full(shape, p.v_reset),
        }
    }
}

/// One time step. Returns the spikes and the updated state.
pub fn lif_step(x_t: &Tensor, state: &LifState, p: &LifParams) -> Result<(SpikeTensor, LifState)> {
    x_t.expect_shape("lif_step", state.v.shape())?;
    let mut s = Tensor::zeros(x_t.shape());
    let mut v = state.v.clone();
    for ((sv, vv), &x) in s.data_mut().iter_mut().zip(v.data_mut()).zip(x_t.data()) {
        let h = p.charge(*vv, x);
        let spike = if h >= p.v_th { 1.0 } else { 0.0 };
        *sv = spike;
        *vv = h * (1.0 - spike) + p.v_reset * spike;
    }
    Ok((SpikeTensor::try_from(s)?, LifState { v }))
}

/// Output of [`lif_forward`]: spikes (or smooth twin activations) and the
/// pre-reset potentials `H`.
pub struct LifTrace {
    pub spikes: Vec<f64>,
    pub charge: Vec<f64>,
}

/// Run the neuron over a `[t, …]` buffer starting from `v_reset`.
pub fn lif_forward(x: &[f64], t: usize, p: &LifParams, sg: SurrogateParams, mode: SpikeFn) -> LifTrace {
    let width = if t == 0 { 0 } else { x.len() / t };
    let mut spikes = vec![0.0; x.len()];
    let mut charge = vec![0.0; x.len()];
    // Each column is an independent neuron; split the work over columns.
    let mut cols: Vec<f64> = vec![0.0; 2 * x.len()];
    par::for_each_chunk_mut(&mut cols, 2 * t.max(1), |col, buf| {
        let (sbuf, hbuf) = buf.split_at_mut(t);
        let mut v = p.v_reset;
        for ti in 0..t {
            let h = p.charge(v, x[ti * width + col]);
            let s = match mode {
                SpikeFn::Heaviside => {
                    if h >= p.v_th {
                        1.0
                    } else {
                        0.0
                    }
                }
                SpikeFn::Smooth => surrogate_primitive(h - p.v_th, sg),
            };
            sbuf[ti] = s;
            hbuf[ti] = h;
            v = h * (1.0 - s) + p.v_reset * s;
        }
    });
    for col in 0..width {
        let base = col * 2 * t;
        for ti in 0..t {
            spikes[ti * width + col] = cols[base + ti];
            charge[ti * width + col] = cols[base + t + ti];
        }
    }
    LifTrace { spikes, charge }
}

/// Backpropagation through time for [`lif_forward`].
///
/// `ds` is the upstream gradient with respect to the spikes; returns the
/// gradient with respect to the input currents.
pub fn lif_backward(
    ds: &[f64],
    trace: &LifTrace,
    t: usize,
    p: &LifParams,
    sg: SurrogateParams,
    mode: SpikeFn,
) -> Vec<f64> {
    let width = if t == 0 { 0 } else { ds.len() / t };
    let leak = 1.0 - 1.0 / p.tau;
    let mut cols = vec![0.0; ds.len()];
    par::for_each_chunk_mut(&mut cols, t.max(1), |col, dxbuf| {
        // gradient flowing into V[ti] from H[ti + 1]
        let mut dv = 0.0;
        for ti in (0..t).rev() {
            let idx = ti * width + col;
            let h = trace.charge[idx];
            let s = trace.spikes[idx];
            let dsdh = surrogate_grad(h - p.v_th, sg);
            let dvdh = match mode {
                SpikeFn::Heaviside => 1.0 - s,
                SpikeFn::Smooth => (1.0 - s) + (p.v_reset - h) * dsdh,
            };
            let dh = ds[idx] * dsdh + dv * dvdh;
            dxbuf[ti] = dh;
            dv = dh * leak;
        }
    });
    let mut dx = vec![0.0; ds.len()];
    for col in 0..width {
        for ti in 0..t {
            dx[ti * width + col] = cols[col * t + ti];
        }
    }
    dx
}

/// Spike function `SN(·)` over a time-major tensor `[T × …]`.
pub fn lif_sequence(x: &Tensor, p: &LifParams) -> Result<SpikeTensor> {
    let t = x.shape().first().copied().unwrap_or(0);
    let trace = lif_forward(x.data(), t, p, SurrogateParams::default(), SpikeFn::Heaviside);
    SpikeTensor::try_from(Tensor::new(x.shape(), trace.spikes)?)
}
