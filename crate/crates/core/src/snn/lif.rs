//! Leaky integrate-and-fire dynamics.
//!
//! ```text
//! u[t] = I[t] + tau * u[t-1] * (1 - y[t-1])
//! y[t] = 1 if u[t] > v_th else 0
//! ```
//!
//! The carried potential is masked by the previous spike (hard reset of the
//! carried term). The backward pass replaces the Heaviside derivative with
//! the arctan surrogate and treats the reset mask as a constant.

use std::f64::consts::PI;

use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    /// Leak factor, in (0, 1).
    pub tau: f64,
    pub v_th: f64,
    /// Surrogate sharpness.
    pub alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            v_th: 1.0,
            alpha: 2.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidValue(format!("tau {} not in (0, 1)", self.tau)));
        }
        if !(self.v_th > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::InvalidValue("v_th and alpha must be positive".into()));
        }
        Ok(())
    }
}

/// `(1/pi) * atan((pi/2) * alpha * x) + 1/2`
pub fn surrogate_forward(x: f64, alpha: f64) -> f64 {
    (PI / 2.0 * alpha * x).atan() / PI + 0.5
}

/// `alpha / (2 * (1 + ((pi/2) * alpha * x)^2))`
pub fn surrogate_grad(x: f64, alpha: f64) -> f64 {
    let z = PI / 2.0 * alpha * x;
    alpha / (2.0 * (1.0 + z * z))
}

fn surrogate_grad_f<F: Real>(x: F, alpha: F) -> F {
    let z = F::lit(PI / 2.0) * alpha * x;
    alpha / (F::lit(2.0) * (F::one() + z * z))
}

fn surrogate_forward_f<F: Real>(x: F, alpha: F) -> F {
    (F::lit(PI / 2.0) * alpha * x).atan() / F::lit(PI) + F::lit(0.5)
}

/// Membrane potentials and last outputs of one layer. Starts at rest.
#[derive(Debug, Clone, PartialEq)]
pub struct LifLayerState<F> {
    pub u: Vec<F>,
    pub y_prev: Vec<F>,
}

impl<F: Real> LifLayerState<F> {
    pub fn new(neurons: usize) -> Self {
        Self {
            u: vec![F::zero(); neurons],
            y_prev: vec![F::zero(); neurons],
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// How the forward pass turns potentials into outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Hard threshold, the real network.
    #[default]
    Heaviside,
    /// Smooth surrogate in place of the threshold. Only used to build a
    /// differentiable reference for gradient checks.
    Relaxed,
}

/// Everything the backward pass needs from one LIF step.
#[derive(Debug, Clone, PartialEq)]
pub struct LifRecord<F> {
    pub u: Vec<F>,
    /// `1 - y[t-1]` as applied this step.
    pub gate: Vec<F>,
    pub y: Vec<F>,
}

/// One LIF step returning the spikes; the state advances in place.
pub fn lif_step<F: Real>(state: &mut LifLayerState<F>, input: &[F], params: &LifParams) -> Result<Vec<F>> {
    lif_forward(state, input, params, SpikeFn::Heaviside, None).map(|r| r.y)
}

/// One LIF step keeping the record for BPTT. `gate_override` replaces the
/// `1 - y[t-1]` mask (gradient checks freeze it this way).
pub fn lif_forward<F: Real>(
    state: &mut LifLayerState<F>,
    input: &[F],
    params: &LifParams,
    spike_fn: SpikeFn,
    gate_override: Option<&[F]>,
) -> Result<LifRecord<F>> {
    if input.len() != state.len() {
        return Err(Error::dimension(format!("{} neurons", state.len()), input.len()));
    }
    let gate: Vec<F> = match gate_override {
        Some(g) if g.len() == state.len() => g.to_vec(),
        Some(g) => return Err(Error::dimension(state.len(), g.len())),
        None => state.y_prev.iter().map(|&y| F::one() - y).collect(),
    };
    let tau = F::lit(params.tau);
    let v_th = F::lit(params.v_th);
    let alpha = F::lit(params.alpha);
    let u: Vec<F> = input
        .iter()
        .zip(&state.u)
        .zip(&gate)
        .map(|((&i, &u_prev), &g)| i + tau * u_prev * g)
        .collect();
    let y: Vec<F> = u
        .iter()
        .map(|&v| match spike_fn {
            SpikeFn::Heaviside => {
                if v > v_th {
                    F::one()
                } else {
                    F::zero()
                }
            }
            SpikeFn::Relaxed => surrogate_forward_f(v - v_th, alpha),
        })
        .collect();
    state.u.clone_from(&u);
    state.y_prev.clone_from(&y);
    Ok(LifRecord { u, gate, y })
}

/// Backward through one LIF step.
///
/// `grad_y` is dL/dy[t] from downstream, `carry` holds dL/du[t] arriving
/// from step t+1 and is overwritten with dL/du[t-1]. Returns dL/dI[t].
pub fn lif_backward_step<F: Real>(record: &LifRecord<F>, grad_y: &[F], carry: &mut [F], params: &LifParams) -> Vec<F> {
    let tau = F::lit(params.tau);
    let v_th = F::lit(params.v_th);
    let alpha = F::lit(params.alpha);
    let mut grad_in = Vec::with_capacity(record.u.len());
    for i in 0..record.u.len() {
        let du = grad_y[i] * surrogate_grad_f(record.u[i] - v_th, alpha) + carry[i];
        carry[i] = du * tau * record.gate[i];
        grad_in.push(du);
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(inputs: &[f64], params: &LifParams) -> (Vec<f64>, Vec<f64>) {
        let mut state = LifLayerState::<f64>::new(1);
        let mut us = Vec::new();
        let mut ys = Vec::new();
        for &i in inputs {
            let y = lif_step(&mut state, &[i], params).unwrap();
            us.push(state.u[0]);
            ys.push(y[0]);
        }
        (us, ys)
    }

    #[test]
    fn unit_drive_hand_trace() {
        let p = LifParams::default();
        let (us, ys) = run(&[1.0; 8], &p);
        assert_eq!(us, vec![1.0, 1.5, 1.0, 1.5, 1.0, 1.5, 1.0, 1.5]);
        assert_eq!(ys, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn no_drive_never_fires() {
        let p = LifParams::default();
        let mut state = LifLayerState::<f64> {
            u: vec![0.8],
            y_prev: vec![0.0],
        };
        for k in 1..20 {
            let y = lif_step(&mut state, &[0.0], &p).unwrap();
            assert_eq!(y[0], 0.0);
            assert!((state.u[0] - 0.8 * 0.5f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn supra_threshold_drive_fires_every_step() {
        for tau in [0.1, 0.5, 0.9] {
            let p = LifParams { tau, ..LifParams::default() };
            let (us, ys) = run(&[1.0 + 1e-6; 10], &p);
            assert!(ys.iter().all(|&y| y == 1.0));
            // first step has nothing to carry, later steps are masked
            assert!(us.iter().all(|&u| u == 1.0 + 1e-6));
        }
    }

    #[test]
    fn threshold_is_strict() {
        let mut state = LifLayerState::<f64>::new(1);
        let y = lif_step(&mut state, &[1.0], &LifParams::default()).unwrap();
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut state = LifLayerState::<f64>::new(3);
        assert!(lif_step(&mut state, &[1.0, 2.0], &LifParams::default()).is_err());
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_forward(0.0, 2.0), 0.5);
        assert_eq!(surrogate_grad(0.0, 2.0), 1.0);
        assert!(surrogate_forward(1e9, 2.0) > 1.0 - 1e-9);
        assert!(surrogate_forward(-1e9, 2.0) < 1e-9);
    }

    #[test]
    fn surrogate_grad_matches_central_differences() {
        let h = 1e-5;
        for i in 0..=1000 {
            let x = -5.0 + i as f64 * 0.01;
            let fd = (surrogate_forward(x + h, 2.0) - surrogate_forward(x - h, 2.0)) / (2.0 * h);
            let g = surrogate_grad(x, 2.0);
            assert!(((fd - g) / g).abs() < 1e-4, "x={x}: fd {fd} vs {g}");
            assert_eq!(g, surrogate_grad(-x, 2.0));
            assert!(g <= 1.0);
        }
    }

    #[test]
    fn potential_stays_bounded() {
        // |I| <= M implies |u| <= M / (1 - tau)
        let p = LifParams { tau: 0.8, v_th: 100.0, alpha: 2.0 };
        let m = 2.0;
        let mut state = LifLayerState::<f64>::new(1);
        for k in 0..200 {
            let i = if k % 3 == 0 { -m } else { m };
            lif_step(&mut state, &[i], &p).unwrap();
            assert!(state.u[0].abs() <= m / (1.0 - p.tau) + 1e-12);
        }
    }

    #[test]
    fn params_validation() {
        assert!(LifParams::default().validate().is_ok());
        assert!(LifParams { tau: 1.0, ..Default::default() }.validate().is_err());
        assert!(LifParams { v_th: 0.0, ..Default::default() }.validate().is_err());
    }
}
