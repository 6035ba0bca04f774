//! Closed-form Gaussian moments of piecewise-constant affine controlled SDEs.
//!
//! In the shared eigenbasis every coordinate evolves independently as an
//! Ornstein-Uhlenbeck process, so one interval of length `Δt` maps
//!
//! ```text
//! m̂' = e^{-λΔt} m̂ + Δt φ(λΔt) α̂
//! Σ̂' = e^{-2λΔt} Σ̂ + σ² Δt φ(2λΔt)
//! ```
//!
//! with `φ(x) = (1 - e^{-x}) / x`, which is continuous through `λ = 0`.

use log::warn;
use nalgebra::DVector;

use crate::error::{ensure_finite, Error, Result};
use crate::rng::RandomStream;
use crate::types::{Covariance, GaussianState, PiecewiseControl, SpdOperator, TimeGrid};

const SERIES_THRESHOLD: f64 = 1e-4;

/// `(1 - e^{-x}) / x`, with the limit 1 at `x = 0`.
pub fn phi(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// Derivative of [`phi`].
pub fn phi_prime(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        -0.5 + x / 3.0 - x * x / 8.0 + x * x * x / 30.0
    } else {
        let e = (-x).exp();
        (x * e + (-x).exp_m1()) / (x * x)
    }
}

/// Per-coordinate coefficients of one interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub mean_decay: f64,
    /// Multiplies `α̂`.
    pub mean_gain: f64,
    pub var_decay: f64,
    pub var_add: f64,
}

pub fn step_coefficients(lambda: f64, dt: f64, sigma: f64) -> StepCoefficients {
    let x = lambda * dt;
    StepCoefficients {
        mean_decay: (-x).exp(),
        mean_gain: dt * phi(x),
        var_decay: (-2.0 * x).exp(),
        var_add: sigma * sigma * dt * phi(2.0 * x),
    }
}

fn eigen_parts(state: &GaussianState) -> Result<(&DVector<f64>, &DVector<f64>)> {
    match &state.cov {
        Covariance::EigenDiag(v) => Ok((&state.mean, v)),
        Covariance::Full(_) => Err(Error::InvalidArgument(
            "local_step expects an eigenbasis-diagonal state".into(),
        )),
    }
}

/// Advances an eigenbasis state by `dt` under constant spectrum `lambda` and
/// eigenbasis offset `alpha_hat`.
pub fn local_step(
    state: &GaussianState,
    lambda: &DVector<f64>,
    alpha_hat: &DVector<f64>,
    dt: f64,
    sigma: f64,
) -> Result<GaussianState> {
    let (mean, var) = eigen_parts(state)?;
    let d = mean.len();
    if lambda.len() != d || alpha_hat.len() != d {
        return Err(Error::Dimension("spectrum/offset length".into()));
    }
    if !dt.is_finite() || dt < 0.0 {
        return Err(Error::InvalidArgument(format!("negative or non-finite step {dt}")));
    }
    if !sigma.is_finite() {
        return Err(Error::NonFinite("sigma".into()));
    }
    ensure_finite("spectrum", lambda.as_slice())?;
    ensure_finite("offset", alpha_hat.as_slice())?;
    if lambda.iter().any(|&l| l < 0.0) {
        return Err(Error::InvalidArgument("negative spectrum entry".into()));
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let mut m = DVector::zeros(d);
    let mut v = DVector::zeros(d);
    for j in 0..d {
        let c = step_coefficients(lambda[j], dt, sigma);
        m[j] = c.mean_decay * mean[j] + c.mean_gain * alpha_hat[j];
        v[j] = c.var_decay * var[j] + c.var_add;
    }
    GaussianState::eigen_diag(m, v)
}

/// Eigenbasis Gaussian marginals at every grid timestamp.
#[derive(Clone, Debug)]
pub struct MomentTrajectory {
    pub grid: TimeGrid,
    pub states: Vec<GaussianState>,
    pub operator: SpdOperator,
}

impl MomentTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    /// Marginal `i` in the standard basis.
    pub fn standard_state(&self, i: usize) -> Result<GaussianState> {
        self.operator.state_from_eigenbasis(&self.states[i])
    }

    pub fn standard_mean(&self, i: usize) -> DVector<f64> {
        self.operator.basis() * &self.states[i].mean
    }
}

/// Rotates the initial state into the eigenbasis of `control`, keeping only the
/// diagonal of `EᵀΣ₀E`.
pub fn initial_eigen_state(init: &GaussianState, operator: &SpdOperator) -> Result<GaussianState> {
    if init.dim() != operator.dim() {
        return Err(Error::Dimension(format!(
            "initial state has dimension {}, control has {}",
            init.dim(),
            operator.dim()
        )));
    }
    let (state, off) = operator.state_to_eigenbasis(init)?;
    if off > 1e-12 {
        warn!("dropping off-diagonal eigenbasis covariance of the initial state (max |entry| = {off:e})");
    }
    Ok(state)
}

/// Interval-by-interval propagation.
pub fn propagate_sequential(init: &GaussianState, control: &PiecewiseControl) -> Result<MomentTrajectory> {
    let first = initial_eigen_state(init, &control.operator)?;
    let alphas = control.eigen_offsets();
    let deltas = control.grid.deltas();
    let mut states = Vec::with_capacity(control.grid.len());
    states.push(first);
    for (i, dt) in deltas.iter().enumerate() {
        let next = local_step(
            states.last().expect("nonempty"),
            control.operator.spectrum(i),
            &alphas[i],
            *dt,
            control.sigma,
        )?;
        states.push(next);
    }
    Ok(MomentTrajectory {
        grid: control.grid.clone(),
        states,
        operator: control.operator.clone(),
    })
}

/// Marginal at an arbitrary `t ∈ [t_0, T]`, using the control of the interval
/// `[t_i, t_{i+1})` that contains `t`.
pub fn marginal_at(traj: &MomentTrajectory, control: &PiecewiseControl, t: f64) -> Result<GaussianState> {
    let i = traj
        .grid
        .locate(t)
        .ok_or_else(|| Error::InvalidArgument(format!("time {t} outside the trajectory grid")))?;
    let ti = traj.grid.times()[i];
    if i + 1 == traj.grid.len() || t == ti {
        return Ok(traj.states[i].clone());
    }
    let alpha_hat = control.operator.basis().tr_mul(&control.offsets[i]);
    local_step(&traj.states[i], control.operator.spectrum(i), &alpha_hat, t - ti, control.sigma)
}

/// `n x k x d` draws, one independent Gaussian per timestamp and sample,
/// stored in the standard basis.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalSamples {
    pub n_samples: usize,
    pub n_times: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl MarginalSamples {
    pub fn get(&self, sample: usize, time: usize) -> &[f64] {
        let off = (sample * self.n_times + time) * self.dim;
        &self.data[off..off + self.dim]
    }
}

/// Reparameterized draws `x = E (m̂ + √Σ̂ ξ)`.
pub fn sample_marginals(traj: &MomentTrajectory, rng: &mut RandomStream, n: usize) -> Result<MarginalSamples> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one sample is required".into()));
    }
    let d = traj.dim();
    let k = traj.len();
    let basis = traj.operator.basis();
    let mut stds = Vec::with_capacity(k);
    for s in &traj.states {
        let (_, v) = eigen_parts(s)?;
        stds.push(v.map(f64::sqrt));
    }
    let mut data = Vec::with_capacity(n * k * d);
    let mut hat = DVector::zeros(d);
    for _ in 0..n {
        for (i, s) in traj.states.iter().enumerate() {
            for j in 0..d {
                hat[j] = s.mean[j] + stds[i][j] * rng.normal();
            }
            let x = basis * &hat;
            data.extend_from_slice(x.as_slice());
        }
    }
    Ok(MarginalSamples { n_samples: n, n_times: k, dim: d, data })
}
