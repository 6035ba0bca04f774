//! Exact inference for linear-Gaussian instances: Kalman filter, RTS smoother,
//! the analytic h-function with its conditioned drift, an Euler-Maruyama
//! simulator and finite-difference PDE residual checks.

mod hfunc;
mod kalman;
mod pde;
mod sde;

pub use hfunc::{conditioned_drift, h_function, optimal_control_lg, AffineControl, HQuadratic, QuadForm};
pub use kalman::{kalman_filter, rts_from_filter, rts_smoother, smoothed_marginal_at, FilterResult};
pub use pde::{hjb_residual_check, PdeResiduals};
pub use sde::{simulate_controlled_lg, simulate_prior_em_aggregated, simulate_sde, ControlledPaths, EmSchedule};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{symmetrize, GaussianSampler};
use crate::moments::step_coefficients;
use crate::rng::RandomStream;
use crate::types::{expm, skew, Covariance, GaussianState, ObservationSeq, PiecewiseControl, SpdOperator, TimeGrid};

/// Smallest admissible emission noise variance. Sharper potentials are
/// approximated by this value.
pub const MIN_NOISE: f64 = 1e-8;

/// Per-timestamp linear emission `y_i = H_i x + ε`, `ε ~ N(0, diag(r_i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Emission {
    matrices: Vec<DMatrix<f64>>,
    noise: Vec<DVector<f64>>,
}

impl Emission {
    pub fn new(matrices: Vec<DMatrix<f64>>, noise: Vec<DVector<f64>>) -> Result<Self> {
        if matrices.len() != noise.len() || matrices.is_empty() {
            return Err(Error::Dimension("one emission matrix and noise vector per timestamp".into()));
        }
        let (m, d) = matrices[0].shape();
        for (h, r) in matrices.iter().zip(&noise) {
            if h.shape() != (m, d) || r.len() != m {
                return Err(Error::Dimension("emission shapes differ across timestamps".into()));
            }
            if r.iter().any(|&v| !(v >= MIN_NOISE) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "emission noise variances must be finite and at least {MIN_NOISE:e}"
                )));
            }
        }
        Ok(Self { matrices, noise })
    }

    pub fn shared(h: DMatrix<f64>, noise: DVector<f64>, n_times: usize) -> Result<Self> {
        Self::new(vec![h; n_times], vec![noise; n_times])
    }

    pub fn identity(dim: usize, noise_var: f64, n_times: usize) -> Result<Self> {
        Self::shared(DMatrix::identity(dim, dim), DVector::from_element(dim, noise_var), n_times)
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.matrices[0].ncols()
    }

    pub fn matrix(&self, i: usize) -> &DMatrix<f64> {
        &self.matrices[i]
    }

    pub fn noise(&self, i: usize) -> &DVector<f64> {
        &self.noise[i]
    }

    /// Rows of `H_i`, `y_i` and `r_i` restricted to the observed coordinates of
    /// timestamp `i`; `None` when nothing is observed there.
    pub fn observed_block(
        &self,
        obs: &ObservationSeq,
        i: usize,
    ) -> Option<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
        let rows = obs.observed_coords(i);
        if rows.is_empty() {
            return None;
        }
        let h = self.matrices[i].select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&j| obs.values[(i, j)]));
        let r = DVector::from_iterator(rows.len(), rows.iter().map(|&j| self.noise[i][j]));
        Some((h, y, r))
    }
}

/// Exact transition `X_{t+Δ} | X_t = x ~ N(F x + u, Q)`.
#[derive(Clone, Debug)]
pub struct Transition {
    pub f: DMatrix<f64>,
    pub u: DVector<f64>,
    pub q: DMatrix<f64>,
}

/// Linear-Gaussian state space model with prior drift `-A_i x + β_i` on
/// interval `i`, diffusion `σ`, Gaussian initial law and linear emissions.
#[derive(Clone, Debug)]
pub struct LinearGaussianSSM {
    /// Prior dynamics; `offsets` hold the `β_i`.
    pub dynamics: PiecewiseControl,
    pub init: GaussianState,
    pub emission: Emission,
}

impl LinearGaussianSSM {
    pub fn new(dynamics: PiecewiseControl, init: GaussianState, emission: Emission) -> Result<Self> {
        let d = dynamics.dim();
        if init.dim() != d || emission.state_dim() != d {
            return Err(Error::Dimension("state dimension differs between dynamics, init and emission".into()));
        }
        if emission.len() != dynamics.grid.len() {
            return Err(Error::Dimension("emission needs one entry per grid timestamp".into()));
        }
        let init = match &init.cov {
            Covariance::Full(_) => init,
            Covariance::EigenDiag(_) => dynamics.operator.state_from_eigenbasis(&init)?,
        };
        Ok(Self { dynamics, init, emission })
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.dynamics.grid
    }

    pub fn sigma(&self) -> f64 {
        self.dynamics.sigma
    }

    pub fn operator(&self) -> &SpdOperator {
        &self.dynamics.operator
    }

    pub fn init_cov(&self) -> &DMatrix<f64> {
        match &self.init.cov {
            Covariance::Full(c) => c,
            Covariance::EigenDiag(_) => unreachable!("normalized in the constructor"),
        }
    }

    /// Prior drift `b(t, x)` using the interval that contains `t`.
    pub fn prior_drift(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let i = self.interval_at(t)?;
        Ok(-(self.operator().matrix(i) * x) + &self.dynamics.offsets[i])
    }

    /// Interval index whose control is active at `t`.
    pub fn interval_at(&self, t: f64) -> Result<usize> {
        let g = self.grid();
        if g.n_intervals() == 0 {
            return Err(Error::InvalidArgument("single-timestamp model has no intervals".into()));
        }
        let i = g
            .locate(t)
            .ok_or_else(|| Error::InvalidArgument(format!("time {t} outside [{}, {}]", g.start(), g.horizon())))?;
        Ok(i.min(g.n_intervals() - 1))
    }

    /// Transition over `dt` using the dynamics of interval `i`.
    pub fn transition(&self, i: usize, dt: f64) -> Transition {
        let op = self.operator();
        let e = op.basis();
        let lam = op.spectrum(i);
        let d = self.dim();
        let mut decay = DVector::zeros(d);
        let mut gain = DVector::zeros(d);
        let mut add = DVector::zeros(d);
        for j in 0..d {
            let c = step_coefficients(lam[j], dt, self.sigma());
            decay[j] = c.mean_decay;
            gain[j] = c.mean_gain;
            add[j] = c.var_add;
        }
        let beta_hat = e.tr_mul(&self.dynamics.offsets[i]);
        let f = e * DMatrix::from_diagonal(&decay) * e.transpose();
        let u = e * beta_hat.component_mul(&gain);
        let q = symmetrize(&(e * DMatrix::from_diagonal(&add) * e.transpose()));
        Transition { f, u, q }
    }

    /// One exact draw of the latent path at the grid timestamps and of the
    /// observations; rows are timestamps.
    pub fn sample(&self, rng: &mut RandomStream) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let d = self.dim();
        let k = self.grid().len();
        let m = self.emission.obs_dim();
        let mut latent = DMatrix::zeros(k, d);
        let mut ys = DMatrix::zeros(k, m);
        let mut x = GaussianSampler::new(&self.init.mean, self.init_cov())?.sample(rng);
        let deltas = self.grid().deltas();
        for i in 0..k {
            if i > 0 {
                let tr = self.transition(i - 1, deltas[i - 1]);
                let mean = &tr.f * &x + &tr.u;
                x = GaussianSampler::new(&mean, &tr.q)?.sample(rng);
            }
            latent.set_row(i, &x.transpose());
            let y = self.emission.matrix(i) * &x;
            for j in 0..m {
                ys[(i, j)] = y[j] + self.emission.noise(i)[j].sqrt() * rng.normal();
            }
        }
        Ok((latent, ys))
    }

    /// Same dynamics and initial law with a different emission.
    pub fn with_emission(&self, emission: Emission) -> Result<Self> {
        Self::new(self.dynamics.clone(), self.init.clone(), emission)
    }
}

/// Knobs for [`random_instance`].
#[derive(Clone, Debug)]
pub struct RandomInstanceOptions {
    pub dim: usize,
    pub n_times: usize,
    pub min_interval: f64,
    pub max_interval: f64,
    /// Probability that an individual cell is masked.
    pub mask_prob: f64,
    pub identity_emission: bool,
}

impl RandomInstanceOptions {
    pub fn new(dim: usize, n_times: usize) -> Self {
        Self { dim, n_times, min_interval: 0.3, max_interval: 1.0, mask_prob: 0.15, identity_emission: false }
    }
}

/// Random stable linear-Gaussian system together with one observation
/// sequence drawn from it. At least one cell is always observed.
pub fn random_instance(rng: &mut RandomStream, opts: &RandomInstanceOptions) -> Result<(LinearGaussianSSM, ObservationSeq)> {
    let d = opts.dim;
    let k = opts.n_times;
    if d == 0 || k == 0 {
        return Err(Error::InvalidArgument("dimension and timestamp count must be positive".into()));
    }
    let mut times = vec![rng.uniform_range(0.0, 0.5)];
    for _ in 1..k {
        let last = *times.last().expect("nonempty");
        times.push(last + rng.uniform_range(opts.min_interval, opts.max_interval));
    }
    let grid = TimeGrid::new(times)?;
    let basis = expm(&skew(&DMatrix::from_fn(d, d, |_, _| rng.normal())));
    let spectra: Vec<DVector<f64>> = (0..k - 1)
        .map(|_| DVector::from_fn(d, |_, _| (rng.normal() * 0.6 - 0.4).exp() + 1e-6))
        .collect();
    let offsets: Vec<DVector<f64>> = (0..k - 1).map(|_| DVector::from_fn(d, |_, _| rng.normal() * 0.7)).collect();
    let sigma = rng.uniform_range(0.5, 1.2);
    let dynamics = PiecewiseControl::new(grid.clone(), SpdOperator::new(basis, spectra)?, offsets, sigma)?;
    let b = DMatrix::from_fn(d, d, |_, _| rng.normal() * 0.5);
    let init_cov = &b * b.transpose() + DMatrix::identity(d, d) * 0.2;
    let init = GaussianState::full(DVector::from_fn(d, |_, _| rng.normal()), symmetrize(&init_cov))?;
    let h = if opts.identity_emission {
        DMatrix::identity(d, d)
    } else {
        DMatrix::identity(d, d) + DMatrix::from_fn(d, d, |_, _| rng.normal() * 0.3)
    };
    let noise: Vec<DVector<f64>> = (0..k).map(|_| DVector::from_fn(d, |_, _| rng.uniform_range(0.1, 0.5))).collect();
    let emission = Emission::new(vec![h; k], noise)?;
    let ssm = LinearGaussianSSM::new(dynamics, init, emission)?;
    let (_, ys) = ssm.sample(rng)?;
    let mut mask: Vec<bool> = (0..k * d).map(|_| rng.uniform() >= opts.mask_prob).collect();
    if !mask.iter().any(|&b| b) {
        let j = rng.below(k * d);
        mask[j] = true;
    }
    let obs = ObservationSeq::new(grid, ys, mask)?;
    Ok((ssm, obs))
}
