use nalgebra::{DMatrix, DVector};

use super::kalman::{check_alignment, kalman_filter};
use super::{LinearGaussianSSM, Transition};
use crate::error::{Error, Result};
use crate::gauss::{symmetrize, LN_2PI};
use crate::types::{GaussianState, ObservationSeq};

/// `x ↦ exp(-½ xᵀ P x + qᵀ x + c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadForm {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub c: f64,
}

impl QuadForm {
    pub fn constant(dim: usize, c: f64) -> Self {
        Self { p: DMatrix::zeros(dim, dim), q: DVector::zeros(dim), c }
    }

    pub fn log_eval(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.p * x)) + self.q.dot(x) + self.c
    }

    pub fn grad_log(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.p * x) + &self.q
    }

    /// Multiplies in `N(y; H x, diag(r)) / exp(ll)`.
    fn absorb(&mut self, h: &DMatrix<f64>, y: &DVector<f64>, r: &DVector<f64>, ll: f64) {
        let rinv = r.map(|v| 1.0 / v);
        let hr = h.transpose() * DMatrix::from_diagonal(&rinv);
        self.p += &hr * h;
        self.p = symmetrize(&self.p);
        self.q += &hr * y;
        let quad: f64 = y.iter().zip(rinv.iter()).map(|(a, b)| a * a * b).sum();
        let logdet: f64 = r.iter().map(|v| v.ln()).sum();
        self.c += -0.5 * (quad + logdet + y.len() as f64 * LN_2PI) - ll;
    }

    /// `x ↦ ∫ self(x') N(x'; F x + u, Q) dx'`.
    fn pull_back(&self, tr: &Transition) -> Result<QuadForm> {
        let d = self.q.len();
        let iqp = DMatrix::identity(d, d) + &tr.q * &self.p;
        let lu = iqp.clone().lu();
        let g = lu
            .try_inverse()
            .ok_or_else(|| Error::Numerical("I + QP is singular".into()))?;
        let logdet = iqp.determinant().ln();
        if !logdet.is_finite() {
            return Err(Error::Numerical("I + QP has non-positive determinant".into()));
        }
        let pg = symmetrize(&(&self.p * &g));
        let gq = &g * &tr.q;
        let p = symmetrize(&(tr.f.transpose() * &pg * &tr.f));
        let q = tr.f.transpose() * (g.transpose() * &self.q - &pg * &tr.u);
        let c = self.c - 0.5 * logdet - 0.5 * tr.u.dot(&(&pg * &tr.u))
            + self.q.dot(&(&g * &tr.u))
            + 0.5 * self.q.dot(&(&gq * &self.q));
        let out = QuadForm { p, q, c };
        out.check_psd()?;
        Ok(out)
    }

    fn check_psd(&self) -> Result<()> {
        let scale = self.p.amax().max(1.0);
        let min = self.p.clone().symmetric_eigen().eigenvalues.min();
        if min < -1e-9 * scale || !self.c.is_finite() {
            return Err(Error::Numerical(format!("h-function quadratic lost positivity (min eigenvalue {min})")));
        }
        Ok(())
    }
}

/// Analytic h-function of a linear-Gaussian model, piecewise in time with
/// jumps at the grid timestamps.
#[derive(Clone, Debug)]
pub struct HQuadratic {
    ssm: LinearGaussianSSM,
    /// `f_i · h_{i+1}(t_i, ·)` for every timestamp; index 0 is the weight that
    /// turns the prior initial law into the conditioned one.
    terminal: Vec<QuadForm>,
    log_evidence: f64,
}

/// Backward recursion of the normalized potentials through exact transition
/// kernels.
pub fn h_function(ssm: &LinearGaussianSSM, obs: &ObservationSeq) -> Result<HQuadratic> {
    check_alignment(ssm, obs)?;
    let filt = kalman_filter(ssm, obs)?;
    let d = ssm.dim();
    let k = ssm.grid().len();
    let deltas = ssm.grid().deltas();
    let mut terminal = vec![QuadForm::constant(d, 0.0); k];
    for i in (0..k).rev() {
        let mut form = if i + 1 == k {
            QuadForm::constant(d, 0.0)
        } else {
            terminal[i + 1].pull_back(&ssm.transition(i, deltas[i]))?
        };
        if let Some((h, y, r)) = ssm.emission.observed_block(obs, i) {
            form.absorb(&h, &y, &r, filt.step_log_likelihood[i]);
        }
        terminal[i] = form;
    }
    Ok(HQuadratic { ssm: ssm.clone(), terminal, log_evidence: filt.log_evidence })
}

impl HQuadratic {
    pub fn dim(&self) -> usize {
        self.ssm.dim()
    }

    pub fn model(&self) -> &LinearGaussianSSM {
        &self.ssm
    }

    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    /// `f_i · h_{i+1}(t_i, ·)`.
    pub fn terminal(&self, i: usize) -> &QuadForm {
        &self.terminal[i]
    }

    /// Quadratic form of `h(t, ·)`. On `[t_{i-1}, t_i)` this is `h_i`; at the
    /// horizon it is the last normalized potential.
    pub fn form_at(&self, t: f64) -> Result<QuadForm> {
        let g = self.ssm.grid();
        let i = g
            .locate(t)
            .ok_or_else(|| Error::InvalidArgument(format!("time {t} outside [{}, {}]", g.start(), g.horizon())))?;
        if i + 1 == g.len() {
            return Ok(self.terminal[i].clone());
        }
        let remaining = g.times()[i + 1] - t;
        self.terminal[i + 1].pull_back(&self.ssm.transition(i, remaining))
    }

    pub fn log_h(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        Ok(self.form_at(t)?.log_eval(x))
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_h(t, x)?.exp())
    }

    /// `∇_x log h(t, x) = -P(t) x + q(t)`.
    pub fn grad_log_h(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.form_at(t)?.grad_log(x))
    }

    /// `log E_P[∏ f_i]` in closed form; zero for a correctly normalized h.
    pub fn log_prior_expectation(&self) -> Result<f64> {
        let d = self.dim();
        let tr = Transition {
            f: DMatrix::zeros(d, d),
            u: self.ssm.init.mean.clone(),
            q: self.ssm.init_cov().clone(),
        };
        Ok(self.terminal[0].pull_back(&tr)?.c)
    }

    /// Conditioned initial law `μ*_0 ∝ f_0 h_1(t_0, ·) μ_0`.
    pub fn conditioned_init(&self) -> Result<GaussianState> {
        let d = self.dim();
        let s0 = self.ssm.init_cov();
        let w = &self.terminal[0];
        let a = DMatrix::identity(d, d) + s0 * &w.p;
        let lu = a.lu();
        let mean = lu
            .solve(&(&self.ssm.init.mean + s0 * &w.q))
            .ok_or_else(|| Error::Numerical("singular initial conditioning".into()))?;
        let cov = lu.solve(s0).ok_or_else(|| Error::Numerical("singular initial conditioning".into()))?;
        GaussianState::full(mean, symmetrize(&cov))
    }

    /// Fault-injection hook: shifts every linear coefficient by `dq`.
    pub fn perturbed(&self, dq: f64) -> HQuadratic {
        let mut out = self.clone();
        for f in &mut out.terminal {
            f.q.add_scalar_mut(dq);
        }
        out
    }
}

/// `b(t, x) + σ² ∇_x log h(t, x)`.
pub fn conditioned_drift(ssm: &LinearGaussianSSM, h: &HQuadratic, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let b = ssm.prior_drift(t, x)?;
    let s2 = ssm.sigma() * ssm.sigma();
    Ok(b + h.grad_log_h(t, x)? * s2)
}

/// Optimal drift correction `u(t, x) = σ² ∇_x log h(t, x) = K(t) x + k(t)`.
#[derive(Clone, Debug)]
pub struct AffineControl {
    pub h: HQuadratic,
}

impl AffineControl {
    pub fn sigma(&self) -> f64 {
        self.h.model().sigma()
    }

    /// `(K(t), k(t))`.
    pub fn at(&self, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let f = self.h.form_at(t)?;
        let s2 = self.sigma() * self.sigma();
        Ok((-f.p * s2, f.q * s2))
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (k, c) = self.at(t)?;
        Ok(k * x + c)
    }
}

pub fn optimal_control_lg(ssm: &LinearGaussianSSM, obs: &ObservationSeq) -> Result<AffineControl> {
    Ok(AffineControl { h: h_function(ssm, obs)? })
}
