use nalgebra::{DMatrix, DVector};

use super::LinearGaussianSSM;
use crate::error::{Error, Result};
use crate::gauss::{cholesky, symmetrize, LN_2PI};
use crate::types::{Covariance, GaussianState, ObservationSeq};

/// Output of [`kalman_filter`]. `predicted[0]` is the initial law.
#[derive(Clone, Debug)]
pub struct FilterResult {
    pub predicted: Vec<GaussianState>,
    pub filtered: Vec<GaussianState>,
    /// `log p(y_i | y_{<i})`, zero where nothing is observed.
    pub step_log_likelihood: Vec<f64>,
    pub log_evidence: f64,
}

fn full_cov(s: &GaussianState) -> &DMatrix<f64> {
    match &s.cov {
        Covariance::Full(c) => c,
        Covariance::EigenDiag(_) => unreachable!("oracle states are dense"),
    }
}

pub(crate) fn check_alignment(ssm: &LinearGaussianSSM, obs: &ObservationSeq) -> Result<()> {
    if obs.grid != *ssm.grid() {
        return Err(Error::Grid("observation grid differs from the model grid".into()));
    }
    if obs.dim() != ssm.emission.obs_dim() {
        return Err(Error::Dimension(format!(
            "observations have {} coordinates, emission produces {}",
            obs.dim(),
            ssm.emission.obs_dim()
        )));
    }
    Ok(())
}

/// Conditions `(mean, cov)` on the observed block of timestamp `i`. Returns the
/// posterior and the predictive log-likelihood.
pub(crate) fn update(
    ssm: &LinearGaussianSSM,
    obs: &ObservationSeq,
    i: usize,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let Some((h, y, r)) = ssm.emission.observed_block(obs, i) else {
        return Ok((mean.clone(), cov.clone(), 0.0));
    };
    let rmat = DMatrix::from_diagonal(&r);
    let s = &h * cov * h.transpose() + &rmat;
    let chol = cholesky(&s, "innovation covariance").map_err(|_| {
        Error::Numerical(format!("singular innovation covariance at timestamp {i}"))
    })?;
    let resid = &y - &h * mean;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ll = -0.5 * (resid.dot(&chol.solve(&resid)) + logdet + y.len() as f64 * LN_2PI);
    // K = P Hᵀ S⁻¹
    let gain = chol.solve(&(&h * cov)).transpose();
    let new_mean = mean + &gain * resid;
    let d = mean.len();
    let ikh = DMatrix::identity(d, d) - &gain * &h;
    let new_cov = &ikh * cov * ikh.transpose() + &gain * rmat * gain.transpose();
    Ok((new_mean, symmetrize(&new_cov), ll))
}

/// Exact filtering marginals and log-evidence by the prediction-error
/// decomposition. Masked coordinates contribute nothing.
pub fn kalman_filter(ssm: &LinearGaussianSSM, obs: &ObservationSeq) -> Result<FilterResult> {
    check_alignment(ssm, obs)?;
    let k = ssm.grid().len();
    let deltas = ssm.grid().deltas();
    let mut predicted = Vec::with_capacity(k);
    let mut filtered: Vec<GaussianState> = Vec::with_capacity(k);
    let mut step = Vec::with_capacity(k);
    for i in 0..k {
        let (pm, pc) = if i == 0 {
            (ssm.init.mean.clone(), full_cov(&ssm.init).clone())
        } else {
            let tr = ssm.transition(i - 1, deltas[i - 1]);
            let prev = &filtered[i - 1];
            let m = &tr.f * &prev.mean + &tr.u;
            let c = &tr.f * full_cov(prev) * tr.f.transpose() + &tr.q;
            (m, symmetrize(&c))
        };
        let (fm, fc, ll) = update(ssm, obs, i, &pm, &pc)?;
        predicted.push(GaussianState::full(pm, pc)?);
        filtered.push(GaussianState::full(fm, fc)?);
        step.push(ll);
    }
    let log_evidence = step.iter().sum();
    Ok(FilterResult { predicted, filtered, step_log_likelihood: step, log_evidence })
}

/// Rauch-Tung-Striebel backward pass over a finished filter.
pub fn rts_from_filter(ssm: &LinearGaussianSSM, filt: &FilterResult) -> Result<Vec<GaussianState>> {
    let k = filt.filtered.len();
    let deltas = ssm.grid().deltas();
    let mut out = filt.filtered.clone();
    for i in (0..k.saturating_sub(1)).rev() {
        let tr = ssm.transition(i, deltas[i]);
        let pf = full_cov(&filt.filtered[i]);
        let pp = full_cov(&filt.predicted[i + 1]);
        let chol = cholesky(pp, "predicted covariance")?;
        // J = P_f Fᵀ P_p⁻¹
        let j = chol.solve(&(&tr.f * pf)).transpose();
        let next = &out[i + 1];
        let mean = &filt.filtered[i].mean + &j * (&next.mean - &filt.predicted[i + 1].mean);
        let cov = pf + &j * (full_cov(next) - pp) * j.transpose();
        out[i] = GaussianState::full(mean, symmetrize(&cov))?;
    }
    Ok(out)
}

/// Exact smoothing marginals `p(X_{t_i} | all observations)`.
pub fn rts_smoother(ssm: &LinearGaussianSSM, obs: &ObservationSeq) -> Result<Vec<GaussianState>> {
    let filt = kalman_filter(ssm, obs)?;
    rts_from_filter(ssm, &filt)
}

/// Smoothing marginal at an arbitrary time, by conditioning the filtered
/// prediction at `t` on the backward quadratic form of the h-function.
pub fn smoothed_marginal_at(
    ssm: &LinearGaussianSSM,
    filt: &FilterResult,
    h: &super::HQuadratic,
    t: f64,
) -> Result<GaussianState> {
    let g = ssm.grid();
    let i = g.locate(t).ok_or_else(|| Error::InvalidArgument(format!("time {t} outside the grid")))?;
    if i + 1 == g.len() {
        return rts_from_filter(ssm, filt).map(|mut v| v.pop().expect("nonempty"));
    }
    let dt = t - g.times()[i];
    let tr = ssm.transition(i, dt);
    let prev = &filt.filtered[i];
    let pm = &tr.f * &prev.mean + &tr.u;
    let pc = symmetrize(&(&tr.f * full_cov(prev) * tr.f.transpose() + &tr.q));
    let form = h.form_at(t)?;
    let prec = cholesky(&pc, "predicted covariance")?.inverse();
    let post_prec = symmetrize(&(&prec + &form.p));
    let chol = cholesky(&post_prec, "posterior precision")?;
    let mean = chol.solve(&(&prec * &pm + &form.q));
    GaussianState::full(mean, symmetrize(&chol.inverse()))
}
