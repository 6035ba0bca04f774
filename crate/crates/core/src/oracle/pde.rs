use nalgebra::DVector;

use super::{h_function, LinearGaussianSSM};
use crate::error::{Error, Result};
use crate::types::ObservationSeq;

const MIN_POINTS_PER_INTERVAL: f64 = 8.0;

/// Maximum residuals per finite-difference step.
#[derive(Clone, Debug, PartialEq)]
pub struct PdeResiduals {
    pub spacing: Vec<f64>,
    /// `∂_t h + b·∇h + ½σ²Δh`.
    pub linear: Vec<f64>,
    /// `∂_t V + b·∇V + ½σ²ΔV - ½σ²‖∇V‖²` with `V = -log h`.
    pub hjb: Vec<f64>,
}

impl PdeResiduals {
    /// Successive ratios `r(s) / r(s/2)`.
    pub fn linear_ratios(&self) -> Vec<f64> {
        self.linear.windows(2).map(|w| w[0] / w[1]).collect()
    }

    pub fn hjb_ratios(&self) -> Vec<f64> {
        self.hjb.windows(2).map(|w| w[0] / w[1]).collect()
    }
}

/// Central-difference residuals of the backward Kolmogorov equation for `h`
/// and of the HJB equation for `V = -log h`, at interior lattice points of
/// every interval. Evaluation points come from the coarsest spacing; each
/// level uses its own spacing as the difference step.
pub fn hjb_residual_check(ssm: &LinearGaussianSSM, obs: &ObservationSeq, spacings: &[f64]) -> Result<PdeResiduals> {
    let d = ssm.dim();
    if d == 0 || d > 2 {
        return Err(Error::InvalidArgument("residual check supports 1D and 2D models".into()));
    }
    let Some(&coarse) = spacings.first() else {
        return Err(Error::InvalidArgument("at least one spacing is required".into()));
    };
    if spacings.iter().any(|&s| !(s > 0.0 && s <= coarse)) {
        return Err(Error::InvalidArgument("spacings must be positive and not exceed the first".into()));
    }
    let g = ssm.grid();
    if g.n_intervals() == 0 {
        return Err(Error::Grid("residual check needs at least one interval".into()));
    }
    let mut times = Vec::new();
    for (i, dt) in g.deltas().iter().enumerate() {
        if dt / coarse < MIN_POINTS_PER_INTERVAL {
            return Err(Error::Grid(format!(
                "lattice too coarse: interval {i} of length {dt} holds fewer than {MIN_POINTS_PER_INTERVAL} points at spacing {coarse}"
            )));
        }
        let n = (dt / coarse).floor() as usize;
        let t0 = g.times()[i];
        for j in 1..n {
            let t = t0 + j as f64 * coarse;
            if t + coarse < g.times()[i + 1] {
                times.push(t);
            }
        }
    }
    let offsets = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut points: Vec<DVector<f64>> = Vec::new();
    if d == 1 {
        points.extend(offsets.iter().map(|&a| DVector::from_element(1, a)));
    } else {
        for &a in &offsets {
            for &b in &offsets {
                points.push(DVector::from_vec(vec![a, b]));
            }
        }
    }
    let h = h_function(ssm, obs)?;
    let s2 = ssm.sigma() * ssm.sigma();
    let mut linear = Vec::with_capacity(spacings.len());
    let mut hjb = Vec::with_capacity(spacings.len());
    for &s in spacings {
        let mut lin_max = 0.0f64;
        let mut hjb_max = 0.0f64;
        for &t in &times {
            let fp = h.form_at(t + s)?;
            let fm = h.form_at(t - s)?;
            let f0 = h.form_at(t)?;
            for x in &points {
                let b = ssm.prior_drift(t, x)?;
                let v = |f: &super::QuadForm, y: &DVector<f64>| -f.log_eval(y);
                let hv = |f: &super::QuadForm, y: &DVector<f64>| f.log_eval(y).exp();
                let mut lin = (hv(&fp, x) - hv(&fm, x)) / (2.0 * s);
                let mut hj = (v(&fp, x) - v(&fm, x)) / (2.0 * s);
                let h0 = hv(&f0, x);
                let v0 = v(&f0, x);
                let mut grad_sq = 0.0;
                for j in 0..d {
                    let mut xp = x.clone();
                    xp[j] += s;
                    let mut xm = x.clone();
                    xm[j] -= s;
                    let (hp, hm) = (hv(&f0, &xp), hv(&f0, &xm));
                    let (vp, vm) = (v(&f0, &xp), v(&f0, &xm));
                    lin += b[j] * (hp - hm) / (2.0 * s) + 0.5 * s2 * (hp - 2.0 * h0 + hm) / (s * s);
                    let dv = (vp - vm) / (2.0 * s);
                    hj += b[j] * dv + 0.5 * s2 * (vp - 2.0 * v0 + vm) / (s * s);
                    grad_sq += dv * dv;
                }
                hj -= 0.5 * s2 * grad_sq;
                lin_max = lin_max.max(lin.abs());
                hjb_max = hjb_max.max(hj.abs());
            }
        }
        linear.push(lin_max);
        hjb.push(hjb_max);
    }
    Ok(PdeResiduals { spacing: spacings.to_vec(), linear, hjb })
}
