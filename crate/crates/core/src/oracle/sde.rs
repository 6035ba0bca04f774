use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{AffineControl, LinearGaussianSSM};
use crate::error::{Error, Result};
use crate::gauss::GaussianSampler;
use crate::moments::MarginalSamples;
use crate::rng::RandomStream;
use crate::types::{GaussianState, TimeGrid};

/// Uniform refinement of every grid interval into steps no longer than
/// `dt_max`, so that steps land exactly on grid timestamps.
#[derive(Clone, Debug)]
pub struct EmSchedule {
    /// `(interval, step count, step length)` per interval.
    pub intervals: Vec<(usize, usize, f64)>,
    starts: Vec<f64>,
}

impl EmSchedule {
    pub fn new(grid: &TimeGrid, dt_max: f64) -> Result<Self> {
        if !(dt_max > 0.0 && dt_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {dt_max}")));
        }
        let intervals = grid
            .deltas()
            .iter()
            .enumerate()
            .map(|(i, &dt)| {
                let n = (dt / dt_max).ceil().max(1.0) as usize;
                (i, n, dt / n as f64)
            })
            .collect();
        Ok(Self { intervals, starts: grid.times().to_vec() })
    }

    pub fn n_steps(&self) -> usize {
        self.intervals.iter().map(|v| v.1).sum()
    }

    /// Left endpoints and lengths of every step, in order.
    pub fn steps(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.intervals
            .iter()
            .flat_map(move |&(i, n, h)| (0..n).map(move |s| (i, self.starts[i] + s as f64 * h, h)))
    }
}

fn alloc_samples(n: usize, k: usize, d: usize) -> MarginalSamples {
    MarginalSamples { n_samples: n, n_times: k, dim: d, data: vec![0.0; n * k * d] }
}

/// Euler-Maruyama paths `X_{n+1} = X_n + b(t_n, X_n) h + σ √h ξ_n` recorded at
/// every grid timestamp. Path `p` starts at `init[p]` and uses child stream `p`.
pub fn simulate_sde(
    drift: &(dyn Fn(f64, &[f64], &mut [f64]) + Sync),
    sigma: f64,
    init: &[DVector<f64>],
    grid: &TimeGrid,
    dt: f64,
    rng: &RandomStream,
) -> Result<MarginalSamples> {
    let sched = EmSchedule::new(grid, dt)?;
    let d = init.first().map_or(0, |v| v.len());
    if d == 0 || init.iter().any(|v| v.len() != d) {
        return Err(Error::Dimension("initial samples must share a positive dimension".into()));
    }
    let k = grid.len();
    let mut out = alloc_samples(init.len(), k, d);
    let status: Vec<Result<()>> = out
        .data
        .par_chunks_mut(k * d)
        .enumerate()
        .map(|(p, rec)| {
            let mut r = rng.child(p as u64);
            let mut x = init[p].as_slice().to_vec();
            let mut b = vec![0.0; d];
            rec[..d].copy_from_slice(&x);
            for &(i, n, h) in &sched.intervals {
                let sq = sigma * h.sqrt();
                for s in 0..n {
                    let t = grid.times()[i] + s as f64 * h;
                    drift(t, &x, &mut b);
                    if b.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Diverged(format!("non-finite drift at t = {t}")));
                    }
                    for j in 0..d {
                        x[j] += b[j] * h + sq * r.normal();
                    }
                }
                rec[(i + 1) * d..(i + 2) * d].copy_from_slice(&x);
            }
            Ok(())
        })
        .collect();
    status.into_iter().collect::<Result<()>>()?;
    Ok(out)
}

/// Paths of a controlled linear-Gaussian SDE together with the accumulated
/// control energy `Σ_n h/2 ‖u(t_n, X_n)‖² / σ²` per path.
#[derive(Clone, Debug)]
pub struct ControlledPaths {
    pub samples: MarginalSamples,
    pub cost: Vec<f64>,
}

struct StepTable {
    h: f64,
    /// Row-major `d × d` total drift matrix followed by the `d` offset.
    drift: Vec<f64>,
    control: Vec<f64>,
    record: Option<usize>,
}

/// Euler-Maruyama simulation of `dX = [-A_i X + β_i + u(t, X)] dt + σ dW` with
/// the optional affine control `u`, started from `init`. The affine
/// coefficients are tabulated once per step and shared across paths.
pub fn simulate_controlled_lg(
    ssm: &LinearGaussianSSM,
    control: Option<&AffineControl>,
    init: &GaussianState,
    n_paths: usize,
    dt: f64,
    rng: &RandomStream,
) -> Result<ControlledPaths> {
    let d = ssm.dim();
    let k = ssm.grid().len();
    let sched = EmSchedule::new(ssm.grid(), dt)?;
    let cov = ssm.operator().state_from_eigenbasis(init)?;
    let init_cov = match &cov.cov {
        crate::types::Covariance::Full(c) => c.clone(),
        crate::types::Covariance::EigenDiag(_) => unreachable!(),
    };
    let sampler = GaussianSampler::new(&init.mean, &init_cov)?;
    let mut table = Vec::with_capacity(sched.n_steps());
    let mut last_interval = usize::MAX;
    let mut a = DMatrix::zeros(d, d);
    for (i, t, h) in sched.steps() {
        if i != last_interval {
            a = ssm.operator().matrix(i);
            last_interval = i;
        }
        let (kc, oc) = match control {
            Some(c) => c.at(t)?,
            None => (DMatrix::zeros(d, d), DVector::zeros(d)),
        };
        let m = &kc - &a;
        let v = &ssm.dynamics.offsets[i] + &oc;
        let pack = |m: &DMatrix<f64>, v: &DVector<f64>| {
            let mut out = Vec::with_capacity(d * d + d);
            for r in 0..d {
                for c in 0..d {
                    out.push(m[(r, c)]);
                }
            }
            out.extend(v.iter());
            out
        };
        table.push(StepTable { h, drift: pack(&m, &v), control: pack(&kc, &oc), record: None });
    }
    let mut idx = 0;
    for &(i, n, _) in &sched.intervals {
        idx += n;
        table[idx - 1].record = Some(i + 1);
    }
    let sigma = ssm.sigma();
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut samples = alloc_samples(n_paths, k, d);
    let mut cost = vec![0.0; n_paths];
    let status: Vec<Result<()>> = samples
        .data
        .par_chunks_mut(k * d)
        .zip(cost.par_iter_mut())
        .enumerate()
        .map(|(p, (rec, cp))| {
            let mut r = rng.child(p as u64);
            let mut xi = vec![0.0; d];
            let mut x = vec![0.0; d];
            sampler.sample_into(&mut r, &mut xi, &mut x);
            rec[..d].copy_from_slice(&x);
            let mut b = vec![0.0; d];
            let mut acc = 0.0;
            for st in &table {
                let sq = sigma * st.h.sqrt();
                let mut u2 = 0.0;
                for row in 0..d {
                    let mut bv = st.drift[d * d + row];
                    let mut uv = st.control[d * d + row];
                    for c in 0..d {
                        bv += st.drift[row * d + c] * x[c];
                        uv += st.control[row * d + c] * x[c];
                    }
                    b[row] = bv;
                    u2 += uv * uv;
                }
                acc += 0.5 * st.h * u2 * inv_s2;
                for j in 0..d {
                    x[j] += b[j] * st.h + sq * r.normal();
                }
                if let Some(ti) = st.record {
                    rec[ti * d..(ti + 1) * d].copy_from_slice(&x);
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("path {p} left the finite range")));
            }
            *cp = acc;
            Ok(())
        })
        .collect();
    status.into_iter().collect::<Result<()>>()?;
    Ok(ControlledPaths { samples, cost })
}

/// Exact law of the uncontrolled Euler-Maruyama chain with step at most
/// `dt`. Within an interval the chain is linear with constant coefficients, so
/// `n` steps collapse per eigen-coordinate to
/// `x_n = aⁿ x_0 + h β̂ (1-aⁿ)/(1-a) + σ √h √((1-a²ⁿ)/(1-a²)) ξ` with `a = 1-λh`.
pub fn simulate_prior_em_aggregated(
    ssm: &LinearGaussianSSM,
    n_paths: usize,
    dt: f64,
    rng: &RandomStream,
) -> Result<MarginalSamples> {
    let d = ssm.dim();
    let k = ssm.grid().len();
    let sched = EmSchedule::new(ssm.grid(), dt)?;
    let op = ssm.operator();
    let e = op.basis();
    let sigma = ssm.sigma();
    // (decay, offset, noise std) per interval and eigen-coordinate.
    let mut coeffs = Vec::with_capacity(sched.intervals.len());
    for &(i, n, h) in &sched.intervals {
        let beta_hat = e.tr_mul(&ssm.dynamics.offsets[i]);
        let lam = op.spectrum(i);
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            let lh = lam[j] * h;
            if lh >= 1.0 {
                return Err(Error::InvalidArgument(format!("step {h} is unstable for eigenvalue {}", lam[j])));
            }
            let nf = n as f64;
            let la = (-lh).ln_1p();
            let an = (nf * la).exp();
            let geo = if lh < 1e-14 { nf } else { -(nf * la).exp_m1() / lh };
            let geo2 = if lh < 1e-14 { nf } else { -(2.0 * nf * la).exp_m1() / (lh * (2.0 - lh)) };
            row.push((an, h * beta_hat[j] * geo, sigma * h.sqrt() * geo2.sqrt()));
        }
        coeffs.push(row);
    }
    let sampler = GaussianSampler::new(&ssm.init.mean, ssm.init_cov())?;
    let mut samples = alloc_samples(n_paths, k, d);
    samples.data.par_chunks_mut(k * d).enumerate().for_each(|(p, rec)| {
        let mut r = rng.child(p as u64);
        let mut xi = vec![0.0; d];
        let mut x = vec![0.0; d];
        sampler.sample_into(&mut r, &mut xi, &mut x);
        rec[..d].copy_from_slice(&x);
        let mut xh: Vec<f64> = (0..d).map(|j| (0..d).map(|c| e[(c, j)] * x[c]).sum()).collect();
        for (ii, row) in coeffs.iter().enumerate() {
            for j in 0..d {
                let (an, off, s) = row[j];
                xh[j] = an * xh[j] + off + s * r.normal();
            }
            for c in 0..d {
                rec[(ii + 1) * d + c] = (0..d).map(|j| e[(c, j)] * xh[j]).sum();
            }
        }
    });
    Ok(samples)
}
