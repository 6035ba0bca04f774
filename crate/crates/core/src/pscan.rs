//! Associative scan over elementwise affine maps `x ↦ a ∘ x + b`.
//!
//! Composition "apply `s`, then `t`" is
//! `s ⊗ t = (a_t ∘ a_s, a_t ∘ b_s + b_t)`, which is associative with identity
//! `(1, 0)`. The inclusive prefix of the per-interval mean and variance maps
//! gives every marginal of a piecewise-constant controlled SDE at once.
//!
//! [`parallel_scan`] uses the Blelloch up-sweep / down-sweep over a
//! power-of-two padded buffer. The combination tree depends only on the input
//! length, so results are bit-identical for any number of workers.

use nalgebra::DVector;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::moments::{initial_eigen_state, step_coefficients, MomentTrajectory};
use crate::types::{Covariance, GaussianState, PiecewiseControl};

#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl ScanElement {
    pub fn new(scale: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        if scale.len() != offset.len() {
            return Err(Error::Dimension("scale and offset lengths differ".into()));
        }
        Ok(Self { scale, offset })
    }

    pub fn identity(dim: usize) -> Self {
        Self { scale: vec![1.0; dim], offset: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.scale.iter().zip(&self.offset))
            .map(|(x, (a, b))| a * x + b)
            .collect()
    }
}

/// `s` followed by `t`.
pub fn combine(s: &ScanElement, t: &ScanElement) -> Result<ScanElement> {
    if s.dim() != t.dim() {
        return Err(Error::Dimension(format!("combine of dims {} and {}", s.dim(), t.dim())));
    }
    let scale = t.scale.iter().zip(&s.scale).map(|(a, b)| a * b).collect();
    let offset = t
        .scale
        .iter()
        .zip(&s.offset)
        .zip(&t.offset)
        .map(|((a, bs), bt)| a * bs + bt)
        .collect();
    Ok(ScanElement { scale, offset })
}

/// Structure-of-arrays storage: element `i` occupies `[i*dim, (i+1)*dim)` of
/// both `scale` and `offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanBuffer {
    pub dim: usize,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl ScanBuffer {
    pub fn from_elements(elems: &[ScanElement]) -> Result<Self> {
        let dim = elems.first().map(|e| e.dim()).unwrap_or(0);
        let mut scale = Vec::with_capacity(elems.len() * dim);
        let mut offset = Vec::with_capacity(elems.len() * dim);
        for e in elems {
            if e.dim() != dim {
                return Err(Error::Dimension("scan elements of mixed dimension".into()));
            }
            scale.extend_from_slice(&e.scale);
            offset.extend_from_slice(&e.offset);
        }
        Ok(Self { dim, scale, offset })
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.scale.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn element(&self, i: usize) -> ScanElement {
        let r = i * self.dim..(i + 1) * self.dim;
        ScanElement { scale: self.scale[r.clone()].to_vec(), offset: self.offset[r].to_vec() }
    }

    pub fn to_elements(&self) -> Vec<ScanElement> {
        (0..self.len()).map(|i| self.element(i)).collect()
    }
}

/// Counters from an instrumented scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanStats {
    pub combines: usize,
    /// Longest chain of dependent combines.
    pub depth: u32,
}

/// In-place `right ← left ⊗ right` on one dimension block.
#[inline]
fn compose_into(ls: &[f64], lo: &[f64], rs: &mut [f64], ro: &mut [f64]) {
    for j in 0..rs.len() {
        ro[j] = rs[j] * lo[j] + ro[j];
        rs[j] *= ls[j];
    }
}

/// One tree level: for each block of `2*half` elements, the element at
/// `half - 1` is the left operand and the one at `2*half - 1` the right one.
/// `down` selects the down-sweep swap-and-combine instead of the up-sweep.
fn level(buf: &mut ScanBuffer, half: usize, down: bool, parallel: bool) {
    let d = buf.dim;
    let block = 2 * half * d;
    let work = |(s, o): (&mut [f64], &mut [f64])| {
        let (sl, sr) = s.split_at_mut(half * d);
        let (ol, or) = o.split_at_mut(half * d);
        let l = (half - 1) * d..half * d;
        let r = (half - 1) * d..half * d;
        if down {
            // left gets the parent's prefix, right gets prefix ⊗ left-subtree total
            let ls = sl[l.clone()].to_vec();
            let lo = ol[l.clone()].to_vec();
            sl[l.clone()].copy_from_slice(&sr[r.clone()]);
            ol[l].copy_from_slice(&or[r.clone()]);
            // right ← right ⊗ (old left)
            let (rs, ro) = (&mut sr[r.clone()], &mut or[r]);
            for j in 0..d {
                ro[j] = ls[j] * ro[j] + lo[j];
                rs[j] *= ls[j];
            }
        } else {
            let (ls, lo) = (&sl[l.clone()], &ol[l]);
            compose_into(ls, lo, &mut sr[r.clone()], &mut or[r]);
        }
    };
    if parallel {
        buf.scale
            .par_chunks_mut(block)
            .zip(buf.offset.par_chunks_mut(block))
            .with_min_len(64)
            .for_each(work);
    } else {
        buf.scale.chunks_mut(block).zip(buf.offset.chunks_mut(block)).for_each(work);
    }
}

fn check_nonempty(elems: &[ScanElement]) -> Result<()> {
    if elems.is_empty() {
        return Err(Error::InvalidArgument("scan of an empty sequence".into()));
    }
    Ok(())
}

fn blelloch(input: &ScanBuffer, parallel: bool) -> ScanBuffer {
    let k = input.len();
    let d = input.dim;
    let n = k.next_power_of_two();
    let mut buf = input.clone();
    buf.scale.resize(n * d, 1.0);
    buf.offset.resize(n * d, 0.0);
    let levels = n.trailing_zeros();
    for lv in 0..levels {
        level(&mut buf, 1 << lv, false, parallel);
    }
    let last = (n - 1) * d..n * d;
    buf.scale[last.clone()].fill(1.0);
    buf.offset[last].fill(0.0);
    for lv in (0..levels).rev() {
        level(&mut buf, 1 << lv, true, parallel);
    }
    // exclusive → inclusive
    let mut out = ScanBuffer { dim: d, scale: vec![0.0; k * d], offset: vec![0.0; k * d] };
    let body = |(i, (s, o)): (usize, (&mut [f64], &mut [f64]))| {
        let r = i * d..(i + 1) * d;
        s.copy_from_slice(&input.scale[r.clone()]);
        o.copy_from_slice(&input.offset[r.clone()]);
        compose_into(&buf.scale[r.clone()], &buf.offset[r], s, o);
    };
    if parallel {
        out.scale
            .par_chunks_mut(d)
            .zip(out.offset.par_chunks_mut(d))
            .enumerate()
            .with_min_len(256)
            .for_each(body);
    } else {
        out.scale.chunks_mut(d).zip(out.offset.chunks_mut(d)).enumerate().for_each(body);
    }
    out
}

/// Inclusive prefix compositions `elems[0] ⊗ … ⊗ elems[i]` on the current
/// rayon pool.
pub fn parallel_scan(elems: &[ScanElement]) -> Result<Vec<ScanElement>> {
    check_nonempty(elems)?;
    let buf = ScanBuffer::from_elements(elems)?;
    Ok(blelloch(&buf, true).to_elements())
}

/// Buffer form of [`parallel_scan`].
pub fn parallel_scan_buffer(buf: &ScanBuffer) -> Result<ScanBuffer> {
    if buf.is_empty() {
        return Err(Error::InvalidArgument("scan of an empty sequence".into()));
    }
    Ok(blelloch(buf, true))
}

/// Runs [`parallel_scan_buffer`] inside `pool`.
pub fn parallel_scan_in(pool: &ThreadPool, buf: &ScanBuffer) -> Result<ScanBuffer> {
    pool.install(|| parallel_scan_buffer(buf))
}

/// Same tree as [`parallel_scan`], evaluated on one thread while counting
/// combines and the dependency depth.
pub fn parallel_scan_instrumented(elems: &[ScanElement]) -> Result<(Vec<ScanElement>, ScanStats)> {
    check_nonempty(elems)?;
    let buf = ScanBuffer::from_elements(elems)?;
    let out = blelloch(&buf, false).to_elements();
    Ok((out, scan_stats(elems.len())))
}

/// Combine count and depth of the Blelloch tree for `k` elements, obtained by
/// running the same sweep over per-slot depth counters.
pub fn scan_stats(k: usize) -> ScanStats {
    let n = k.max(1).next_power_of_two();
    let levels = n.trailing_zeros();
    let mut depth = vec![0u32; n];
    let mut combines = 0usize;
    for lv in 0..levels {
        let half = 1usize << lv;
        let mut i = 2 * half - 1;
        while i < n {
            depth[i] = depth[i].max(depth[i - half]) + 1;
            combines += 1;
            i += 2 * half;
        }
    }
    depth[n - 1] = 0;
    for lv in (0..levels).rev() {
        let half = 1usize << lv;
        let mut i = 2 * half - 1;
        while i < n {
            let left = depth[i - half];
            depth[i - half] = depth[i];
            depth[i] = depth[i].max(left) + 1;
            combines += 1;
            i += 2 * half;
        }
    }
    let mut max_depth = 0;
    for d in depth.iter().take(k) {
        max_depth = max_depth.max(d + 1);
        combines += 1;
    }
    ScanStats { combines, depth: max_depth }
}

/// Left fold, the sequential reference.
pub fn sequential_scan(elems: &[ScanElement]) -> Result<Vec<ScanElement>> {
    check_nonempty(elems)?;
    let mut out = Vec::with_capacity(elems.len());
    let mut acc = elems[0].clone();
    out.push(acc.clone());
    for e in &elems[1..] {
        acc = combine(&acc, e)?;
        out.push(acc.clone());
    }
    Ok(out)
}

/// Sequential fold over a buffer.
pub fn sequential_scan_buffer(buf: &ScanBuffer) -> ScanBuffer {
    let d = buf.dim;
    let mut out = buf.clone();
    for i in 1..buf.len() {
        let (head_s, tail_s) = out.scale.split_at_mut(i * d);
        let (head_o, tail_o) = out.offset.split_at_mut(i * d);
        let prev = (i - 1) * d..i * d;
        compose_into(&head_s[prev.clone()], &head_o[prev], &mut tail_s[..d], &mut tail_o[..d]);
    }
    out
}

/// Mean and variance scan elements, one per interval, in the eigenbasis.
pub fn build_elements(control: &PiecewiseControl) -> (Vec<ScanElement>, Vec<ScanElement>) {
    let d = control.dim();
    let alphas = control.eigen_offsets();
    let deltas = control.grid.deltas();
    let mut mean = Vec::with_capacity(deltas.len());
    let mut var = Vec::with_capacity(deltas.len());
    for (i, dt) in deltas.iter().enumerate() {
        let lam = control.operator.spectrum(i);
        let mut me = ScanElement::identity(d);
        let mut ve = ScanElement::identity(d);
        for j in 0..d {
            let c = step_coefficients(lam[j], *dt, control.sigma);
            me.scale[j] = c.mean_decay;
            me.offset[j] = c.mean_gain * alphas[i][j];
            ve.scale[j] = c.var_decay;
            ve.offset[j] = c.var_add;
        }
        mean.push(me);
        var.push(ve);
    }
    (mean, var)
}

/// Same contract as [`crate::moments::propagate_sequential`], computed through
/// the parallel scan.
pub fn moments_via_scan(init: &GaussianState, control: &PiecewiseControl) -> Result<MomentTrajectory> {
    let first = initial_eigen_state(init, &control.operator)?;
    let var0 = match &first.cov {
        Covariance::EigenDiag(v) => v.clone(),
        Covariance::Full(_) => unreachable!("initial_eigen_state returns a diagonal state"),
    };
    let mut states = Vec::with_capacity(control.grid.len());
    states.push(first.clone());
    if control.n_intervals() > 0 {
        let (mean_elems, var_elems) = build_elements(control);
        let mean_prefix = parallel_scan(&mean_elems)?;
        let var_prefix = parallel_scan(&var_elems)?;
        let rows: Vec<Result<GaussianState>> = mean_prefix
            .par_iter()
            .zip(var_prefix.par_iter())
            .map(|(me, ve)| {
                GaussianState::eigen_diag(
                    DVector::from_vec(me.apply(first.mean.as_slice())),
                    DVector::from_vec(ve.apply(var0.as_slice())),
                )
            })
            .collect();
        for r in rows {
            states.push(r?);
        }
    }
    Ok(MomentTrajectory { grid: control.grid.clone(), states, operator: control.operator.clone() })
}
