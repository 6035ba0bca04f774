//! Shared domain types: time grids, observation sequences, Gaussian states,
//! the shared-eigenbasis SPD drift operator and piecewise-constant controls.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite, Error, Result};

/// Tolerance on `EᵀE - I` (Frobenius) accepted for an orthonormal basis.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Small constant added after the exponential map so spectra stay positive.
pub const SPECTRUM_EPS: f64 = 1e-6;

/// Strictly increasing, finite, nonnegative timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Grid("at least one timestamp is required".into()));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::Grid(format!("non-finite timestamp {t}")));
        }
        if times[0] < 0.0 {
            return Err(Error::Grid(format!("first timestamp {} is negative", times[0])));
        }
        for (i, w) in times.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Grid(format!(
                    "timestamps must be strictly increasing (t[{}]={} , t[{}]={})",
                    i,
                    w[0],
                    i + 1,
                    w[1]
                )));
            }
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Number of intervals `[t_{i-1}, t_i)`.
    pub fn n_intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// Interval lengths `t_i - t_{i-1}`.
    pub fn deltas(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index `i` of the grid point with `t_i <= t < t_{i+1}`; the horizon maps
    /// to the last index. `None` outside `[t_0, T]`.
    pub fn locate(&self, t: f64) -> Option<usize> {
        if !(t >= self.start() && t <= self.horizon()) {
            return None;
        }
        let idx = self.times.partition_point(|&s| s <= t);
        Some(idx.saturating_sub(1))
    }

    /// Same grid with every timestamp multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        TimeGrid::new(self.times.iter().map(|t| t * scale).collect())
    }
}

/// Observation vectors on a time grid with a per-cell observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeq {
    pub grid: TimeGrid,
    /// `k x m`, one row per timestamp.
    pub values: DMatrix<f64>,
    /// Row-major `k * m`; `true` marks an observed cell.
    pub mask: Vec<bool>,
}

impl ObservationSeq {
    pub fn new(grid: TimeGrid, values: DMatrix<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(Error::Dimension(format!(
                "{} observation rows for {} timestamps",
                values.nrows(),
                grid.len()
            )));
        }
        if mask.len() != values.nrows() * values.ncols() {
            return Err(Error::Dimension(format!(
                "mask has {} cells, expected {}",
                mask.len(),
                values.nrows() * values.ncols()
            )));
        }
        let m = values.ncols();
        for i in 0..values.nrows() {
            for j in 0..m {
                if mask[i * m + j] && !values[(i, j)].is_finite() {
                    return Err(Error::NonFinite(format!("observation ({i}, {j})")));
                }
            }
        }
        Ok(Self { grid, values, mask })
    }

    pub fn fully_observed(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        let mask = vec![true; values.nrows() * values.ncols()];
        Self::new(grid, values, mask)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.dim() + j]
    }

    /// True when at least one coordinate at timestamp `i` is observed.
    pub fn row_observed(&self, i: usize) -> bool {
        let m = self.dim();
        self.mask[i * m..(i + 1) * m].iter().any(|&b| b)
    }

    pub fn observed_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.row_observed(i)).collect()
    }

    pub fn n_observed_cells(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Observed coordinate indices at timestamp `i`.
    pub fn observed_coords(&self, i: usize) -> Vec<usize> {
        (0..self.dim()).filter(|&j| self.is_observed(i, j)).collect()
    }
}

/// Covariance of a [`GaussianState`].
#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    /// Dense covariance in the standard basis.
    Full(DMatrix<f64>),
    /// Diagonal covariance expressed in an operator's eigenbasis.
    EigenDiag(DVector<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

impl GaussianState {
    pub fn full(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "covariance is {}x{}, mean has length {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        ensure_finite("state mean", mean.as_slice())?;
        ensure_finite("state covariance", cov.as_slice())?;
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-9 * scale {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let min_eig = sym.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance has negative eigenvalue {min_eig}"
            )));
        }
        Ok(Self { mean, cov: Covariance::Full(sym) })
    }

    pub fn eigen_diag(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        if var.len() != mean.len() {
            return Err(Error::Dimension(format!(
                "variance length {} vs mean length {}",
                var.len(),
                mean.len()
            )));
        }
        ensure_finite("state mean", mean.as_slice())?;
        ensure_finite("state variance", var.as_slice())?;
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative eigenbasis variance".into()));
        }
        Ok(Self { mean, cov: Covariance::EigenDiag(var) })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_eigen(&self) -> bool {
        matches!(self.cov, Covariance::EigenDiag(_))
    }

    /// Per-coordinate variances in whichever basis the state lives in.
    pub fn variances(&self) -> DVector<f64> {
        match &self.cov {
            Covariance::Full(c) => c.diagonal(),
            Covariance::EigenDiag(v) => v.clone(),
        }
    }
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm: f64 = (0..n)
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let b = a / 2f64.powi(squarings as i32);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &b / k as f64;
        result += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Skew-symmetric part `(P - Pᵀ)/2` of a square parameter matrix.
pub fn skew(params: &DMatrix<f64>) -> DMatrix<f64> {
    (params - params.transpose()) * 0.5
}

/// Shared orthonormal eigenbasis `E` with one nonnegative spectrum per interval,
/// so that `A_i = E diag(λ_i) Eᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdOperator {
    basis: DMatrix<f64>,
    spectra: Vec<DVector<f64>>,
}

impl SpdOperator {
    pub fn new(basis: DMatrix<f64>, spectra: Vec<DVector<f64>>) -> Result<Self> {
        let d = basis.nrows();
        if basis.ncols() != d {
            return Err(Error::Dimension("basis must be square".into()));
        }
        ensure_finite("basis", basis.as_slice())?;
        let defect = (basis.transpose() * &basis - DMatrix::identity(d, d)).norm();
        if defect > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(format!(
                "basis is not orthonormal (|EᵀE - I|_F = {defect:e})"
            )));
        }
        for (i, s) in spectra.iter().enumerate() {
            if s.len() != d {
                return Err(Error::Dimension(format!(
                    "spectrum {i} has length {}, expected {d}",
                    s.len()
                )));
            }
            ensure_finite("spectrum", s.as_slice())?;
            if s.iter().any(|&l| l < 0.0) {
                return Err(Error::InvalidArgument(format!("spectrum {i} has a negative entry")));
            }
        }
        Ok(Self { basis, spectra })
    }

    /// Identity basis with the given spectra.
    pub fn diagonal(spectra: Vec<DVector<f64>>, dim: usize) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim), spectra)
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn spectra(&self) -> &[DVector<f64>] {
        &self.spectra
    }

    pub fn spectrum(&self, i: usize) -> &DVector<f64> {
        &self.spectra[i]
    }

    pub fn n_intervals(&self) -> usize {
        self.spectra.len()
    }

    /// Same basis, different spectra.
    pub fn with_spectra(&self, spectra: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(self.basis.clone(), spectra)
    }

    fn check_vec(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "vector of length {} for a {}-dimensional basis",
                v.len(),
                self.dim()
            )));
        }
        ensure_finite("vector", v.as_slice())
    }

    fn check_mat(&self, s: &DMatrix<f64>) -> Result<()> {
        if s.nrows() != self.dim() || s.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "{}x{} matrix for a {}-dimensional basis",
                s.nrows(),
                s.ncols(),
                self.dim()
            )));
        }
        ensure_finite("matrix", s.as_slice())
    }

    /// `Eᵀ v`.
    pub fn to_eigenbasis(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_vec(v)?;
        Ok(self.basis.tr_mul(v))
    }

    /// `E v̂`.
    pub fn from_eigenbasis(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_vec(v)?;
        Ok(&self.basis * v)
    }

    /// `Eᵀ S E`, symmetrized.
    pub fn cov_to_eigenbasis(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_mat(s)?;
        let r = self.basis.tr_mul(s) * &self.basis;
        Ok((&r + r.transpose()) * 0.5)
    }

    /// `E Ŝ Eᵀ`, symmetrized.
    pub fn cov_from_eigenbasis(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_mat(s)?;
        let r = &self.basis * s * self.basis.transpose();
        Ok((&r + r.transpose()) * 0.5)
    }

    /// `E diag(v) Eᵀ`.
    pub fn diag_from_eigenbasis(&self, var: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_vec(var)?;
        self.cov_from_eigenbasis(&DMatrix::from_diagonal(var))
    }

    /// Dense drift matrix `A_i` of interval `i`.
    pub fn matrix(&self, i: usize) -> DMatrix<f64> {
        &self.basis * DMatrix::from_diagonal(&self.spectra[i]) * self.basis.transpose()
    }

    /// State of `s` expressed with an eigenbasis-diagonal covariance. Off-diagonal
    /// mass of `EᵀΣE` is dropped.
    pub fn state_to_eigenbasis(&self, s: &GaussianState) -> Result<(GaussianState, f64)> {
        match &s.cov {
            Covariance::EigenDiag(_) => Ok((s.clone(), 0.0)),
            Covariance::Full(c) => {
                let mean = self.to_eigenbasis(&s.mean)?;
                let rot = self.cov_to_eigenbasis(c)?;
                let diag = rot.diagonal().map(|v| v.max(0.0));
                let mut off = 0.0f64;
                for i in 0..rot.nrows() {
                    for j in 0..rot.ncols() {
                        if i != j {
                            off = off.max(rot[(i, j)].abs());
                        }
                    }
                }
                Ok((GaussianState::eigen_diag(mean, diag)?, off))
            }
        }
    }

    /// Standard-basis state from an eigenbasis-diagonal one.
    pub fn state_from_eigenbasis(&self, s: &GaussianState) -> Result<GaussianState> {
        match &s.cov {
            Covariance::Full(_) => Ok(s.clone()),
            Covariance::EigenDiag(v) => {
                GaussianState::full(self.from_eigenbasis(&s.mean)?, self.diag_from_eigenbasis(v)?)
            }
        }
    }
}

/// Builds an [`SpdOperator`] from unconstrained parameters: `E = exp(skew(P))`
/// and `λ = exp(p) + ε` for each spectrum.
pub fn make_spd(basis_params: &DMatrix<f64>, spectrum_params: &[DVector<f64>]) -> Result<SpdOperator> {
    if basis_params.nrows() != basis_params.ncols() {
        return Err(Error::Dimension("basis parameters must be square".into()));
    }
    ensure_finite("basis parameters", basis_params.as_slice())?;
    for p in spectrum_params {
        ensure_finite("spectrum parameters", p.as_slice())?;
    }
    let basis = expm(&skew(basis_params));
    let spectra = spectrum_params
        .iter()
        .map(|p| p.map(|x| x.exp() + SPECTRUM_EPS))
        .collect();
    SpdOperator::new(basis, spectra)
}

/// Per-interval drift spectra and offsets on a grid: on `[t_{i-1}, t_i)` the
/// latent state follows `dX = (-A_i X + α_i) dt + σ dW`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseControl {
    pub grid: TimeGrid,
    pub operator: SpdOperator,
    /// One offset per interval, standard basis.
    pub offsets: Vec<DVector<f64>>,
    pub sigma: f64,
}

impl PiecewiseControl {
    pub fn new(
        grid: TimeGrid,
        operator: SpdOperator,
        offsets: Vec<DVector<f64>>,
        sigma: f64,
    ) -> Result<Self> {
        let k = grid.n_intervals();
        if operator.n_intervals() != k || offsets.len() != k {
            return Err(Error::Dimension(format!(
                "grid has {k} intervals, operator has {} spectra, {} offsets given",
                operator.n_intervals(),
                offsets.len()
            )));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("diffusion must be positive, got {sigma}")));
        }
        for a in &offsets {
            if a.len() != operator.dim() {
                return Err(Error::Dimension("offset dimension".into()));
            }
            ensure_finite("control offset", a.as_slice())?;
        }
        Ok(Self { grid, operator, offsets, sigma })
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    pub fn n_intervals(&self) -> usize {
        self.offsets.len()
    }

    /// Offsets rotated into the eigenbasis.
    pub fn eigen_offsets(&self) -> Vec<DVector<f64>> {
        self.offsets.iter().map(|a| self.operator.basis().tr_mul(a)).collect()
    }
}
