//! Dense Gaussian helpers shared by the oracle, the objective and the data
//! generators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

pub fn logdet_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let c = cholesky(m, what)?;
    Ok(2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Inverse of an SPD matrix.
pub fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

/// `log N(x; mean, cov)`.
pub fn log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let c = cholesky(cov, "covariance")?;
    let r = x - mean;
    let z = c.solve(&r);
    let logdet = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (r.dot(&z) + logdet + x.len() as f64 * LN_2PI))
}

/// `log N(x; mean, var)` for a scalar.
pub fn log_density_1d(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (r * r / var + var.ln() + LN_2PI)
}

/// `KL(N(m0, s0) || N(m1, s1))`.
pub fn kl_divergence(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> Result<f64> {
    let c1 = cholesky(s1, "reference covariance")?;
    let d = m0.len() as f64;
    let tr = c1.solve(s0).trace();
    let r = m1 - m0;
    let maha = r.dot(&c1.solve(&r));
    let ld1 = 2.0 * c1.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld0 = logdet_spd(s0, "covariance")?;
    Ok(0.5 * (tr + maha - d + ld1 - ld0))
}

/// Draws `mean + L ξ` with `L Lᵀ = cov`. Zero covariances are allowed.
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension("sampler covariance".into()));
        }
        // Symmetric square root tolerates singular covariances.
        let eig = symmetrize(cov).symmetric_eigen();
        if eig.eigenvalues.iter().any(|&v| v < -1e-10 * (1.0 + cov.amax())) {
            return Err(Error::Numerical("sampler covariance is not PSD".into()));
        }
        let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&sq);
        Ok(Self { mean: mean.clone(), factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample_into(&self, rng: &mut RandomStream, xi: &mut [f64], out: &mut [f64]) {
        rng.fill_normal(xi);
        let d = self.mean.len();
        for r in 0..d {
            let mut acc = self.mean[r];
            for c in 0..d {
                acc += self.factor[(r, c)] * xi[c];
            }
            out[r] = acc;
        }
    }

    pub fn sample(&self, rng: &mut RandomStream) -> DVector<f64> {
        let d = self.dim();
        let mut xi = vec![0.0; d];
        let mut out = vec![0.0; d];
        self.sample_into(rng, &mut xi, &mut out);
        DVector::from_vec(out)
    }
}

/// Pairwise summation; fixed association order regardless of thread count.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
