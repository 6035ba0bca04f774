//! Synthetic datasets, irregular subsampling, CSV storage, splits and naive
//! baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::GaussianSampler;
use crate::moments::step_coefficients;
use crate::oracle::{Emission, LinearGaussianSSM};
use crate::rng::RandomStream;
use crate::types::{GaussianState, ObservationSeq, PiecewiseControl, SpdOperator, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
}

/// Input sequences with aligned targets. Inputs and targets of one sequence
/// share a grid; the input mask marks what the model may see and the target
/// mask marks the cells that are scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<ObservationSeq>,
    pub targets: Vec<ObservationSeq>,
    pub splits: Vec<Split>,
    pub meta: DatasetMeta,
    /// Ground-truth latent paths, one `k × d` matrix per sequence.
    pub latents: Option<Vec<DMatrix<f64>>>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<ObservationSeq>,
        targets: Vec<ObservationSeq>,
        splits: Vec<Split>,
        meta: DatasetMeta,
        latents: Option<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        if inputs.len() != targets.len() || inputs.len() != splits.len() {
            return Err(Error::Dimension("inputs, targets and split tags differ in length".into()));
        }
        for (i, (a, b)) in inputs.iter().zip(&targets).enumerate() {
            if a.grid != b.grid {
                return Err(Error::Grid(format!("sequence {i}: input and target grids differ")));
            }
        }
        if let (Some(a), Some(b)) = (inputs.first(), targets.first()) {
            if inputs.iter().any(|s| s.dim() != a.dim()) || targets.iter().any(|s| s.dim() != b.dim()) {
                return Err(Error::Dimension("sequences must share their coordinate count".into()));
            }
        }
        if let Some(l) = &latents {
            if l.len() != inputs.len() || l.iter().zip(&inputs).any(|(m, s)| m.nrows() != s.len()) {
                return Err(Error::Dimension("latent paths do not align with the sequences".into()));
            }
        }
        Ok(Self { inputs, targets, splits, meta, latents })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |s| s.dim())
    }

    pub fn target_dim(&self) -> usize {
        self.targets.first().map_or(0, |s| s.dim())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Largest timestamp over all sequences.
    pub fn horizon(&self) -> f64 {
        self.inputs.iter().map(|s| s.grid.horizon()).fold(0.0, f64::max)
    }

    /// Writes `inputs.csv`, `targets.csv`, `splits.txt`, `meta.json` and, when
    /// present, `latents.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_csv(&dir.join("inputs.csv"), &self.inputs)?;
        save_csv(&dir.join("targets.csv"), &self.targets)?;
        let tags: String = self.splits.iter().map(|s| format!("{}\n", s.as_str())).collect();
        fs::write(dir.join("splits.txt"), tags)?;
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join("meta.json"), meta + "\n")?;
        if let Some(lat) = &self.latents {
            let seqs = lat
                .iter()
                .zip(&self.inputs)
                .map(|(m, s)| ObservationSeq::fully_observed(s.grid.clone(), m.clone()))
                .collect::<Result<Vec<_>>>()?;
            save_csv(&dir.join("latents.csv"), &seqs)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let inputs = load_sequences(&dir.join("inputs.csv"))?;
        let targets = load_sequences(&dir.join("targets.csv"))?;
        let splits = fs::read_to_string(dir.join("splits.txt"))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(Split::parse)
            .collect::<Result<Vec<_>>>()?;
        let meta_text = fs::read_to_string(dir.join("meta.json"))?;
        let meta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse(format!("meta.json: {e}")))?;
        let lat_path = dir.join("latents.csv");
        let latents = if lat_path.exists() {
            Some(load_sequences(&lat_path)?.into_iter().map(|s| s.values).collect())
        } else {
            None
        };
        Self::new(inputs, targets, splits, meta, latents)
    }
}

/// Writes sequences as `t,y0..,mask0..` rows, blank line between sequences.
pub fn save_csv(path: &Path, seqs: &[ObservationSeq]) -> Result<()> {
    fs::write(path, to_csv(seqs)?)?;
    Ok(())
}

pub fn to_csv(seqs: &[ObservationSeq]) -> Result<String> {
    let m = seqs.first().map_or(0, |s| s.dim());
    if seqs.iter().any(|s| s.dim() != m) {
        return Err(Error::Dimension("sequences must share their coordinate count".into()));
    }
    let mut out = String::from("t");
    for j in 0..m {
        write!(out, ",y{j}").expect("string write");
    }
    for j in 0..m {
        write!(out, ",mask{j}").expect("string write");
    }
    out.push('\n');
    for (n, s) in seqs.iter().enumerate() {
        if n > 0 {
            out.push('\n');
        }
        for i in 0..s.len() {
            write!(out, "{}", s.grid.times()[i]).expect("string write");
            for j in 0..m {
                write!(out, ",{}", s.values[(i, j)]).expect("string write");
            }
            for j in 0..m {
                out.push_str(if s.is_observed(i, j) { ",1" } else { ",0" });
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn load_sequences(path: &Path) -> Result<Vec<ObservationSeq>> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<ObservationSeq>> {
    let mut lines = text.split('\n');
    let header = lines.next().ok_or_else(|| Error::Parse("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "t" || (cols.len() - 1) % 2 != 0 {
        return Err(Error::Parse(format!("malformed header {header:?}")));
    }
    let m = (cols.len() - 1) / 2;
    for j in 0..m {
        if cols[1 + j] != format!("y{j}") || cols[1 + m + j] != format!("mask{j}") {
            return Err(Error::Parse(format!("malformed header {header:?}")));
        }
    }
    let mut seqs = Vec::new();
    let mut block: Vec<(f64, Vec<f64>, Vec<bool>)> = Vec::new();
    let flush = |block: &mut Vec<(f64, Vec<f64>, Vec<bool>)>, seqs: &mut Vec<ObservationSeq>| -> Result<()> {
        if block.is_empty() {
            return Ok(());
        }
        let times: Vec<f64> = block.iter().map(|r| r.0).collect();
        let grid = TimeGrid::new(times).map_err(|e| Error::Parse(format!("sequence {}: {e}", seqs.len())))?;
        let k = block.len();
        let values = DMatrix::from_fn(k, m, |i, j| block[i].1[j]);
        let mask: Vec<bool> = block.iter().flat_map(|r| r.2.iter().copied()).collect();
        let seq = ObservationSeq::new(grid, values, mask).map_err(|e| Error::Parse(format!("sequence {}: {e}", seqs.len())))?;
        seqs.push(seq);
        block.clear();
        Ok(())
    };
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            flush(&mut block, &mut seqs)?;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + 2 * m {
            return Err(Error::Parse(format!("line {}: expected {} fields, found {}", ln + 2, 1 + 2 * m, fields.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("line {}: bad number {s:?}", ln + 2)));
        let t = num(fields[0])?;
        let ys = fields[1..=m].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let mask = fields[1 + m..]
            .iter()
            .map(|s| match s.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(Error::Parse(format!("line {}: mask must be 0 or 1, found {other:?}", ln + 2))),
            })
            .collect::<Result<Vec<_>>>()?;
        block.push((t, ys, mask));
    }
    flush(&mut block, &mut seqs)?;
    Ok(seqs)
}

/// A single CSV file read as both inputs and targets, split 60/20/20 in file
/// order.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let seqs = load_sequences(path)?;
    let n = seqs.len();
    let (n_val, n_test) = split_counts(n, [0.6, 0.2, 0.2])?;
    let splits = (0..n)
        .map(|i| {
            if i < n - n_val - n_test {
                Split::Train
            } else if i < n - n_test {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    let meta = DatasetMeta { generator: "csv".into(), seed: 0, params: BTreeMap::new() };
    Dataset::new(seqs.clone(), seqs, splits, meta, None)
}

fn split_counts(n: usize, fractions: [f64; 3]) -> Result<(usize, usize)> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let n_val = (fractions[1] * n as f64 + 1e-9).floor() as usize;
    let n_test = (fractions[2] * n as f64 + 1e-9).floor() as usize;
    Ok((n_val, n_test))
}

/// Random split tags with exact counts; rounding goes toward train.
pub fn assign_splits(n: usize, fractions: [f64; 3], rng: &mut RandomStream) -> Result<Vec<Split>> {
    let (n_val, n_test) = split_counts(n, fractions)?;
    let mut tags: Vec<Split> = (0..n)
        .map(|i| {
            if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect();
    rng.shuffle(&mut tags);
    Ok(tags)
}

/// Linear-Gaussian generator settings. Timestamps are `n_times` points drawn
/// without replacement from a uniform lattice of `lattice` points on
/// `[0, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LgParams {
    pub basis: DMatrix<f64>,
    pub spectrum: DVector<f64>,
    pub offset: DVector<f64>,
    pub sigma: f64,
    pub init_mean: DVector<f64>,
    pub init_var: f64,
    pub obs_noise: f64,
    pub lattice: usize,
    pub horizon: f64,
    pub n_times: usize,
}

impl LgParams {
    /// Mean-reverting system with mildly coupled coordinates.
    pub fn standard(dim: usize) -> Self {
        let p = DMatrix::from_fn(dim, dim, |i, j| if i < j { 0.3 } else if i > j { -0.3 } else { 0.0 });
        let basis = crate::types::expm(&crate::types::skew(&p));
        let spectrum = DVector::from_fn(dim, |i, _| 0.3 + 0.4 * i as f64);
        Self {
            basis,
            spectrum,
            offset: DVector::zeros(dim),
            sigma: 0.5,
            init_mean: DVector::zeros(dim),
            init_var: 1.0,
            obs_noise: 0.01,
            lattice: 100,
            horizon: 10.0,
            n_times: 50,
        }
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.basis.shape() != (d, d) || self.offset.len() != d || self.init_mean.len() != d {
            return Err(Error::Dimension("generator parameters disagree on the state dimension".into()));
        }
        if self.n_times == 0 || self.n_times > self.lattice || self.lattice < 2 {
            return Err(Error::InvalidArgument("need 0 < n_times <= lattice and lattice >= 2".into()));
        }
        if !(self.sigma >= 0.0 && self.obs_noise >= 0.0 && self.init_var >= 0.0 && self.horizon > 0.0) {
            return Err(Error::InvalidArgument("scales must be nonnegative and the horizon positive".into()));
        }
        Ok(())
    }

    pub fn lattice_times(&self) -> Vec<f64> {
        let n = self.lattice;
        (0..n).map(|j| self.horizon * j as f64 / (n - 1) as f64).collect()
    }

    /// The generating model restricted to `grid`, with identity emission.
    pub fn ssm_on(&self, grid: &TimeGrid) -> Result<LinearGaussianSSM> {
        let k = grid.len();
        let d = self.dim();
        let op = SpdOperator::new(self.basis.clone(), vec![self.spectrum.clone(); k.saturating_sub(1)])?;
        let dynamics = PiecewiseControl::new(grid.clone(), op, vec![self.offset.clone(); k.saturating_sub(1)], self.sigma)?;
        let init = GaussianState::full(self.init_mean.clone(), DMatrix::identity(d, d) * self.init_var)?;
        LinearGaussianSSM::new(dynamics, init, Emission::identity(d, self.obs_noise, k)?)
    }

    fn params_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("dim".into(), self.dim().to_string());
        m.insert("spectrum".into(), join(self.spectrum.as_slice()));
        m.insert("offset".into(), join(self.offset.as_slice()));
        m.insert("sigma".into(), self.sigma.to_string());
        m.insert("obs_noise".into(), self.obs_noise.to_string());
        m.insert("lattice".into(), self.lattice.to_string());
        m.insert("horizon".into(), self.horizon.to_string());
        m.insert("n_times".into(), self.n_times.to_string());
        m
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Samples prior paths exactly through the closed-form transitions and emits
/// noisy identity observations. Inputs and targets are both the full noisy
/// sequence; use [`hide_timestamps`] or [`truncate_inputs`] to pose a task.
pub fn gen_lg(params: &LgParams, n_sequences: usize, rng: &RandomStream) -> Result<Dataset> {
    params.validate()?;
    let d = params.dim();
    let lattice = params.lattice_times();
    let e = &params.basis;
    let init_cov = DMatrix::identity(d, d) * params.init_var;
    let sampler = GaussianSampler::new(&params.init_mean, &init_cov)?;
    let beta_hat = e.tr_mul(&params.offset);
    let rows: Vec<Result<(ObservationSeq, DMatrix<f64>)>> = (0..n_sequences)
        .into_par_iter()
        .map(|n| {
            let mut r = rng.child(n as u64);
            let idx = r.choose_sorted(params.lattice, params.n_times);
            let grid = TimeGrid::new(idx.iter().map(|&j| lattice[j]).collect())?;
            let k = grid.len();
            let mut lat = DMatrix::zeros(k, d);
            let mut ys = DMatrix::zeros(k, d);
            let mut x = sampler.sample(&mut r);
            let mut xh = e.tr_mul(&x);
            for i in 0..k {
                if i > 0 {
                    let dt = grid.times()[i] - grid.times()[i - 1];
                    for j in 0..d {
                        let c = step_coefficients(params.spectrum[j], dt, params.sigma);
                        xh[j] = c.mean_decay * xh[j] + c.mean_gain * beta_hat[j] + c.var_add.sqrt() * r.normal();
                    }
                    x = e * &xh;
                }
                lat.set_row(i, &x.transpose());
                for j in 0..d {
                    ys[(i, j)] = x[j] + params.obs_noise.sqrt() * r.normal();
                }
            }
            Ok((ObservationSeq::fully_observed(grid, ys)?, lat))
        })
        .collect();
    let mut inputs = Vec::with_capacity(n_sequences);
    let mut latents = Vec::with_capacity(n_sequences);
    for r in rows {
        let (s, l) = r?;
        inputs.push(s);
        latents.push(l);
    }
    let mut split_rng = rng.child(u64::MAX);
    let splits = assign_splits(n_sequences, [0.6, 0.2, 0.2], &mut split_rng)?;
    let meta = DatasetMeta { generator: "lg".into(), seed: rng.seed(), params: params.params_map() };
    Dataset::new(inputs.clone(), inputs, splits, meta, Some(latents))
}

/// Damped pendulum `θ̈ = -(g/ℓ) sin θ - γ θ̇` observed through `(sin θ, cos θ)`.
/// `time_scale` converts lattice time into the physical time of the ODE.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumParams {
    pub g_over_l: f64,
    pub damping: f64,
    pub noise_std: f64,
    pub lattice: usize,
    pub horizon: f64,
    pub n_times: usize,
    pub time_scale: f64,
    pub rk4_step: f64,
    /// Initial angle is uniform on `[-max_angle, max_angle]`.
    pub max_angle: f64,
    pub velocity_std: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            g_over_l: 1.0,
            damping: 0.1,
            noise_std: 0.05,
            lattice: 100,
            horizon: 100.0,
            n_times: 50,
            time_scale: 0.1,
            rk4_step: 0.01,
            max_angle: 2.5,
            velocity_std: 0.5,
        }
    }
}

impl PendulumParams {
    fn params_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("g_over_l".into(), self.g_over_l.to_string());
        m.insert("damping".into(), self.damping.to_string());
        m.insert("noise_std".into(), self.noise_std.to_string());
        m.insert("lattice".into(), self.lattice.to_string());
        m.insert("horizon".into(), self.horizon.to_string());
        m.insert("n_times".into(), self.n_times.to_string());
        m.insert("time_scale".into(), self.time_scale.to_string());
        m
    }
}

fn pendulum_rhs(p: &PendulumParams, s: [f64; 2]) -> [f64; 2] {
    [s[1], -p.g_over_l * s[0].sin() - p.damping * s[1]]
}

/// Angles at the requested lattice times (physical time = lattice time ×
/// `time_scale`), integrated by RK4 with steps no longer than `rk4_step`.
pub fn pendulum_angles(p: &PendulumParams, theta0: f64, omega0: f64, times: &[f64]) -> Vec<f64> {
    let mut s = [theta0, omega0];
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let target = t * p.time_scale;
        let span = target - now;
        if span > 0.0 {
            let n = (span / p.rk4_step).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for _ in 0..n {
                let k1 = pendulum_rhs(p, s);
                let k2 = pendulum_rhs(p, [s[0] + 0.5 * h * k1[0], s[1] + 0.5 * h * k1[1]]);
                let k3 = pendulum_rhs(p, [s[0] + 0.5 * h * k2[0], s[1] + 0.5 * h * k2[1]]);
                let k4 = pendulum_rhs(p, [s[0] + h * k3[0], s[1] + h * k3[1]]);
                s[0] += h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
                s[1] += h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
            }
            now = target;
        }
        out.push(s[0]);
    }
    out
}

/// Noisy `(sin θ, cos θ)` inputs and clean targets at `n_times` lattice points.
/// Splits are 50/25/25.
pub fn gen_pendulum(params: &PendulumParams, n_sequences: usize, rng: &RandomStream) -> Result<Dataset> {
    if params.n_times == 0 || params.n_times > params.lattice || params.lattice < 2 {
        return Err(Error::InvalidArgument("need 0 < n_times <= lattice and lattice >= 2".into()));
    }
    let lattice: Vec<f64> = (0..params.lattice)
        .map(|j| params.horizon * j as f64 / (params.lattice - 1) as f64)
        .collect();
    let rows: Vec<Result<(ObservationSeq, ObservationSeq, DMatrix<f64>)>> = (0..n_sequences)
        .into_par_iter()
        .map(|n| {
            let mut r = rng.child(n as u64);
            let idx = r.choose_sorted(params.lattice, params.n_times);
            let times: Vec<f64> = idx.iter().map(|&j| lattice[j]).collect();
            let theta0 = r.uniform_range(-params.max_angle, params.max_angle);
            let omega0 = r.normal() * params.velocity_std;
            let angles = pendulum_angles(params, theta0, omega0, &times);
            let k = times.len();
            let clean = DMatrix::from_fn(k, 2, |i, j| if j == 0 { angles[i].sin() } else { angles[i].cos() });
            let noisy = clean.map(|v| v + params.noise_std * r.normal());
            let grid = TimeGrid::new(times)?;
            let lat = DMatrix::from_column_slice(k, 1, &angles);
            Ok((
                ObservationSeq::fully_observed(grid.clone(), noisy)?,
                ObservationSeq::fully_observed(grid, clean)?,
                lat,
            ))
        })
        .collect();
    let mut inputs = Vec::with_capacity(n_sequences);
    let mut targets = Vec::with_capacity(n_sequences);
    let mut latents = Vec::with_capacity(n_sequences);
    for r in rows {
        let (a, b, l) = r?;
        inputs.push(a);
        targets.push(b);
        latents.push(l);
    }
    let mut split_rng = rng.child(u64::MAX);
    let splits = assign_splits(n_sequences, [0.5, 0.25, 0.25], &mut split_rng)?;
    let meta = DatasetMeta { generator: "pendulum".into(), seed: rng.seed(), params: params.params_map() };
    Dataset::new(inputs, targets, splits, meta, Some(latents))
}

/// Keeps a uniform random subset of `round(keep_fraction · k)` timestamps (at
/// least one), then masks each remaining observed cell with probability
/// `drop_fraction`.
pub fn subsample_irregular(
    seq: &ObservationSeq,
    keep_fraction: f64,
    drop_fraction: f64,
    rng: &mut RandomStream,
) -> Result<ObservationSeq> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) || !(0.0..=1.0).contains(&drop_fraction) {
        return Err(Error::InvalidArgument("need 0 < keep <= 1 and 0 <= drop <= 1".into()));
    }
    let k = seq.len();
    let n_keep = ((keep_fraction * k as f64).round() as usize).clamp(1, k);
    let rows = rng.choose_sorted(k, n_keep);
    let m = seq.dim();
    let grid = TimeGrid::new(rows.iter().map(|&i| seq.grid.times()[i]).collect())?;
    let values = DMatrix::from_fn(rows.len(), m, |r, j| seq.values[(rows[r], j)]);
    let mut mask = Vec::with_capacity(rows.len() * m);
    for &i in &rows {
        for j in 0..m {
            let keep = seq.is_observed(i, j) && (drop_fraction == 0.0 || rng.uniform() >= drop_fraction);
            mask.push(keep);
        }
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::InvalidArgument("subsampling removed every observation".into()));
    }
    ObservationSeq::new(grid, values, mask)
}

fn masked_copy(seq: &ObservationSeq, keep_row: impl Fn(usize) -> bool) -> Result<ObservationSeq> {
    let m = seq.dim();
    let mut values = seq.values.clone();
    let mut mask = seq.mask.clone();
    for i in 0..seq.len() {
        if !keep_row(i) {
            for j in 0..m {
                mask[i * m + j] = false;
                values[(i, j)] = 0.0;
            }
        }
    }
    ObservationSeq::new(seq.grid.clone(), values, mask)
}

/// Same grid with all but `round(keep_fraction · k)` random timestamps masked
/// and zeroed.
pub fn hide_timestamps(seq: &ObservationSeq, keep_fraction: f64, rng: &mut RandomStream) -> Result<ObservationSeq> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument("need 0 < keep <= 1".into()));
    }
    let k = seq.len();
    let n_keep = ((keep_fraction * k as f64).round() as usize).clamp(1, k);
    let rows = rng.choose_sorted(k, n_keep);
    masked_copy(seq, |i| rows.binary_search(&i).is_ok())
}

/// Inputs keep timestamps `t <= cutoff`; the complementary target mask scores
/// only `t > cutoff`.
pub fn truncate_inputs(input: &ObservationSeq, target: &ObservationSeq, cutoff: f64) -> Result<(ObservationSeq, ObservationSeq)> {
    let t = input.grid.times();
    if t[0] > cutoff {
        return Err(Error::InvalidArgument("no timestamp before the extrapolation cutoff".into()));
    }
    let a = masked_copy(input, |i| t[i] <= cutoff)?;
    let mut b = target.clone();
    let m = b.dim();
    for i in 0..b.len() {
        if t[i] <= cutoff {
            for j in 0..m {
                b.mask[i * m + j] = false;
            }
        }
    }
    Ok((a, b))
}

/// Poses an interpolation task: every input keeps `keep_fraction` of its
/// timestamps, targets are scored everywhere.
pub fn make_interpolation(ds: &Dataset, keep_fraction: f64, rng: &RandomStream) -> Result<Dataset> {
    let inputs = ds
        .inputs
        .par_iter()
        .enumerate()
        .map(|(n, s)| hide_timestamps(s, keep_fraction, &mut rng.child(n as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = ds.meta.clone();
    meta.params.insert("task".into(), "interpolate".into());
    meta.params.insert("keep_fraction".into(), keep_fraction.to_string());
    Dataset::new(inputs, ds.targets.clone(), ds.splits.clone(), meta, ds.latents.clone())
}

/// Poses an extrapolation task: inputs stop at `cutoff_fraction` of each
/// sequence's horizon and targets are scored after it.
pub fn make_extrapolation(ds: &Dataset, cutoff_fraction: f64) -> Result<Dataset> {
    let mut inputs = Vec::with_capacity(ds.len());
    let mut targets = Vec::with_capacity(ds.len());
    let cutoff = cutoff_fraction * ds.horizon();
    for (a, b) in ds.inputs.iter().zip(&ds.targets) {
        let (x, y) = truncate_inputs(a, b, cutoff)?;
        inputs.push(x);
        targets.push(y);
    }
    let mut meta = ds.meta.clone();
    meta.params.insert("task".into(), "extrapolate".into());
    meta.params.insert("cutoff".into(), cutoff.to_string());
    Dataset::new(inputs, targets, ds.splits.clone(), meta, ds.latents.clone())
}

/// Naive predictors scored on the target mask of one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baselines {
    /// Last observation carried forward; before the first observation the
    /// first observation is carried backward.
    pub locf_mse: f64,
    /// Per-sequence mean of the observed input values of each coordinate.
    pub mean_mse: f64,
    pub n_cells: usize,
}

pub fn locf_predictions(input: &ObservationSeq, fallback: &[f64]) -> DMatrix<f64> {
    let (k, m) = (input.len(), input.dim());
    let mut pred = DMatrix::zeros(k, m);
    for j in 0..m {
        let first = (0..k).find(|&i| input.is_observed(i, j)).map(|i| input.values[(i, j)]);
        let mut last = first.unwrap_or(fallback[j]);
        for i in 0..k {
            if input.is_observed(i, j) {
                last = input.values[(i, j)];
            }
            pred[(i, j)] = last;
        }
    }
    pred
}

pub fn mean_predictions(input: &ObservationSeq, fallback: &[f64]) -> DMatrix<f64> {
    let (k, m) = (input.len(), input.dim());
    let mut pred = DMatrix::zeros(k, m);
    for j in 0..m {
        let vals: Vec<f64> = (0..k).filter(|&i| input.is_observed(i, j)).map(|i| input.values[(i, j)]).collect();
        let mean = if vals.is_empty() { fallback[j] } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        for i in 0..k {
            pred[(i, j)] = mean;
        }
    }
    pred
}

/// Mean of observed training-input cells per coordinate; fallback for
/// coordinates a sequence never observes.
pub fn train_means(ds: &Dataset) -> Vec<f64> {
    let m = ds.input_dim();
    let mut sum = vec![0.0; m];
    let mut cnt = vec![0usize; m];
    for i in ds.indices(Split::Train) {
        let s = &ds.inputs[i];
        for r in 0..s.len() {
            for j in 0..m {
                if s.is_observed(r, j) {
                    sum[j] += s.values[(r, j)];
                    cnt[j] += 1;
                }
            }
        }
    }
    sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

pub fn baselines(ds: &Dataset, split: Split) -> Result<Baselines> {
    if ds.input_dim() != ds.target_dim() {
        return Err(Error::Dimension("baselines need inputs and targets in the same coordinates".into()));
    }
    let fallback = train_means(ds);
    let mut locf = 0.0;
    let mut mean = 0.0;
    let mut n = 0usize;
    for i in ds.indices(split) {
        let (inp, tgt) = (&ds.inputs[i], &ds.targets[i]);
        let pl = locf_predictions(inp, &fallback);
        let pm = mean_predictions(inp, &fallback);
        for r in 0..tgt.len() {
            for j in 0..tgt.dim() {
                if tgt.is_observed(r, j) {
                    let y = tgt.values[(r, j)];
                    locf += (pl[(r, j)] - y).powi(2);
                    mean += (pm[(r, j)] - y).powi(2);
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no scored cells in the {} split", split.as_str())));
    }
    Ok(Baselines { locf_mse: locf / n as f64, mean_mse: mean / n as f64, n_cells: n })
}

/// Per-coordinate affine map onto `[0, 1]` fitted on observed training inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let m = ds.input_dim();
        let mut min = vec![f64::INFINITY; m];
        let mut max = vec![f64::NEG_INFINITY; m];
        for i in ds.indices(Split::Train) {
            let s = &ds.inputs[i];
            for r in 0..s.len() {
                for j in 0..m {
                    if s.is_observed(r, j) {
                        min[j] = min[j].min(s.values[(r, j)]);
                        max[j] = max[j].max(s.values[(r, j)]);
                    }
                }
            }
        }
        if min.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("a coordinate is never observed in the training split".into()));
        }
        Ok(Self { min, max })
    }

    fn scale(&self, j: usize) -> f64 {
        let w = self.max[j] - self.min[j];
        if w > 0.0 { w } else { 1.0 }
    }

    pub fn apply_seq(&self, s: &ObservationSeq) -> Result<ObservationSeq> {
        let mut v = s.values.clone();
        for i in 0..s.len() {
            for j in 0..s.dim() {
                if s.is_observed(i, j) {
                    v[(i, j)] = (v[(i, j)] - self.min[j]) / self.scale(j);
                }
            }
        }
        ObservationSeq::new(s.grid.clone(), v, s.mask.clone())
    }

    pub fn invert(&self, v: &mut DMatrix<f64>) {
        for j in 0..v.ncols() {
            let (lo, w) = (self.min[j], self.scale(j));
            for i in 0..v.nrows() {
                v[(i, j)] = v[(i, j)] * w + lo;
            }
        }
    }

    /// Normalizes inputs, and targets when they share the input coordinates.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let inputs = ds.inputs.iter().map(|s| self.apply_seq(s)).collect::<Result<Vec<_>>>()?;
        let targets = if ds.target_dim() == ds.input_dim() {
            ds.targets.iter().map(|s| self.apply_seq(s)).collect::<Result<Vec<_>>>()?
        } else {
            ds.targets.clone()
        };
        Dataset::new(inputs, targets, ds.splits.clone(), ds.meta.clone(), ds.latents.clone())
    }
}

#[cfg(test)]
mod tests;
