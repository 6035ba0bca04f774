//! Optimization of the amortized objective, inference and metrics.
//!
//! Every sequence draws its noise from a child stream keyed by
//! `(seed, epoch, dataset index)`, and per-sequence gradients are reduced in
//! index order, so a run is reproducible bit for bit on any number of worker
//! threads.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::moments::sample_marginals;
use crate::nn::{AssimilationConfig, Likelihood, Mat, Model, ParamStore, Scheme, SequenceOutput};
use crate::pscan::moments_via_scan;
use crate::rng::RandomStream;
use crate::types::{ObservationSeq, TimeGrid};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const TRAIN_STREAM: u64 = 0x5452_4149;
const EVAL_STREAM: u64 = 0x4556_414c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regress,
    Classify,
    Interpolate,
    Extrapolate,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Regress => "regress",
            Task::Classify => "classify",
            Task::Interpolate => "interpolate",
            Task::Extrapolate => "extrapolate",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Classify => "accuracy",
            _ => "mse",
        }
    }

    fn higher_is_better(self) -> bool {
        self == Task::Classify
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Upper bound; early stopping may end the run sooner.
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 penalty added to the gradient before the Adam update.
    pub weight_decay: f64,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
    pub n_elbo_samples: usize,
    pub seed: u64,
    pub task: Task,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Sample paths per validation prediction.
    pub eval_paths: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 50,
            weight_decay: 0.0,
            grad_clip: None,
            n_elbo_samples: 1,
            seed: 0,
            task: Task::Interpolate,
            patience: 50,
            eval_paths: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &AssimilationConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and nonnegative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.n_elbo_samples == 0 || self.eval_paths == 0 {
            return bad("batch_size, n_elbo_samples and eval_paths must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be nonnegative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.task == Task::Extrapolate && model.scheme != Scheme::History {
            return bad("extrapolation requires the history assimilation scheme".into());
        }
        let categorical = model.likelihood == Likelihood::Categorical;
        if (self.task == Task::Classify) != categorical {
            return bad("the classify task and the categorical likelihood go together".into());
        }
        Ok(())
    }
}

/// One training pair: the network sees `input` and is scored on `target`.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    /// Stable identifier used to derive the sequence's random stream.
    pub id: u64,
    pub input: &'a ObservationSeq,
    pub target: &'a ObservationSeq,
}

/// Batch averages of the loss terms and the mean parameter gradient.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub terms: SequenceOutput,
    pub gradients: Vec<Mat>,
}

/// Negative amortized ELBO averaged over `batch` and `n_samples` draws per
/// sequence, with gradients in parameter-store order.
pub fn amortized_elbo(model: &Model, batch: &[Example], n_samples: usize, rng: &RandomStream) -> Result<BatchLoss> {
    if batch.is_empty() || n_samples == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_seq: Vec<Result<(SequenceOutput, Vec<Mat>)>> = batch
        .par_iter()
        .map(|ex| {
            let stream = rng.child(ex.id);
            let mut acc: Option<(SequenceOutput, Vec<Mat>)> = None;
            for s in 0..n_samples {
                let (out, grads) = model.sequence_gradients(ex.input, ex.target, &mut stream.child(s as u64))?;
                acc = Some(match acc {
                    None => (out, grads),
                    Some((a, mut g)) => {
                        for (gi, x) in g.iter_mut().zip(&grads) {
                            *gi += x;
                        }
                        (add_terms(&a, &out), g)
                    }
                });
            }
            Ok(acc.expect("n_samples > 0"))
        })
        .collect();
    let scale = 1.0 / (batch.len() * n_samples) as f64;
    let mut terms = SequenceOutput::default();
    let mut grads: Option<Vec<Mat>> = None;
    for r in per_seq {
        let (out, g) = r?;
        terms = add_terms(&terms, &out);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
        }
    }
    let mut gradients = grads.expect("nonempty batch");
    for g in &mut gradients {
        *g *= scale;
    }
    let terms = SequenceOutput {
        loss: terms.loss * scale,
        neg_log_likelihood: terms.neg_log_likelihood * scale,
        control_cost: terms.control_cost * scale,
        neg_log_potential: terms.neg_log_potential * scale,
        n_cells: terms.n_cells,
    };
    if gradients.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(BatchLoss { terms, gradients })
}

fn add_terms(a: &SequenceOutput, b: &SequenceOutput) -> SequenceOutput {
    SequenceOutput {
        loss: a.loss + b.loss,
        neg_log_likelihood: a.neg_log_likelihood + b.neg_log_likelihood,
        control_cost: a.control_cost + b.control_cost,
        neg_log_potential: a.neg_log_potential + b.neg_log_potential,
        n_cells: a.n_cells + b.n_cells,
    }
}

pub fn global_norm(grads: &[Mat]) -> f64 {
    grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    n
}

/// Adam with L2 weight decay and optional global-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: &TrainConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params
            .iter()
            .map(|(_, t)| {
                let (r, c) = t.rows_cols();
                Mat::zeros(r, c)
            })
            .collect();
        Self {
            learning_rate: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: config.weight_decay,
            grad_clip: config.grad_clip,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut ParamStore, mut grads: Vec<Mat>) -> Result<f64> {
        if grads.len() != self.m.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        let norm = match self.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (k, ((_, t), g)) in params.iter_mut().zip(grads.iter_mut()).enumerate() {
            if !t.requires_grad {
                continue;
            }
            let (_, c) = t.rows_cols();
            for (idx, w) in t.values.iter_mut().enumerate() {
                let (i, j) = (idx / c, idx % c);
                let gij = g[(i, j)] + self.weight_decay * *w;
                let m = &mut self.m[k][(i, j)];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gij;
                let v = &mut self.v[k][(i, j)];
                *v = self.beta2 * *v + (1.0 - self.beta2) * gij * gij;
                let mh = self.m[k][(i, j)] / b1t;
                let vh = self.v[k][(i, j)] / b2t;
                *w -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_metric,wall_seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{:.10e},{:.10e},{:.3}", self.epoch, self.train_loss, self.val_metric, self.wall_seconds)
    }
}

/// Outcome of [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metric: f64,
    pub stopped_early: bool,
}

/// Optimizer, schedule and best-validation bookkeeping around a model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Epochs completed.
    pub epoch: usize,
    best: Option<(usize, f64, ParamStore)>,
    since_best: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate(&model.config)?;
        let adam = Adam::new(&config, &model.params);
        Ok(Self { model, config, adam, epoch: 0, best: None, since_best: 0, history: Vec::new() })
    }

    pub fn best_params(&self) -> Option<&ParamStore> {
        self.best.as_ref().map(|b| &b.2)
    }

    /// Mean per-sequence training loss of one pass over the training split.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        let mut order = data.indices(Split::Train);
        if order.is_empty() {
            return Err(Error::InvalidArgument("the training split is empty".into()));
        }
        RandomStream::new(self.config.seed, SHUFFLE_STREAM).child(self.epoch as u64).shuffle(&mut order);
        let stream = RandomStream::new(self.config.seed, TRAIN_STREAM).child(self.epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| Example { id: i as u64, input: &data.inputs[i], target: &data.targets[i] })
                .collect();
            let out = amortized_elbo(&self.model, &batch, self.config.n_elbo_samples, &stream)?;
            total += out.terms.loss * chunk.len() as f64;
            self.adam.update(&mut self.model.params, out.gradients)?;
        }
        Ok(total / order.len() as f64)
    }

    /// Trains one epoch, scores the validation split and updates the best
    /// snapshot.
    pub fn step_epoch(&mut self, data: &Dataset, started: Instant) -> Result<EpochRecord> {
        let train_loss = self.train_epoch(data)?;
        let split = if data.indices(Split::Val).is_empty() { Split::Train } else { Split::Val };
        let eval_rng = RandomStream::new(self.config.seed, EVAL_STREAM);
        let val = evaluate(&self.model, data, split, self.config.task, self.config.eval_paths, &eval_rng)?;
        let record = EpochRecord { epoch: self.epoch, train_loss, val_metric: val.value, wall_seconds: started.elapsed().as_secs_f64() };
        let improved = match &self.best {
            None => true,
            Some((_, b, _)) if self.config.task.higher_is_better() => val.value > *b,
            Some((_, b, _)) => val.value < *b,
        };
        if improved {
            self.best = Some((self.epoch, val.value, self.model.params.clone()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.epoch += 1;
        self.history.push(record);
        Ok(record)
    }

    fn should_stop(&self) -> bool {
        self.config.patience > 0 && self.since_best >= self.config.patience
    }

    /// Runs the remaining epochs. With `out_dir`, writes `train_log.csv`,
    /// `best.ckpt` on every improvement and `state.ckpt` after every epoch.
    /// On divergence the model is rolled back to the last completed epoch
    /// (saved as `last_good.ckpt`) and the error is returned.
    pub fn fit(&mut self, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainReport> {
        let started = Instant::now();
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join("train_log.csv");
                let resume = self.epoch > 0 && path.exists();
                let mut f = fs::OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(&path)?;
                if !resume {
                    writeln!(f, "{LOG_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut stopped_early = false;
        while self.epoch < self.config.epochs {
            if self.should_stop() {
                stopped_early = true;
                info!("stopping after {} epochs without validation improvement", self.since_best);
                break;
            }
            let last_good = self.model.params.clone();
            let record = match self.step_epoch(data, started) {
                Ok(r) => r,
                Err(Error::Diverged(msg)) => {
                    self.model.params = last_good;
                    if let Some(dir) = out_dir {
                        self.model.params.save(&dir.join("last_good.ckpt"))?;
                    }
                    return Err(Error::Diverged(format!("epoch {}: {msg}", self.epoch)));
                }
                Err(e) => return Err(e),
            };
            info!(
                "epoch {} loss {:.6e} val {} {:.6e}",
                record.epoch,
                record.train_loss,
                self.config.task.metric_name(),
                record.val_metric
            );
            if let (Some(f), Some(dir)) = (&mut log, out_dir) {
                writeln!(f, "{}", record.csv_row())?;
                if self.since_best == 0 {
                    self.model.params.save(&dir.join("best.ckpt"))?;
                }
                self.save_state(&dir.join("state.ckpt"))?;
            }
        }
        if let Some((_, _, p)) = &self.best {
            self.model.params = p.clone();
        }
        Ok(TrainReport {
            history: self.history.clone(),
            best_epoch: self.best.as_ref().map(|b| b.0),
            best_metric: self.best.as_ref().map_or(f64::NAN, |b| b.1),
            stopped_early,
        })
    }

    /// Everything needed to continue bit-exactly: parameters, optimizer
    /// moments, the best snapshot and the schedule counters.
    pub fn state_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, (name, t)) in self.model.params.iter().enumerate() {
            s.insert(&format!("model.{name}"), t.to_matrix());
            s.insert(&format!("adam.m.{name}"), self.adam.m[k].clone());
            s.insert(&format!("adam.v.{name}"), self.adam.v[k].clone());
        }
        let (best_epoch, best_metric) = match &self.best {
            Some((e, m, p)) => {
                for (name, t) in p.iter() {
                    s.insert(&format!("best.{name}"), t.to_matrix());
                }
                (*e as f64, *m)
            }
            None => (-1.0, f64::NAN),
        };
        s.insert(
            "schedule",
            DMatrix::from_row_slice(1, 5, &[self.epoch as f64, self.adam.step as f64, self.since_best as f64, best_epoch, best_metric]),
        );
        s
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.state_store().save(path)
    }

    /// Restores a trainer written by [`Trainer::save_state`]. The history of
    /// earlier epochs is not stored and starts empty.
    pub fn resume(model_config: AssimilationConfig, config: TrainConfig, path: &Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        let pick = |prefix: &str| -> ParamStore {
            let mut p = ParamStore::new();
            for (name, t) in store.iter() {
                if let Some(rest) = name.strip_prefix(prefix) {
                    p.insert(rest, t.to_matrix());
                }
            }
            p
        };
        let model = Model::with_params(model_config, &pick("model."))?;
        let mut trainer = Trainer::new(model, config)?;
        let (m, v) = (pick("adam.m."), pick("adam.v."));
        let mut template = trainer.model.params.clone();
        template.assign_from(&m)?;
        template.assign_from(&v)?;
        trainer.adam.m = m.iter().map(|(_, t)| t.to_matrix()).collect();
        trainer.adam.v = v.iter().map(|(_, t)| t.to_matrix()).collect();
        let sched = store.matrix("schedule")?;
        if sched.len() != 5 {
            return Err(Error::Parse("schedule tensor must hold five values".into()));
        }
        trainer.epoch = sched[(0, 0)] as usize;
        trainer.adam.step = sched[(0, 1)] as u64;
        trainer.since_best = sched[(0, 2)] as usize;
        if sched[(0, 3)] >= 0.0 {
            let mut best = trainer.model.params.clone();
            best.assign_from(&pick("best."))?;
            trainer.best = Some((sched[(0, 3)] as usize, sched[(0, 4)], best));
        }
        Ok(trainer)
    }
}

/// Convenience wrapper: fresh trainer, full run, best parameters.
pub fn train(model: Model, data: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<(Model, TrainReport)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let report = trainer.fit(data, out_dir)?;
    Ok((trainer.model, report))
}

/// Predictive summaries on `grid`, one row per timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub grid: TimeGrid,
    /// Mean decoder output (class probabilities for a categorical head).
    pub mean: Mat,
    /// Empirical 5% and 95% quantiles of sampled observations.
    pub lower: Mat,
    pub upper: Mat,
    pub n_paths: usize,
}

/// Sampled predictions: encode, assimilate, build the control, propagate
/// moments by parallel scan, sample marginals, sample latent predictions
/// and decode. `target_times` defaults to the grid of `obs`; other times are
/// merged into the grid as unobserved rows.
pub fn infer(
    model: &Model,
    obs: &ObservationSeq,
    target_times: Option<&[f64]>,
    n_paths: usize,
    rng: &mut RandomStream,
) -> Result<Prediction> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be positive".into()));
    }
    let (seq, rows) = match target_times {
        None => (obs.clone(), (0..obs.len()).collect::<Vec<_>>()),
        Some(t) => extend_grid(obs, t)?,
    };
    if model.config.scheme == Scheme::History {
        let last = obs.observed_rows().last().map(|&i| obs.grid.times()[i]).unwrap_or(0.0);
        let span = last - obs.grid.start();
        let far = seq.grid.times().iter().any(|&t| t > last + 0.5 * span.max(f64::EPSILON));
        if far {
            static FAR_TARGETS: std::sync::Once = std::sync::Once::new();
            FAR_TARGETS.call_once(|| warn!("target times reach beyond 1.5x the observed span; extrapolation may be unreliable"));
        }
    }
    let cfg = &model.config;
    let m = model.potential_matrix()?;
    let k = seq.len();
    let init = model.initial_state()?;
    let mut outs: Vec<Mat> = Vec::with_capacity(n_paths);
    let mut draws: Vec<Mat> = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let (y, _) = model.encode(&seq, rng)?;
        let z = model.assimilate(&y, &seq)?;
        let control = model.control_from_context(&z, &seq.grid)?;
        let traj = moments_via_scan(&init, &control)?;
        let xs = sample_marginals(&traj, rng, 1)?;
        let x = Mat::from_fn(k, cfg.latent_dim, |i, j| xs.get(0, i)[j]);
        let mut eta = vec![0.0; k * cfg.encoded_dim];
        rng.fill_normal(&mut eta);
        let y_tilde = &x * &m + &z + Mat::from_row_slice(k, cfg.encoded_dim, &eta) * cfg.potential_var.sqrt();
        let out = model.decode(&y_tilde)?;
        let (mean, draw) = match cfg.likelihood {
            Likelihood::Gaussian => {
                let mut eps = vec![0.0; out.len()];
                rng.fill_normal(&mut eps);
                let noise = Mat::from_row_slice(out.nrows(), out.ncols(), &eps) * cfg.decoder_var.sqrt();
                (out.clone(), &out + noise)
            }
            Likelihood::Categorical => {
                let p = softmax_rows(&out);
                (p.clone(), p)
            }
        };
        outs.push(mean);
        draws.push(draw);
    }
    let c = outs[0].ncols();
    let pick = |mat: &Mat| Mat::from_fn(rows.len(), c, |r, j| mat[(rows[r], j)]);
    let mut mean = Mat::zeros(k, c);
    for o in &outs {
        mean += o;
    }
    mean /= n_paths as f64;
    let mut lower = Mat::zeros(k, c);
    let mut upper = Mat::zeros(k, c);
    let mut buf = vec![0.0; n_paths];
    for i in 0..k {
        for j in 0..c {
            for (b, d) in buf.iter_mut().zip(&draws) {
                *b = d[(i, j)];
            }
            buf.sort_by(f64::total_cmp);
            lower[(i, j)] = quantile_sorted(&buf, 0.05);
            upper[(i, j)] = quantile_sorted(&buf, 0.95);
        }
    }
    let times: Vec<f64> = rows.iter().map(|&r| seq.grid.times()[r]).collect();
    Ok(Prediction { grid: TimeGrid::new(times)?, mean: pick(&mean), lower: pick(&lower), upper: pick(&upper), n_paths })
}

/// `obs` on the union of its grid and `times`, plus the rows holding `times`.
fn extend_grid(obs: &ObservationSeq, times: &[f64]) -> Result<(ObservationSeq, Vec<usize>)> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("target times must be finite".into()));
    }
    let mut all: Vec<f64> = obs.grid.times().iter().chain(times).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let grid = TimeGrid::new(all.clone())?;
    let m = obs.dim();
    let mut values = Mat::zeros(all.len(), m);
    let mut mask = vec![false; all.len() * m];
    for (i, t) in obs.grid.times().iter().enumerate() {
        let r = all.binary_search_by(|x| x.total_cmp(t)).expect("time present");
        for j in 0..m {
            if obs.is_observed(i, j) {
                values[(r, j)] = obs.values[(i, j)];
                mask[r * m + j] = true;
            }
        }
    }
    let rows = times.iter().map(|t| all.binary_search_by(|x| x.total_cmp(t)).expect("time present")).collect();
    Ok((ObservationSeq::new(grid, values, mask)?, rows))
}

fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mx = row.max();
        row.apply(|v| *v = (*v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Linear interpolation between order statistics.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// A pooled metric over scored cells (timestamps for accuracy).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub task: Task,
    pub value: f64,
    pub n_cells: usize,
}

/// Squared-error sum (or correct-label count) and cell count over the target
/// mask.
fn score_parts(pred: &Mat, target: &ObservationSeq, task: Task) -> Result<(f64, usize)> {
    if pred.nrows() != target.len() {
        return Err(Error::Dimension(format!("{} prediction rows for {} targets", pred.nrows(), target.len())));
    }
    let mut s = 0.0;
    let mut n = 0;
    if task == Task::Classify {
        if target.dim() != 1 {
            return Err(Error::Dimension("classification targets hold one label column".into()));
        }
        for i in 0..target.len() {
            if target.is_observed(i, 0) {
                let label = pred.row(i).transpose().argmax().0;
                if label as f64 == target.values[(i, 0)] {
                    s += 1.0;
                }
                n += 1;
            }
        }
    } else {
        if pred.ncols() != target.dim() {
            return Err(Error::Dimension(format!("{} prediction columns for {} targets", pred.ncols(), target.dim())));
        }
        for i in 0..target.len() {
            for j in 0..target.dim() {
                if target.is_observed(i, j) {
                    s += (pred[(i, j)] - target.values[(i, j)]).powi(2);
                    n += 1;
                }
            }
        }
    }
    Ok((s, n))
}

/// Masked MSE, or per-timestamp accuracy for classification.
pub fn metrics(pred: &Mat, target: &ObservationSeq, task: Task) -> Result<Metric> {
    let (s, n) = score_parts(pred, target, task)?;
    if n == 0 {
        return Err(Error::InvalidArgument("the target mask is empty".into()));
    }
    Ok(Metric { task, value: s / n as f64, n_cells: n })
}

/// Pooled metric of mean predictions over a split. Sequence `i` uses the
/// child stream `i` of `rng`.
pub fn evaluate(model: &Model, data: &Dataset, split: Split, task: Task, n_paths: usize, rng: &RandomStream) -> Result<Metric> {
    let idx = data.indices(split);
    let parts: Vec<Result<(f64, usize)>> = idx
        .par_iter()
        .map(|&i| {
            let p = infer(model, &data.inputs[i], None, n_paths, &mut rng.child(i as u64))?;
            score_parts(&p.mean, &data.targets[i], task)
        })
        .collect();
    let mut s = 0.0;
    let mut n = 0;
    for p in parts {
        let (a, b) = p?;
        s += a;
        n += b;
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no scored cells in the {} split", split.as_str())));
    }
    Ok(Metric { task, value: s / n as f64, n_cells: n })
}

/// Mean predictions for every sequence of a split, in index order.
pub fn predict_split(model: &Model, data: &Dataset, split: Split, n_paths: usize, rng: &RandomStream) -> Result<Vec<(usize, Prediction)>> {
    data.indices(split)
        .par_iter()
        .map(|&i| Ok((i, infer(model, &data.inputs[i], None, n_paths, &mut rng.child(i as u64))?)))
        .collect()
}

/// Paths written by [`Trainer::fit`] under `dir`.
pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}

#[cfg(test)]
mod tests;
