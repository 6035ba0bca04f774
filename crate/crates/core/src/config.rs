//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]`,
//! `[task]` and optional `[oracle]` sections. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_lg, gen_pendulum, load_csv, make_extrapolation, make_interpolation, Dataset, LgParams, PendulumParams};
use crate::error::{Error, Result};
use crate::nn::AssimilationConfig;
use crate::rng::RandomStream;
use crate::training::{Task, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Lg,
    Pendulum,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: Generator,
    pub n_sequences: usize,
    pub seed: u64,
    /// Latent and observation width of the linear-Gaussian generator.
    pub dim: usize,
    pub n_times: usize,
    pub lattice: usize,
    /// Generator default when absent.
    pub horizon: Option<f64>,
    /// Observation noise: a variance for `lg`, a standard deviation for
    /// `pendulum`.
    pub obs_noise: Option<f64>,
    /// Diffusion scale of the linear-Gaussian generator.
    pub sigma: Option<f64>,
    /// Input file for the `csv` generator.
    pub path: Option<PathBuf>,
    /// Where `generate` writes the dataset and the other commands read it.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: Generator::Lg,
            n_sequences: 500,
            seed: 0,
            dim: 2,
            n_times: 50,
            lattice: 100,
            horizon: None,
            obs_noise: None,
            sigma: None,
            path: None,
            dir: PathBuf::from("run/data"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Fraction of timestamps kept visible for interpolation.
    pub keep_fraction: f64,
    /// Inputs end at this fraction of the horizon for extrapolation.
    pub cutoff_fraction: f64,
    /// Sample paths per test prediction.
    pub test_paths: usize,
    /// Checkpoints, logs, predictions and metrics.
    pub out_dir: PathBuf,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { keep_fraction: 0.5, cutoff_fraction: 0.5, test_paths: 16, out_dir: PathBuf::from("run") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub seed: u64,
    /// Replaces the exact h-function with a perturbed one in the bridge check.
    pub corrupt_h: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { seed: 0, corrupt_h: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: AssimilationConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub oracle: OracleConfig,
}

impl RunConfig {
    /// Parses and validates; relative paths stay relative to the working
    /// directory.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that does not need the dataset; the model widths
    /// may stay 0 until the data fills them in.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if d.n_sequences < 3 && d.generator != Generator::Csv {
            return bad("data.n_sequences must be at least 3".into());
        }
        if d.n_times == 0 || d.n_times > d.lattice {
            return bad("data needs 0 < n_times <= lattice".into());
        }
        if d.generator == Generator::Lg && d.dim == 0 {
            return bad("data.dim must be positive".into());
        }
        if d.generator == Generator::Csv {
            match &d.path {
                None => return bad("data.path is required for the csv generator".into()),
                Some(p) if !p.exists() => return bad(format!("data.path {} does not exist", p.display())),
                _ => {}
            }
        }
        let t = &self.task;
        if !(t.keep_fraction > 0.0 && t.keep_fraction <= 1.0) {
            return bad("task.keep_fraction must lie in (0, 1]".into());
        }
        if !(t.cutoff_fraction > 0.0 && t.cutoff_fraction < 1.0) {
            return bad("task.cutoff_fraction must lie in (0, 1)".into());
        }
        if t.test_paths == 0 {
            return bad("task.test_paths must be positive".into());
        }
        let mut model = self.model.clone();
        model.input_dim = model.input_dim.max(1);
        model.output_dim = model.output_dim.max(1);
        if model.likelihood == crate::nn::Likelihood::Categorical {
            model.output_dim = model.n_classes;
        }
        model.validate()?;
        self.train.validate(&model)
    }

    /// Model configuration with input and output widths taken from `data`.
    pub fn model_for(&self, data: &Dataset) -> Result<AssimilationConfig> {
        let mut m = self.model.clone();
        m.input_dim = data.input_dim();
        m.output_dim = match m.likelihood {
            crate::nn::Likelihood::Gaussian => data.target_dim(),
            crate::nn::Likelihood::Categorical => m.n_classes,
        };
        m.validate()?;
        Ok(m)
    }

    /// Generates the raw dataset and shapes it for the configured task.
    pub fn build_dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let rng = RandomStream::new(d.seed, 0);
        let raw = match d.generator {
            Generator::Lg => {
                let base = LgParams::standard(d.dim);
                let p = LgParams {
                    n_times: d.n_times,
                    lattice: d.lattice,
                    horizon: d.horizon.unwrap_or(base.horizon),
                    obs_noise: d.obs_noise.unwrap_or(base.obs_noise),
                    sigma: d.sigma.unwrap_or(base.sigma),
                    ..base
                };
                gen_lg(&p, d.n_sequences, &rng)?
            }
            Generator::Pendulum => {
                let base = PendulumParams::default();
                let p = PendulumParams {
                    n_times: d.n_times,
                    lattice: d.lattice,
                    horizon: d.horizon.unwrap_or(base.horizon),
                    noise_std: d.obs_noise.unwrap_or(base.noise_std),
                    ..base
                };
                gen_pendulum(&p, d.n_sequences, &rng)?
            }
            Generator::Csv => load_csv(d.path.as_deref().expect("validated"))?,
        };
        match self.train.task {
            Task::Interpolate => make_interpolation(&raw, self.task.keep_fraction, &RandomStream::new(d.seed, 1)),
            Task::Extrapolate => make_extrapolation(&raw, self.task.cutoff_fraction),
            Task::Regress | Task::Classify => Ok(raw),
        }
    }
}
