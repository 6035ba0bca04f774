use serde::{Deserialize, Serialize};

use super::{uniform_fan_in, Bound, Mat, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::gauss::LN_2PI;
use crate::rng::RandomStream;
use crate::types::{GaussianState, ObservationSeq, PiecewiseControl, SpdOperator, TimeGrid};

/// Offset added to exponentiated spectra and initial variances.
const POSITIVE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Context at `t` sees observations up to `t`.
    History,
    /// Context sees every observation.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian,
    /// Per-timestamp class labels stored in the single target column.
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssimilationConfig {
    pub scheme: Scheme,
    /// State dimension `d`.
    pub latent_dim: usize,
    /// Width of encoded observations, context vectors and the transformer.
    pub encoded_dim: usize,
    /// Number of base spectra `L`.
    pub n_base: usize,
    pub n_blocks: usize,
    pub encoder_var: f64,
    pub decoder_var: f64,
    pub potential_var: f64,
    /// Diffusion scale of the latent SDE.
    pub sigma: f64,
    /// Multiplies timestamps before they reach the dynamics and the time
    /// features.
    pub time_scale: f64,
    pub n_freqs: usize,
    pub decoder_hidden: usize,
    pub dropout: f64,
    pub likelihood: Likelihood,
    pub n_classes: usize,
    /// Observation width; zero until bound to a dataset.
    pub input_dim: usize,
    /// Prediction width; zero until bound to a dataset.
    pub output_dim: usize,
}

impl Default for AssimilationConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Full,
            latent_dim: 8,
            encoded_dim: 16,
            n_base: 8,
            n_blocks: 2,
            encoder_var: 0.01,
            decoder_var: 0.01,
            potential_var: 0.1,
            sigma: 1.0,
            time_scale: 1.0,
            n_freqs: 4,
            decoder_hidden: 32,
            dropout: 0.0,
            likelihood: Likelihood::Gaussian,
            n_classes: 0,
            input_dim: 0,
            output_dim: 0,
        }
    }
}

impl AssimilationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_dim == 0 || self.encoded_dim == 0 || self.n_base == 0 || self.decoder_hidden == 0 {
            return bad("latent_dim, encoded_dim, n_base and decoder_hidden must be positive");
        }
        if !(self.encoder_var > 0.0 && self.decoder_var > 0.0 && self.potential_var > 0.0) {
            return bad("encoder, decoder and potential variances must be positive");
        }
        if !(self.sigma > 0.0 && self.time_scale > 0.0) {
            return bad("sigma and time_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input and output widths are unset");
        }
        if self.likelihood == Likelihood::Categorical && (self.n_classes < 2 || self.output_dim != self.n_classes) {
            return bad("a categorical head needs n_classes >= 2 outputs");
        }
        Ok(())
    }

    pub fn n_time_features(&self) -> usize {
        1 + 2 * self.n_freqs
    }
}

/// `[τ, sin(ω_f τ), cos(ω_f τ)]` with `τ = t · time_scale` and `ω_f = 2^{-f}`.
pub fn time_features(times: &[f64], time_scale: f64, n_freqs: usize) -> Mat {
    Mat::from_fn(times.len(), 1 + 2 * n_freqs, |i, j| {
        let tau = times[i] * time_scale;
        if j == 0 {
            return tau;
        }
        let f = (j - 1) / 2;
        let w = 0.5f64.powi(f as i32);
        if (j - 1) % 2 == 0 {
            (w * tau).sin()
        } else {
            (w * tau).cos()
        }
    })
}

/// Additive causal mask: `-inf` above the diagonal.
pub fn history_mask(n: usize) -> Mat {
    Mat::from_fn(n, n, |i, j| if j > i { f64::NEG_INFINITY } else { 0.0 })
}

/// `softmax(Q Kᵀ / √w + mask) V` with `Q = X W_q + b_q` and likewise for `K`, `V`.
#[allow(clippy::too_many_arguments)]
pub fn masked_attention(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    mask: Option<&Mat>,
    dropout: Option<&Mat>,
) -> Var {
    let q = linear(tape, x, wq, bq);
    let k = linear(tape, x, wk, bk);
    let v = linear(tape, x, wv, bv);
    let width = tape.shape(q).1 as f64;
    let kt = tape.transpose(k);
    let s = tape.matmul(q, kt);
    let s = tape.scale(s, 1.0 / width.sqrt());
    let mut p = tape.softmax_rows(s, mask);
    if let Some(keep) = dropout {
        let keep = tape.constant(keep.clone());
        p = tape.mul(p, keep);
    }
    tape.matmul(p, v)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

/// Per-sequence constants shared by training and inference.
#[derive(Clone, Debug)]
pub struct SequenceInputs {
    pub grid: TimeGrid,
    /// Rows with at least one observed coordinate.
    pub observed: Vec<usize>,
    /// `[o ⊙ mask, mask]` on observed rows; unobserved cells are zero.
    pub encoder_input: Mat,
    pub time_features: Mat,
    /// Scaled interval lengths as a `(k-1) × 1` column.
    pub deltas: Mat,
    /// For each grid row, the position in `observed` of the nearest observed
    /// row at or before it (the first observed row for leading rows).
    pub fill: Vec<usize>,
}

impl SequenceInputs {
    pub fn new(config: &AssimilationConfig, obs: &ObservationSeq) -> Result<Self> {
        if obs.dim() != config.input_dim {
            return Err(Error::Dimension(format!(
                "sequence has {} coordinates, model expects {}",
                obs.dim(),
                config.input_dim
            )));
        }
        let observed = obs.observed_rows();
        if observed.is_empty() {
            return Err(Error::InvalidArgument("sequence has no observed timestamp".into()));
        }
        let m = obs.dim();
        let encoder_input = Mat::from_fn(observed.len(), 2 * m, |r, j| {
            let i = observed[r];
            if j < m {
                if obs.is_observed(i, j) {
                    obs.values[(i, j)]
                } else {
                    0.0
                }
            } else if obs.is_observed(i, j - m) {
                1.0
            } else {
                0.0
            }
        });
        let times: Vec<f64> = observed.iter().map(|&i| obs.grid.times()[i]).collect();
        let time_features = time_features(&times, config.time_scale, config.n_freqs);
        let deltas = Mat::from_iterator(obs.len() - 1, 1, obs.grid.deltas().into_iter().map(|d| d * config.time_scale));
        let mut fill = Vec::with_capacity(obs.len());
        let mut pos = 0usize;
        for i in 0..obs.len() {
            while pos + 1 < observed.len() && observed[pos + 1] <= i {
                pos += 1;
            }
            fill.push(pos);
        }
        Ok(Self { grid: obs.grid.clone(), observed, encoder_input, time_features, deltas, fill })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

/// Tape handles for the context and latent moments of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    /// Sampled encodings on observed rows.
    pub y: Var,
    pub y_mean: Var,
    /// Context on observed rows, then filled to every grid row.
    pub z_observed: Var,
    pub z: Var,
    /// Mixture weights on every grid row, `k × L`.
    pub weights: Var,
    /// Per-interval spectra and offsets, `(k-1) × d`.
    pub lambda: Var,
    pub alpha: Var,
    pub basis: Var,
    /// Eigenbasis means and variances, `k × d`.
    pub mean_hat: Var,
    pub var_hat: Var,
}

/// Scalar terms of one sequence's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SequenceOutput {
    pub loss: f64,
    pub neg_log_likelihood: f64,
    pub control_cost: f64,
    pub neg_log_potential: f64,
    /// Scored target cells.
    pub n_cells: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: AssimilationConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: AssimilationConfig, rng: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        let (m, e, d, l) = (config.input_dim, config.encoded_dim, config.latent_dim, config.n_base);
        let mut p = ParamStore::new();
        p.insert("enc.w1", uniform_fan_in(2 * m, e, rng));
        p.insert("enc.b1", Mat::zeros(1, e));
        p.insert("enc.w2", uniform_fan_in(e, e, rng));
        p.insert("enc.b2", Mat::zeros(1, e));
        p.insert("tf.in.w", uniform_fan_in(e + config.n_time_features(), e, rng));
        p.insert("tf.in.b", Mat::zeros(1, e));
        for b in 0..config.n_blocks {
            for part in ["q", "k", "v", "o", "f1", "f2"] {
                p.insert(&format!("tf.{b}.{part}.w"), uniform_fan_in(e, e, rng));
                p.insert(&format!("tf.{b}.{part}.b"), Mat::zeros(1, e));
            }
        }
        p.insert("gru.w_ih", uniform_fan_in(e, 3 * e, rng));
        p.insert("gru.w_hh", uniform_fan_in(e, 3 * e, rng));
        p.insert("gru.b_ih", Mat::zeros(1, 3 * e));
        p.insert("gru.b_hh", Mat::zeros(1, 3 * e));
        p.insert("weights.w", Mat::zeros(e, l));
        p.insert("weights.b", Mat::zeros(1, l));
        p.insert("base.log_spectra", Mat::from_fn(l, d, |_, _| rng.uniform_range(-2.0, 1.0)));
        p.insert("basis.p", Mat::from_fn(d, d, |_, _| 0.5 * rng.normal()));
        p.insert("control.b", uniform_fan_in(e, d, rng));
        p.insert("potential.m", uniform_fan_in(d, e, rng));
        p.insert("init.mean", Mat::from_fn(1, d, |_, _| 0.1 * rng.normal()));
        p.insert("init.log_var", Mat::from_fn(1, d, |_, _| rng.uniform_range(-3.0, -1.0)));
        let h = config.decoder_hidden;
        p.insert("dec.w1", uniform_fan_in(e, h, rng));
        p.insert("dec.b1", Mat::zeros(1, h));
        p.insert("dec.w2", uniform_fan_in(h, config.output_dim, rng));
        p.insert("dec.b2", Mat::zeros(1, config.output_dim));
        Ok(Self { config, params: p })
    }

    /// Builds the model layout and fills it from `params`, naming the first
    /// tensor whose shape disagrees.
    pub fn with_params(config: AssimilationConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, &mut RandomStream::new(0, 0))?;
        model.params.assign_from(params)?;
        Ok(model)
    }

    pub fn encoder_tape(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Var {
        let h = linear(tape, input, bound.var("enc.w1"), bound.var("enc.b1"));
        let h = tape.relu(h);
        linear(tape, h, bound.var("enc.w2"), bound.var("enc.b2"))
    }

    /// Attention blocks and the recurrent head over observed rows.
    pub fn transformer_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        y: Var,
        time_features: &Mat,
        dropout: Option<&mut RandomStream>,
    ) -> Var {
        let n = tape.shape(y).0;
        let tf = tape.constant(time_features.clone());
        let tokens = tape.concat_cols(&[y, tf]);
        let mut h = linear(tape, tokens, bound.var("tf.in.w"), bound.var("tf.in.b"));
        let mask = match self.config.scheme {
            Scheme::History => Some(history_mask(n)),
            Scheme::Full => None,
        };
        let mut drop_rng = dropout;
        for b in 0..self.config.n_blocks {
            let w = |part: &str, kind: &str| bound.var(&format!("tf.{b}.{part}.{kind}"));
            let keep = match (&mut drop_rng, self.config.dropout) {
                (Some(r), p) if p > 0.0 => Some(Mat::from_fn(n, n, |_, _| if r.uniform() < p { 0.0 } else { 1.0 / (1.0 - p) })),
                _ => None,
            };
            let hn = tape.layer_norm(h);
            let a = masked_attention(tape, hn, w("q", "w"), w("q", "b"), w("k", "w"), w("k", "b"), w("v", "w"), w("v", "b"), mask.as_ref(), keep.as_ref());
            let a = tape.layer_norm(a);
            let a = linear(tape, a, w("o", "w"), w("o", "b"));
            h = tape.add(h, a);
            let f = tape.layer_norm(h);
            let f = linear(tape, f, w("f1", "w"), w("f1", "b"));
            let f = tape.gelu(f);
            let f = linear(tape, f, w("f2", "w"), w("f2", "b"));
            h = tape.add(h, f);
        }
        tape.gru(h, bound.var("gru.w_ih"), bound.var("gru.w_hh"), bound.var("gru.b_ih"), bound.var("gru.b_hh"))
    }

    pub fn decoder_tape(&self, tape: &mut Tape, bound: &Bound, y_tilde: Var) -> Var {
        let h = linear(tape, y_tilde, bound.var("dec.w1"), bound.var("dec.b1"));
        let h = tape.relu(h);
        linear(tape, h, bound.var("dec.w2"), bound.var("dec.b2"))
    }

    pub fn basis_tape(&self, tape: &mut Tape, bound: &Bound) -> Var {
        let p = bound.var("basis.p");
        let pt = tape.transpose(p);
        let s = tape.sub(p, pt);
        let s = tape.scale(s, 0.5);
        tape.expm(s)
    }

    /// Spectra `λ_i = Σ_l w_l(z_i) λ^{(l)}` and offsets `α_i = B z_i` on
    /// every grid row.
    pub fn control_tape(&self, tape: &mut Tape, bound: &Bound, z: Var) -> (Var, Var, Var) {
        let logits = linear(tape, z, bound.var("weights.w"), bound.var("weights.b"));
        let w = tape.softmax_rows(logits, None);
        let base = tape.exp(bound.var("base.log_spectra"));
        let base = tape.shift(base, POSITIVE_EPS);
        let lambda = tape.matmul(w, base);
        let alpha = tape.matmul(z, bound.var("control.b"));
        (w, lambda, alpha)
    }

    /// Encoder, assimilation, control and scan moments for one sequence.
    /// `encoder_noise` is `|observed| × encoded_dim`.
    pub fn context_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &SequenceInputs,
        encoder_noise: &Mat,
        dropout: Option<&mut RandomStream>,
    ) -> Context {
        let k = inputs.len();
        let enc_in = tape.constant(inputs.encoder_input.clone());
        let y_mean = self.encoder_tape(tape, bound, enc_in);
        let noise = tape.constant(encoder_noise * self.config.encoder_var.sqrt());
        let y = tape.add(y_mean, noise);
        let z_observed = self.transformer_tape(tape, bound, y, &inputs.time_features, dropout);
        let z = tape.gather_rows(z_observed, &inputs.fill);
        let (weights, lambda_all, alpha_all) = self.control_tape(tape, bound, z);
        let left: Vec<usize> = (0..k - 1).collect();
        let lambda = tape.gather_rows(lambda_all, &left);
        let alpha = tape.gather_rows(alpha_all, &left);
        let basis = self.basis_tape(tape, bound);

        let dt = tape.constant(inputs.deltas.clone());
        let x = tape.mul_col(lambda, dt);
        let neg = tape.scale(x, -1.0);
        let decay = tape.exp(neg);
        let alpha_hat = tape.matmul(alpha, basis);
        let ph = tape.phi(x);
        let gain = tape.mul_col(ph, dt);
        let mean_add = tape.mul(gain, alpha_hat);
        let var_decay = tape.square(decay);
        let x2 = tape.scale(x, 2.0);
        let ph2 = tape.phi(x2);
        let var_add = tape.mul_col(ph2, dt);
        let var_add = tape.scale(var_add, self.config.sigma * self.config.sigma);

        let m0 = tape.matmul(bound.var("init.mean"), basis);
        let v0 = tape.exp(bound.var("init.log_var"));
        let v0 = tape.shift(v0, POSITIVE_EPS);
        let mean_hat = tape.affine_scan(decay, mean_add, m0);
        let var_hat = tape.affine_scan(var_decay, var_add, v0);
        Context { y, y_mean, z_observed, z, weights, lambda, alpha, basis, mean_hat, var_hat }
    }

    /// Latent predictions `ỹ = M x + z + √Σ_g ξ` on every grid row from
    /// standard-normal draws `state_noise` (`k × d`) and `obs_noise` (`k × e`).
    /// Returns `(X, M X + z, ỹ)`.
    pub fn predict_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &Context,
        state_noise: &Mat,
        obs_noise: &Mat,
    ) -> (Var, Var, Var) {
        let sd = tape.sqrt(ctx.var_hat);
        let xi = tape.constant(state_noise.clone());
        let spread = tape.mul(sd, xi);
        let x_hat = tape.add(ctx.mean_hat, spread);
        let et = tape.transpose(ctx.basis);
        let x = tape.matmul(x_hat, et);
        let mx = tape.matmul(x, bound.var("potential.m"));
        let r = tape.add(mx, ctx.z);
        let eta = tape.constant(obs_noise * self.config.potential_var.sqrt());
        let y_tilde = tape.add(r, eta);
        (x, r, y_tilde)
    }

    /// `Σ_i Δ_i/2 ‖α_i‖² / σ²`.
    pub fn control_cost_tape(&self, tape: &mut Tape, ctx: &Context, inputs: &SequenceInputs) -> Var {
        let sq = tape.square(ctx.alpha);
        let dt = tape.constant(inputs.deltas.clone());
        let w = tape.mul_col(sq, dt);
        let s = tape.sum(w);
        let sigma2 = self.config.sigma * self.config.sigma;
        tape.scale(s, 0.5 / sigma2)
    }

    /// `Σ_{observed i} -log N(y_i; M x_i + z_i, Σ_g)`.
    pub fn potential_tape(&self, tape: &mut Tape, ctx: &Context, r: Var, inputs: &SequenceInputs) -> Var {
        let r_obs = tape.gather_rows(r, &inputs.observed);
        let diff = tape.sub(ctx.y, r_obs);
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        let pv = self.config.potential_var;
        let s = tape.scale(s, 0.5 / pv);
        let n = (inputs.observed.len() * self.config.encoded_dim) as f64;
        tape.shift(s, 0.5 * n * (LN_2PI + pv.ln()))
    }

    /// `-Σ log p(o | ỹ)` over the target cells, and the number of cells.
    pub fn nll_tape(&self, tape: &mut Tape, out: Var, target: &ObservationSeq) -> Result<(Var, usize)> {
        let (k, c) = tape.shape(out);
        if target.len() != k {
            return Err(Error::Dimension(format!("target has {} rows, prediction {k}", target.len())));
        }
        match self.config.likelihood {
            Likelihood::Gaussian => {
                if target.dim() != c {
                    return Err(Error::Dimension(format!("target has {} columns, prediction {c}", target.dim())));
                }
                let mask = Mat::from_fn(k, c, |i, j| if target.is_observed(i, j) { 1.0 } else { 0.0 });
                let tv = Mat::from_fn(k, c, |i, j| if target.is_observed(i, j) { target.values[(i, j)] } else { 0.0 });
                let n = target.n_observed_cells();
                let t = tape.constant(tv);
                let diff = tape.sub(out, t);
                let mk = tape.constant(mask);
                let diff = tape.mul(diff, mk);
                let sq = tape.square(diff);
                let s = tape.sum(sq);
                let pv = self.config.decoder_var;
                let s = tape.scale(s, 0.5 / pv);
                Ok((tape.shift(s, 0.5 * n as f64 * (LN_2PI + pv.ln())), n))
            }
            Likelihood::Categorical => {
                if target.dim() != 1 {
                    return Err(Error::Dimension("categorical targets hold one label column".into()));
                }
                let mut onehot = Mat::zeros(k, c);
                let mut n = 0;
                for i in 0..k {
                    if target.is_observed(i, 0) {
                        let v = target.values[(i, 0)];
                        if v < 0.0 || v.fract() != 0.0 || v as usize >= c {
                            return Err(Error::InvalidArgument(format!("label {v} outside 0..{c}")));
                        }
                        onehot[(i, v as usize)] = 1.0;
                        n += 1;
                    }
                }
                let p = tape.softmax_rows(out, None);
                let lp = tape.log(p);
                let oh = tape.constant(onehot);
                let picked = tape.mul(lp, oh);
                let s = tape.sum(picked);
                Ok((tape.scale(s, -1.0), n))
            }
        }
    }

    /// Draws the noise of one loss evaluation: encoder, state and potential.
    pub fn draw_noise(&self, inputs: &SequenceInputs, rng: &mut RandomStream) -> (Mat, Mat, Mat) {
        let e = self.config.encoded_dim;
        let d = self.config.latent_dim;
        let k = inputs.len();
        let mut draw = |r: usize, c: usize| {
            let mut v = vec![0.0; r * c];
            rng.fill_normal(&mut v);
            Mat::from_row_slice(r, c, &v)
        };
        let a = draw(inputs.observed.len(), e);
        let b = draw(k, d);
        let c = draw(k, e);
        (a, b, c)
    }

    /// Negative amortized ELBO of one sequence on `tape`; returns the loss
    /// handle and its terms.
    pub fn sequence_loss_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &SequenceInputs,
        target: &ObservationSeq,
        rng: &mut RandomStream,
        train: bool,
    ) -> Result<(Var, SequenceOutput)> {
        let (en, sn, on) = self.draw_noise(inputs, rng);
        let mut drop_rng = rng.child(1);
        let ctx = self.context_tape(tape, bound, inputs, &en, if train { Some(&mut drop_rng) } else { None });
        let (_, r, y_tilde) = self.predict_tape(tape, bound, &ctx, &sn, &on);
        let out = self.decoder_tape(tape, bound, y_tilde);
        let (nll, n_cells) = self.nll_tape(tape, out, target)?;
        let cost = self.control_cost_tape(tape, &ctx, inputs);
        let pot = self.potential_tape(tape, &ctx, r, inputs);
        let latent = tape.add(cost, pot);
        let loss = tape.add(nll, latent);
        let out = SequenceOutput {
            loss: tape.scalar_value(loss),
            neg_log_likelihood: tape.scalar_value(nll),
            control_cost: tape.scalar_value(cost),
            neg_log_potential: tape.scalar_value(pot),
            n_cells,
        };
        if !out.loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {out:?}")));
        }
        Ok((loss, out))
    }

    /// Loss and parameter gradients (store order) of one sequence.
    pub fn sequence_gradients(
        &self,
        obs: &ObservationSeq,
        target: &ObservationSeq,
        rng: &mut RandomStream,
    ) -> Result<(SequenceOutput, Vec<Mat>)> {
        let inputs = SequenceInputs::new(&self.config, obs)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let (loss, out) = self.sequence_loss_tape(&mut tape, &bound, &inputs, target, rng, true)?;
        let mut grads = tape.backward(loss)?;
        Ok((out, bound.collect(&self.params, &mut grads)))
    }

    /// Loss without gradients.
    pub fn sequence_loss(&self, obs: &ObservationSeq, target: &ObservationSeq, rng: &mut RandomStream) -> Result<SequenceOutput> {
        let inputs = SequenceInputs::new(&self.config, obs)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        Ok(self.sequence_loss_tape(&mut tape, &bound, &inputs, target, rng, false)?.1)
    }

    /// Encoded observations on observed rows: `(sample, mean)`.
    pub fn encode(&self, obs: &ObservationSeq, rng: &mut RandomStream) -> Result<(Mat, Mat)> {
        let inputs = SequenceInputs::new(&self.config, obs)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(inputs.encoder_input.clone());
        let mean = self.encoder_tape(&mut tape, &bound, x);
        let mean = tape.value(mean).clone();
        let mut noise = vec![0.0; mean.len()];
        rng.fill_normal(&mut noise);
        let noise = Mat::from_row_slice(mean.nrows(), mean.ncols(), &noise);
        Ok((&mean + noise * self.config.encoder_var.sqrt(), mean))
    }

    /// Context `z` on every grid row of `obs` from encodings `y` of its
    /// observed rows.
    pub fn assimilate(&self, y: &Mat, obs: &ObservationSeq) -> Result<Mat> {
        let inputs = SequenceInputs::new(&self.config, obs)?;
        if y.shape() != (inputs.observed.len(), self.config.encoded_dim) {
            return Err(Error::Dimension(format!(
                "encodings are {:?}, expected {:?}",
                y.shape(),
                (inputs.observed.len(), self.config.encoded_dim)
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let yv = tape.constant(y.clone());
        let zo = self.transformer_tape(&mut tape, &bound, yv, &inputs.time_features, None);
        let z = tape.gather_rows(zo, &inputs.fill);
        Ok(tape.value(z).clone())
    }

    /// Orthonormal basis `E = expm(skew(P))`.
    pub fn basis(&self) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let e = self.basis_tape(&mut tape, &bound);
        Ok(tape.value(e).clone())
    }

    /// Base spectra as an `L × d` matrix.
    pub fn base_spectra(&self) -> Result<Mat> {
        Ok(self.params.matrix("base.log_spectra")?.map(|v| v.exp() + POSITIVE_EPS))
    }

    /// Mixture weights, spectra and offsets for every row of `z`.
    pub fn control_rows(&self, z: &Mat) -> Result<(Mat, Mat, Mat)> {
        if z.ncols() != self.config.encoded_dim {
            return Err(Error::Dimension(format!("context width {} != {}", z.ncols(), self.config.encoded_dim)));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (w, l, a) = self.control_tape(&mut tape, &bound, zv);
        Ok((tape.value(w).clone(), tape.value(l).clone(), tape.value(a).clone()))
    }

    /// Piecewise-constant control on `grid` (rescaled by `time_scale`); the
    /// control on `[t_i, t_{i+1})` uses row `i` of `z`.
    pub fn control_from_context(&self, z: &Mat, grid: &TimeGrid) -> Result<PiecewiseControl> {
        if z.nrows() != grid.len() {
            return Err(Error::Dimension(format!("{} context rows for {} timestamps", z.nrows(), grid.len())));
        }
        let (w, lambda, alpha) = self.control_rows(z)?;
        for i in 0..w.nrows() {
            let s: f64 = w.row(i).sum();
            debug_assert!((s - 1.0).abs() < 1e-12, "mixture weights sum to {s}");
        }
        let k = grid.len();
        let spectra = (0..k - 1).map(|i| lambda.row(i).transpose()).collect();
        let offsets = (0..k - 1).map(|i| alpha.row(i).transpose()).collect();
        let op = SpdOperator::new(self.basis()?, spectra)?;
        PiecewiseControl::new(grid.scaled(self.config.time_scale)?, op, offsets, self.config.sigma)
    }

    /// Initial law `N(m_0, E diag(v_0) Eᵀ)` as an eigenbasis state.
    pub fn initial_state(&self) -> Result<GaussianState> {
        let e = self.basis()?;
        let m0 = self.params.matrix("init.mean")?.row(0).transpose();
        let v0 = self.params.matrix("init.log_var")?.row(0).transpose().map(|v| v.exp() + POSITIVE_EPS);
        GaussianState::eigen_diag(e.tr_mul(&m0), v0)
    }

    pub fn potential_matrix(&self) -> Result<Mat> {
        self.params.matrix("potential.m")
    }

    /// Raw decoder outputs (means, or logits for a categorical head).
    pub fn decode(&self, y_tilde: &Mat) -> Result<Mat> {
        if y_tilde.ncols() != self.config.encoded_dim {
            return Err(Error::Dimension(format!("decoder input width {} != {}", y_tilde.ncols(), self.config.encoded_dim)));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let y = tape.constant(y_tilde.clone());
        let out = self.decoder_tape(&mut tape, &bound, y);
        Ok(tape.value(out).clone())
    }

    /// `log p(target | decoder output)` over the target mask.
    pub fn log_likelihood(&self, out: &Mat, target: &ObservationSeq) -> Result<f64> {
        let mut tape = Tape::new();
        let o = tape.constant(out.clone());
        let (nll, _) = self.nll_tape(&mut tape, o, target)?;
        Ok(-tape.scalar_value(nll))
    }
}
