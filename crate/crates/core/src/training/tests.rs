use nalgebra::DVector;

use super::*;
use crate::data::{baselines, gen_lg, make_interpolation, LgParams};
use crate::gauss::{log_density_1d, mean_and_se};
use crate::nn::SequenceInputs;
use crate::oracle::{kalman_filter, Emission, LinearGaussianSSM};
use crate::soc::elbo;
use crate::types::{GaussianState, PiecewiseControl};

fn small_model_config(scheme: Scheme) -> AssimilationConfig {
    AssimilationConfig {
        scheme,
        latent_dim: 2,
        encoded_dim: 4,
        n_base: 2,
        n_blocks: 1,
        n_freqs: 2,
        decoder_hidden: 8,
        input_dim: 1,
        output_dim: 1,
        ..AssimilationConfig::default()
    }
}

fn ou_dataset(n: usize, n_times: usize, seed: u64) -> Dataset {
    let params = LgParams { n_times, ..LgParams::standard(1) };
    gen_lg(&params, n, &RandomStream::new(seed, 0)).unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, learning_rate: 5e-3, eval_paths: 2, patience: 0, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = ou_dataset(20, 10, 1);
    let model = Model::new(small_model_config(Scheme::Full), &mut RandomStream::new(1, 1)).unwrap();
    let before = model.params.clone();
    let mut cfg = quick_config(1);
    cfg.learning_rate = 0.0;
    cfg.weight_decay = 0.01;
    let (after, report) = train(model, &data, &cfg, None).unwrap();
    assert_eq!(after.params, before);
    assert_eq!(report.history.len(), 1);
}

#[test]
fn extrapolation_requires_the_history_scheme() {
    let cfg = TrainConfig { task: Task::Extrapolate, ..TrainConfig::default() };
    let full = small_model_config(Scheme::Full);
    assert!(matches!(cfg.validate(&full), Err(Error::Config(_))));
    assert!(cfg.validate(&small_model_config(Scheme::History)).is_ok());
    let cls = TrainConfig { task: Task::Classify, ..TrainConfig::default() };
    assert!(matches!(cls.validate(&full), Err(Error::Config(_))));
}

/// Scalar forward pass of a one-block-free model on one timestamp.
#[test]
fn single_observation_loss_matches_hand_evaluation() {
    let cfg = AssimilationConfig {
        scheme: Scheme::Full,
        latent_dim: 1,
        encoded_dim: 1,
        n_base: 1,
        n_blocks: 0,
        n_freqs: 0,
        decoder_hidden: 1,
        input_dim: 1,
        output_dim: 1,
        encoder_var: 0.04,
        decoder_var: 0.01,
        potential_var: 0.1,
        time_scale: 0.5,
        ..AssimilationConfig::default()
    };
    let mut model = Model::new(cfg.clone(), &mut RandomStream::new(2, 0)).unwrap();
    let set = |model: &mut Model, name: &str, vals: &[f64]| {
        model.params.get_mut(name).unwrap().values = vals.to_vec();
    };
    set(&mut model, "enc.w1", &[0.7, -0.2]);
    set(&mut model, "enc.b1", &[0.1]);
    set(&mut model, "enc.w2", &[1.3]);
    set(&mut model, "enc.b2", &[-0.05]);
    set(&mut model, "tf.in.w", &[0.9, 0.4]);
    set(&mut model, "tf.in.b", &[0.02]);
    set(&mut model, "gru.w_ih", &[0.5, -0.6, 0.8]);
    set(&mut model, "gru.w_hh", &[0.3, 0.2, -0.4]);
    set(&mut model, "gru.b_ih", &[0.1, 0.0, -0.1]);
    set(&mut model, "gru.b_hh", &[-0.2, 0.3, 0.25]);
    set(&mut model, "potential.m", &[1.1]);
    set(&mut model, "init.mean", &[0.3]);
    set(&mut model, "init.log_var", &[-1.5]);
    set(&mut model, "dec.w1", &[0.8]);
    set(&mut model, "dec.b1", &[0.4]);
    set(&mut model, "dec.w2", &[-1.2]);
    set(&mut model, "dec.b2", &[0.05]);

    let o = 0.37;
    let target = 0.41;
    let t0 = 1.6;
    let grid = TimeGrid::new(vec![t0]).unwrap();
    let obs = ObservationSeq::fully_observed(grid.clone(), Mat::from_element(1, 1, o)).unwrap();
    let tgt = ObservationSeq::fully_observed(grid, Mat::from_element(1, 1, target)).unwrap();

    let rng = RandomStream::new(7, 3);
    let inputs = SequenceInputs::new(&cfg, &obs).unwrap();
    let (en, sn, on) = model.draw_noise(&inputs, &mut rng.clone());
    let out = model.sequence_loss(&obs, &tgt, &mut rng.clone()).unwrap();

    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let y = 1.3 * (0.7 * o - 0.2 * 1.0 + 0.1f64).max(0.0) - 0.05 + 0.2 * en[(0, 0)];
    let tau = t0 * 0.5;
    let h = 0.9 * y + 0.4 * tau + 0.02;
    let r = sig(0.5 * h + 0.1 - 0.2);
    let z = sig(-0.6 * h + 0.3);
    let n = (0.8 * h - 0.1 + r * 0.25).tanh();
    let ctx = (1.0 - z) * n;
    let v0 = (-1.5f64).exp() + 1e-6;
    let x = 0.3 + v0.sqrt() * sn[(0, 0)];
    let mean = 1.1 * x + ctx;
    let y_tilde = mean + 0.1f64.sqrt() * on[(0, 0)];
    let pred = -1.2 * (0.8 * y_tilde + 0.4f64).max(0.0) + 0.05;
    let nll = -log_density_1d(target, pred, 0.01);
    let pot = -log_density_1d(y, mean, 0.1);

    assert_eq!(out.control_cost, 0.0);
    assert!((out.neg_log_likelihood - nll).abs() < 1e-10, "{} vs {nll}", out.neg_log_likelihood);
    assert!((out.neg_log_potential - pot).abs() < 1e-10);
    assert!((out.loss - nll - pot).abs() < 1e-10);
}

#[test]
fn zero_offset_map_costs_nothing() {
    let data = ou_dataset(4, 12, 3);
    let mut model = Model::new(small_model_config(Scheme::History), &mut RandomStream::new(3, 0)).unwrap();
    model.params.get_mut("control.b").unwrap().values.iter_mut().for_each(|v| *v = 0.0);
    let out = model.sequence_loss(&data.inputs[0], &data.targets[0], &mut RandomStream::new(0, 0)).unwrap();
    assert_eq!(out.control_cost, 0.0);
}

#[test]
fn every_parameter_receives_gradient() {
    let data = ou_dataset(6, 12, 4);
    let model = Model::new(small_model_config(Scheme::History), &mut RandomStream::new(4, 0)).unwrap();
    let batch: Vec<Example> = (0..6).map(|i| Example { id: i as u64, input: &data.inputs[i], target: &data.targets[i] }).collect();
    let out = amortized_elbo(&model, &batch, 1, &RandomStream::new(4, 1)).unwrap();
    for ((name, _), g) in model.params.iter().zip(&out.gradients) {
        assert!(g.norm() > 0.0, "{name} has a zero gradient");
    }
}

#[test]
fn batch_gradients_do_not_depend_on_thread_count() {
    let data = ou_dataset(8, 12, 5);
    let model = Model::new(small_model_config(Scheme::Full), &mut RandomStream::new(5, 0)).unwrap();
    let batch: Vec<Example> = (0..8).map(|i| Example { id: i as u64, input: &data.inputs[i], target: &data.targets[i] }).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| amortized_elbo(&model, &batch, 2, &RandomStream::new(5, 1)).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.terms, b.terms);
    assert_eq!(a.gradients, b.gradients);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut params = ParamStore::new();
    params.insert("w", Mat::from_row_slice(1, 3, &[1.0, 2.0, 3.0]));
    let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
    let mut adam = Adam::new(&cfg, &params);
    adam.update(&mut params, vec![Mat::from_row_slice(1, 3, &[0.5, -2.0, 0.0])]).unwrap();
    let w = params.matrix("w").unwrap();
    assert!((w[(0, 0)] - 0.9).abs() < 1e-6);
    assert!((w[(0, 1)] - 2.1).abs() < 1e-6);
    assert_eq!(w[(0, 2)], 3.0);

    let mut g = vec![Mat::from_element(2, 2, 3.0), Mat::from_element(1, 1, 4.0)];
    let before = clip_global_norm(&mut g, 1.0);
    assert!((before - 52f64.sqrt()).abs() < 1e-12);
    assert!((global_norm(&g) - 1.0).abs() < 1e-12);
}

#[test]
fn metric_contracts() {
    let grid = TimeGrid::new((0..400).map(f64::from).collect()).unwrap();
    let mut rng = RandomStream::new(6, 0);
    let vals = Mat::from_fn(400, 2, |_, _| rng.normal());
    let tgt = ObservationSeq::fully_observed(grid.clone(), vals.clone()).unwrap();
    assert_eq!(metrics(&vals, &tgt, Task::Regress).unwrap().value, 0.0);
    let mse = metrics(&Mat::zeros(400, 2), &tgt, Task::Regress).unwrap();
    // Sample second moment of 800 standard normals.
    assert!((mse.value - 1.0).abs() < 4.0 * (2.0f64 / 800.0).sqrt(), "{}", mse.value);

    let mut half = tgt.clone();
    for i in 0..400 {
        half.mask[2 * i + 1] = false;
    }
    let direct: f64 = (0..400).map(|i| vals[(i, 0)].powi(2)).sum::<f64>() / 400.0;
    let m = metrics(&Mat::zeros(400, 2), &half, Task::Regress).unwrap();
    assert_eq!(m.n_cells, 400);
    assert!((m.value - direct).abs() < 1e-12);

    let mut none = tgt.clone();
    none.mask.iter_mut().for_each(|b| *b = false);
    assert!(metrics(&vals, &none, Task::Regress).is_err());

    let labels = ObservationSeq::fully_observed(grid, Mat::from_fn(400, 1, |i, _| (i % 3) as f64)).unwrap();
    let logits = Mat::from_fn(400, 3, |i, j| if j == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(metrics(&logits, &labels, Task::Classify).unwrap().value, 1.0);
}

#[test]
fn inference_is_deterministic_and_collapses_without_noise() {
    let data = ou_dataset(3, 12, 7);
    let mut cfg = small_model_config(Scheme::Full);
    cfg.encoder_var = 1e-30;
    cfg.potential_var = 1e-30;
    cfg.decoder_var = 1e-30;
    cfg.sigma = 1e-9;
    let mut model = Model::new(cfg, &mut RandomStream::new(7, 0)).unwrap();
    model.params.get_mut("init.log_var").unwrap().values.iter_mut().for_each(|v| *v = -60.0);
    let obs = &data.inputs[0];
    let a = infer(&model, obs, None, 5, &mut RandomStream::new(1, 1)).unwrap();
    let b = infer(&model, obs, None, 5, &mut RandomStream::new(1, 1)).unwrap();
    assert_eq!(a, b);

    let (_, y) = model.encode(obs, &mut RandomStream::new(0, 0)).unwrap();
    let z = model.assimilate(&y, obs).unwrap();
    let control = model.control_from_context(&z, &obs.grid).unwrap();
    let traj = moments_via_scan(&model.initial_state().unwrap(), &control).unwrap();
    let x = Mat::from_fn(obs.len(), 2, |i, j| traj.standard_mean(i)[j]);
    let det = model.decode(&(&x * model.potential_matrix().unwrap() + &z)).unwrap();
    // The initial variance keeps a 1e-6 floor, so paths still spread by ~1e-3.
    assert!((&a.mean - &det).amax() < 5e-3);
    assert!((&a.upper - &a.lower).amax() < 2e-2);

    let extra = [0.05, obs.grid.times()[3]];
    let p = infer(&model, obs, Some(&extra), 2, &mut RandomStream::new(1, 1)).unwrap();
    assert_eq!(p.grid.times(), &extra[..]);
    assert!((p.mean.row(1) - det.row(3)).amax() < 5e-3);
}

/// Median of the first and last tenth of a loss curve.
fn early_late_medians(losses: &[f64]) -> (f64, f64) {
    let n = (losses.len() / 10).max(1);
    let med = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    (med(&losses[..n]), med(&losses[losses.len() - n..]))
}

#[test]
fn ou_interpolation_beats_the_mean_predictor() {
    let base = ou_dataset(60, 20, 8);
    let data = make_interpolation(&base, 0.5, &RandomStream::new(8, 1)).unwrap();
    let model = Model::new(small_model_config(Scheme::Full), &mut RandomStream::new(8, 2)).unwrap();
    let cfg = TrainConfig { seed: 8, ..quick_config(200) };
    let (model, report) = train(model, &data, &cfg, None).unwrap();
    let losses: Vec<f64> = report.history.iter().map(|r| r.train_loss).collect();
    let (early, late) = early_late_medians(&losses);
    assert!(late < early, "loss did not decrease: {early} -> {late}");

    let b = baselines(&data, Split::Val).unwrap();
    let val = evaluate(&model, &data, Split::Val, Task::Interpolate, 8, &RandomStream::new(8, 3)).unwrap();
    assert!(val.value < b.mean_mse, "model {} vs mean predictor {}", val.value, b.mean_mse);

    // Reconstruction of observed inputs stays at the scale of the data noise
    // plus the decoder spread.
    let mut sse = 0.0;
    let mut n = 0;
    for i in data.indices(Split::Val) {
        let p = infer(&model, &data.inputs[i], None, 8, &mut RandomStream::new(8, i as u64)).unwrap();
        let (s, c) = score_parts(&p.mean, &data.inputs[i], Task::Interpolate).unwrap();
        sse += s;
        n += c;
    }
    assert!(sse / (n as f64) < b.mean_mse, "reconstruction {}", sse / n as f64);
}

#[test]
fn resumed_training_reproduces_the_trajectory() {
    let data = ou_dataset(24, 10, 9);
    let model = Model::new(small_model_config(Scheme::History), &mut RandomStream::new(9, 0)).unwrap();
    let cfg = TrainConfig { seed: 9, ..quick_config(4) };
    let mut straight = Trainer::new(model.clone(), cfg.clone()).unwrap();
    straight.fit(&data, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(model.clone(), TrainConfig { epochs: 2, ..cfg.clone() }).unwrap();
    first.fit(&data, Some(dir.path())).unwrap();
    let mut second = Trainer::resume(model.config.clone(), cfg, &dir.path().join("state.ckpt")).unwrap();
    second.fit(&data, Some(dir.path())).unwrap();

    let key = |r: &EpochRecord| (r.epoch, r.train_loss.to_bits(), r.val_metric.to_bits());
    let joined: Vec<_> = first.history.iter().chain(&second.history).map(key).collect();
    let direct: Vec<_> = straight.history.iter().map(key).collect();
    assert_eq!(joined, direct);
    assert_eq!(second.model.params, straight.model.params);

    let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some(LOG_HEADER));
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn divergence_rolls_back_to_the_last_good_parameters() {
    let mut data = ou_dataset(10, 8, 10);
    for t in &mut data.targets {
        t.values[(0, 0)] = 1e200;
    }
    let model = Model::new(small_model_config(Scheme::Full), &mut RandomStream::new(10, 0)).unwrap();
    let before = model.params.clone();
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(model, quick_config(3)).unwrap();
    let err = trainer.fit(&data, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
    assert_eq!(trainer.model.params, before);
    assert_eq!(ParamStore::load(&dir.path().join("last_good.ckpt")).unwrap(), before);
}

/// With the encoder noise switched off, the latent part of the loss is the
/// negative ELBO of a linear-Gaussian model whose observations are the
/// encodings, so its mean sits above the exact negative log evidence.
#[test]
fn frozen_model_latent_term_bounds_the_log_evidence() {
    let data = ou_dataset(2, 10, 11);
    let mut cfg = small_model_config(Scheme::History);
    cfg.encoder_var = 1e-300;
    let model = Model::new(cfg.clone(), &mut RandomStream::new(11, 0)).unwrap();
    let obs = &data.inputs[0];

    let n = 4000;
    let latent: Vec<f64> = (0..n)
        .map(|s| {
            let o = model.sequence_loss(obs, &data.targets[0], &mut RandomStream::new(11, s)).unwrap();
            o.control_cost + o.neg_log_potential
        })
        .collect();
    let (mean, se) = mean_and_se(&latent);

    let (_, y) = model.encode(obs, &mut RandomStream::new(0, 0)).unwrap();
    let z = model.assimilate(&y, obs).unwrap();
    let control = model.control_from_context(&z, &obs.grid).unwrap();
    let k = obs.len();
    let e = cfg.encoded_dim;
    let rows = obs.observed_rows();
    let mut resid = Mat::zeros(k, e);
    let mut mask = vec![false; k * e];
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..e {
            resid[(i, j)] = y[(r, j)] - z[(i, j)];
            mask[i * e + j] = true;
        }
    }
    let y_obs = ObservationSeq::new(obs.grid.scaled(cfg.time_scale).unwrap(), resid, mask).unwrap();
    let zero: Vec<DVector<f64>> = vec![DVector::zeros(cfg.latent_dim); k - 1];
    let prior = PiecewiseControl::new(control.grid.clone(), control.operator.clone(), zero, cfg.sigma).unwrap();
    let emission = Emission::shared(model.potential_matrix().unwrap().transpose(), DVector::from_element(e, cfg.potential_var), k).unwrap();
    let init: GaussianState = model.initial_state().unwrap();
    let ssm = LinearGaussianSSM::new(prior, init.clone(), emission).unwrap();
    let log_z = kalman_filter(&ssm, &y_obs).unwrap().log_evidence;
    let est = elbo(&ssm, &control, &init, &y_obs, 20000, &mut RandomStream::new(11, 99)).unwrap();

    assert!(mean + log_z >= -3.0 * se, "gap {} se {se}", mean + log_z);
    assert!(est.value + log_z >= -3.0 * est.std_error);
    let tol = 4.0 * (se * se + est.std_error * est.std_error).sqrt();
    assert!((mean - est.value).abs() < tol, "tape {mean} vs estimator {}", est.value);
}
