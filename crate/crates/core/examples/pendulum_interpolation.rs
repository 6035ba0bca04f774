//! Trains on noisy pendulum trajectories with half of the timestamps hidden
//! and compares the test MSE against the naive baselines.
//!
//! Optional `key=value` arguments override the defaults, e.g.
//! `cargo run --release --example pendulum_interpolation -- n=400 epochs=20`.

use std::collections::HashMap;
use std::time::Instant;

use cdssm::data::{baselines, gen_pendulum, make_interpolation, PendulumParams, Split};
use cdssm::nn::{AssimilationConfig, Model};
use cdssm::rng::RandomStream;
use cdssm::training::{evaluate, Task, TrainConfig, Trainer};

fn main() -> cdssm::Result<()> {
    env_logger::init();
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().expect("numeric argument"));

    let n = get("n", 4000.0) as usize;
    let pend = PendulumParams::default();
    let raw = gen_pendulum(&pend, n, &RandomStream::new(0, 0))?;
    let data = make_interpolation(&raw, 0.5, &RandomStream::new(0, 1))?;
    let base = baselines(&data, Split::Test)?;
    println!("baselines: locf {:.4e}  mean {:.4e}", base.locf_mse, base.mean_mse);

    let config = AssimilationConfig {
        latent_dim: get("d", 8.0) as usize,
        encoded_dim: get("e", 16.0) as usize,
        n_base: get("L", 8.0) as usize,
        n_blocks: get("blocks", 2.0) as usize,
        sigma: get("sigma", 1.0),
        potential_var: get("pv", 0.1),
        decoder_var: get("dv", 0.01),
        encoder_var: get("ev", 0.01),
        decoder_hidden: get("hidden", 32.0) as usize,
        time_scale: pend.time_scale,
        input_dim: 2,
        output_dim: 2,
        ..AssimilationConfig::default()
    };
    let train = TrainConfig {
        learning_rate: get("lr", 1e-3),
        epochs: get("epochs", 30.0) as usize,
        batch_size: get("batch", 50.0) as usize,
        eval_paths: get("paths", 4.0) as usize,
        patience: 0,
        task: Task::Interpolate,
        ..TrainConfig::default()
    };
    let model = Model::new(config, &mut RandomStream::new(0, 2))?;
    println!("{} parameters", model.params.n_scalars());
    let mut trainer = Trainer::new(model, train)?;
    let started = Instant::now();
    while trainer.epoch < trainer.config.epochs {
        let r = trainer.step_epoch(&data, started)?;
        println!("epoch {:3}  loss {:10.4}  val mse {:.4e}  {:6.1}s", r.epoch, r.train_loss, r.val_metric, r.wall_seconds);
    }
    if let Some(best) = trainer.best_params() {
        trainer.model.params = best.clone();
    }
    let test = evaluate(&trainer.model, &data, Split::Test, Task::Interpolate, 16, &RandomStream::new(0, 3))?;
    println!(
        "test mse {:.4e}  ({:.2}x locf, {:.2}x mean)",
        test.value,
        test.value / base.locf_mse,
        test.value / base.mean_mse
    );
    Ok(())
}
