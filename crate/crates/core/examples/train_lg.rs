//! End-to-end training on linear-Gaussian sequences with half of the
//! timestamps hidden, then test MSE next to the naive baselines.

use cdssm::data::{baselines, gen_lg, make_interpolation, LgParams, Split};
use cdssm::nn::{AssimilationConfig, Model};
use cdssm::rng::RandomStream;
use cdssm::training::{evaluate, train, Task, TrainConfig};

fn main() -> cdssm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let raw = gen_lg(&LgParams::standard(2), 400, &RandomStream::new(0, 0))?;
    let data = make_interpolation(&raw, 0.5, &RandomStream::new(0, 1))?;
    let cfg = AssimilationConfig {
        latent_dim: 4,
        encoded_dim: 8,
        n_base: 4,
        n_blocks: 1,
        n_freqs: 2,
        decoder_hidden: 16,
        input_dim: 2,
        output_dim: 2,
        ..AssimilationConfig::default()
    };
    let train_cfg = TrainConfig { learning_rate: 3e-3, epochs: 20, batch_size: 25, eval_paths: 4, ..TrainConfig::default() };
    let model = Model::new(cfg, &mut RandomStream::new(0, 2))?;
    let (model, report) = train(model, &data, &train_cfg, None)?;
    println!("best epoch {:?}", report.best_epoch);
    let test = evaluate(&model, &data, Split::Test, Task::Interpolate, 16, &RandomStream::new(0, 3))?;
    let b = baselines(&data, Split::Test)?;
    println!("test mse {:.4e}   locf {:.4e}   mean {:.4e}", test.value, b.locf_mse, b.mean_mse);
    Ok(())
}
