//! Context vectors from the masked transformer. Under the causal scheme a
//! change to one observation only moves the context at and after it.

use cdssm::nn::{AssimilationConfig, Model, Scheme};
use cdssm::rng::RandomStream;
use cdssm::types::{ObservationSeq, TimeGrid};
use nalgebra::DMatrix;

fn main() -> cdssm::Result<()> {
    let grid = TimeGrid::new(vec![0.0, 0.3, 0.9, 1.4, 2.2, 2.5])?;
    let values = DMatrix::from_fn(6, 1, |i, _| (i as f64).sin());
    let seq = ObservationSeq::new(grid, values, vec![true, true, false, true, true, true])?;
    for scheme in [Scheme::History, Scheme::Full] {
        let cfg = AssimilationConfig { scheme, latent_dim: 2, encoded_dim: 4, n_base: 2, input_dim: 1, output_dim: 1, ..AssimilationConfig::default() };
        let model = Model::new(cfg, &mut RandomStream::new(1, 0))?;
        let context = |s: &ObservationSeq| -> cdssm::Result<DMatrix<f64>> {
            let (_, y) = model.encode(s, &mut RandomStream::new(0, 0))?;
            model.assimilate(&y, s)
        };
        let base = context(&seq)?;
        let mut moved = seq.clone();
        moved.values[(3, 0)] += 1.0;
        let after = context(&moved)?;
        let changed: Vec<usize> = (0..6).filter(|&i| base.row(i) != after.row(i)).collect();
        println!("{scheme:?}: perturbing row 3 changes context rows {changed:?}");
    }
    Ok(())
}
