//! Synthetic generators, the CSV layout and the naive baselines.

use cdssm::data::{baselines, gen_pendulum, make_extrapolation, make_interpolation, parse_csv, to_csv, PendulumParams, Split};
use cdssm::rng::RandomStream;

fn main() -> cdssm::Result<()> {
    let raw = gen_pendulum(&PendulumParams::default(), 200, &RandomStream::new(1, 0))?;
    let text = to_csv(&raw.inputs[..1])?;
    println!("first lines of one sequence:");
    for line in text.lines().take(4) {
        println!("  {line}");
    }
    let back = parse_csv(&text)?;
    assert_eq!(back[0], raw.inputs[0]);

    let interp = make_interpolation(&raw, 0.5, &RandomStream::new(1, 1))?;
    let extrap = make_extrapolation(&raw, 0.5)?;
    for (name, ds) in [("interpolation", &interp), ("extrapolation", &extrap)] {
        let b = baselines(ds, Split::Test)?;
        println!("{name:14} locf {:.4e}  mean {:.4e}  over {} cells", b.locf_mse, b.mean_mse, b.n_cells);
    }
    Ok(())
}
