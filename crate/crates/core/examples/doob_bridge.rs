//! Conditioning by drift correction: paths of the h-transformed SDE, started
//! from the smoothed initial law, land on the smoothing marginals.

use cdssm::oracle::{h_function, random_instance, rts_smoother, simulate_controlled_lg, AffineControl, RandomInstanceOptions};
use cdssm::rng::RandomStream;

fn main() -> cdssm::Result<()> {
    let mut rng = RandomStream::new(5, 0);
    let (ssm, obs) = random_instance(&mut rng, &RandomInstanceOptions::new(1, 4))?;
    let h = h_function(&ssm, &obs)?;
    let init = h.conditioned_init()?;
    let n = 20_000;
    let paths = simulate_controlled_lg(&ssm, Some(&AffineControl { h: h.clone() }), &init, n, 1e-3, &RandomStream::new(5, 1))?;
    let smooth = rts_smoother(&ssm, &obs)?;
    println!("log Z from h: {:.6}", h.log_evidence());
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "t", "smoothed", "bridge", "sm. var", "br. var");
    for (i, t) in ssm.grid().times().iter().enumerate() {
        let xs: Vec<f64> = (0..n).map(|s| paths.samples.get(s, i)[0]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        println!("{t:6.3} {:10.4} {m:10.4} {:10.4} {v:10.4}", smooth[i].mean[0], smooth[i].variances()[0]);
    }
    Ok(())
}
