//! Exact filtering and smoothing of a random linear-Gaussian system with
//! partially masked observations.

use cdssm::oracle::{kalman_filter, random_instance, rts_smoother, RandomInstanceOptions};
use cdssm::rng::RandomStream;

fn main() -> cdssm::Result<()> {
    let mut rng = RandomStream::new(11, 0);
    let opts = RandomInstanceOptions { mask_prob: 0.3, ..RandomInstanceOptions::new(2, 8) };
    let (ssm, obs) = random_instance(&mut rng, &opts)?;
    let filt = kalman_filter(&ssm, &obs)?;
    let smooth = rts_smoother(&ssm, &obs)?;
    println!("log evidence {:.6}", filt.log_evidence);
    println!("{:>6} {:>16} {:>22} {:>22}", "t", "observed", "filtered mean", "smoothed mean");
    for (i, t) in obs.grid.times().iter().enumerate() {
        let seen: Vec<String> = (0..obs.dim())
            .map(|j| if obs.is_observed(i, j) { format!("{:7.3}", obs.values[(i, j)]) } else { "      -".into() })
            .collect();
        let f = &filt.filtered[i].mean;
        let s = &smooth[i].mean;
        println!("{t:6.3} {:>16} {:10.4} {:10.4}  {:10.4} {:10.4}", seen.join(" "), f[0], f[1], s[0], s[1]);
    }
    Ok(())
}
