//! Marginal means and variances of a piecewise-constant linear SDE from the
//! scan, next to Monte Carlo estimates from a fine Euler-Maruyama chain.

use cdssm::oracle::{random_instance, simulate_prior_em_aggregated, LinearGaussianSSM, RandomInstanceOptions};
use cdssm::pscan::moments_via_scan;
use cdssm::rng::RandomStream;
use cdssm::types::GaussianState;
use nalgebra::DVector;

fn main() -> cdssm::Result<()> {
    let mut rng = RandomStream::new(3, 0);
    let (ssm, _) = random_instance(&mut rng, &RandomInstanceOptions::new(2, 6))?;
    let init = GaussianState::eigen_diag(DVector::from_vec(vec![1.0, -0.5]), DVector::from_vec(vec![0.2, 0.4]))?;
    let ssm = LinearGaussianSSM::new(ssm.dynamics.clone(), init.clone(), ssm.emission.clone())?;

    let traj = moments_via_scan(&init, &ssm.dynamics)?;
    let n = 20_000;
    let mc = simulate_prior_em_aggregated(&ssm, n, 1e-4, &RandomStream::new(3, 1))?;
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "t", "mean", "mc mean", "var", "mc var");
    for (i, t) in ssm.grid().times().iter().enumerate() {
        let st = ssm.operator().state_from_eigenbasis(&traj.states[i])?;
        let xs: Vec<f64> = (0..n).map(|s| mc.get(s, i)[0]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        println!("{t:6.3} {:10.4} {m:10.4} {:10.4} {v:10.4}", st.mean[0], st.variances()[0]);
    }
    Ok(())
}
