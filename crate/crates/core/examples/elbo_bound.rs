//! The control objective bounds the negative log evidence: the prior control
//! and perturbed controls leave a gap, the optimal affine control closes it.

use cdssm::oracle::{kalman_filter, random_instance, RandomInstanceOptions};
use cdssm::rng::RandomStream;
use cdssm::soc::{elbo, elbo_oracle};
use nalgebra::DVector;

fn main() -> cdssm::Result<()> {
    let mut rng = RandomStream::new(9, 0);
    let (ssm, obs) = random_instance(&mut rng, &RandomInstanceOptions::new(2, 5))?;
    let log_z = kalman_filter(&ssm, &obs)?.log_evidence;
    println!("-log Z               {:10.4}", -log_z);

    for shift in [0.0, 0.5, 1.0] {
        let mut ctrl = ssm.dynamics.clone();
        for a in &mut ctrl.offsets {
            *a += DVector::from_element(ssm.dim(), shift);
        }
        let est = elbo(&ssm, &ctrl, &ssm.init, &obs, 20_000, &mut RandomStream::new(9, 1))?;
        println!("offset shift {shift:3.1}     {:10.4} ± {:.4}  gap {:.4}", est.value, est.std_error, est.value + log_z);
    }
    let est = elbo_oracle(&ssm, &obs, 20_000, 2e-3, &RandomStream::new(9, 2))?;
    println!("optimal control      {:10.4} ± {:.4}  gap {:.4}", est.value, est.std_error, est.value + log_z);
    Ok(())
}
