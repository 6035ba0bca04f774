//! Runs the oracle verification suite at full or quick budget and prints one
//! line per check. `cargo run --release --example oracle_checks -- quick`

use std::time::Instant;

use cdssm::verify::{bridge_check, bound_check, moments_check, pde_check, scan_check, static_gap_check, tightness_check, Budget};

fn main() -> cdssm::Result<()> {
    let quick = std::env::args().any(|a| a == "quick");
    let corrupt = std::env::args().any(|a| a == "corrupt");
    let budget = Budget { corrupt_h: corrupt, ..if quick { Budget::quick(0) } else { Budget::full(0) } };
    let start = Instant::now();
    let lap = || {
        let s = start.elapsed().as_secs_f64();
        format!("{s:7.1}s")
    };
    println!("{}  {}", scan_check(budget.seed)?, lap());
    println!("{}  {}", moments_check(&budget)?, lap());
    println!("{}  {}", bridge_check(&budget)?, lap());
    println!("{}  {}", bound_check(&budget)?, lap());
    println!("{}  {}", tightness_check(&budget)?, lap());
    println!("{}  {}", static_gap_check(&budget)?, lap());
    println!("{}  {}", pde_check()?, lap());
    Ok(())
}
