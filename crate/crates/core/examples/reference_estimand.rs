//! The target of inference in simulation: the penalized maximizer computed
//! from the known expected reward on a large dataset, without importance
//! weights.
//!
//! cargo run --release --example reference_estimand -- [n_ref]

use relsparse::{reference_estimand, ActiveMask, SimConfig};

fn main() -> relsparse::Result<()> {
    let n_ref: usize = std::env::args().nth(1).map_or(100_000, |s| s.parse().expect("n_ref"));
    let cfg = SimConfig::standard(500, 2024);
    for gamma in [0.01, 3.0, 6.0] {
        let full = reference_estimand(&cfg, gamma, n_ref, &ActiveMask::all(2))?;
        let second = reference_estimand(&cfg, gamma, n_ref, &ActiveMask::from_indices(2, &[1])?)?;
        println!(
            "gamma {gamma:>5}: all free {:?}  only s2 free {:+.4}  (behavioral {:?})",
            full.beta.as_slice(),
            second.beta.as_slice()[1],
            full.b_ref.as_slice()
        );
    }
    Ok(())
}
