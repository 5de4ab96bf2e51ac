//! Monte-Carlo coverage of the post-selection intervals for the second
//! coefficient, one row per gamma.
//!
//! cargo run --release --example coverage_table -- [replications] [n_ref]

use relsparse::output::write_coverage_csv;
use relsparse::simulate::CoverageOptions;
use relsparse::{coverage_study, SimConfig};

fn main() -> relsparse::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().map_or(100, |s| s.parse().expect("replications"));
    let n_ref: usize = args.next().map_or(20_000, |s| s.parse().expect("n_ref"));

    let cfg = SimConfig::standard(500, 2024);
    let mut rows = Vec::new();
    for gamma in [0.01, 3.0, 6.0] {
        let opts = CoverageOptions { n_ref, ..CoverageOptions::new(reps) };
        let (r, _) = coverage_study(&cfg, gamma, &[1], &opts)?;
        let r = &r[0];
        eprintln!(
            "gamma {gamma:>5}: true {:+.3} mean {:+.3} sd {:.2}/{:.2} coverage {:.3} length {:.3}",
            r.true_beta, r.mean_estimate, r.true_sd, r.mean_estimated_sd, r.coverage, r.mean_ci_length
        );
        rows.push(r.clone());
    }
    write_coverage_csv(&rows, std::io::stdout())
}
