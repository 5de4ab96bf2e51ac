//! Selection diagram for one (gamma, delta) cell: the lambda path with
//! coefficients, sd bands, train and test value and the chosen lambda.
//! Writes the plot-ready CSV to stdout.
//!
//! cargo run --example selection_diagram -- [gamma] [delta] > diagram.csv

use relsparse::inference::selection_grid;
use relsparse::output::write_path_csv;
use relsparse::trajectories::DEFAULT_SPLIT_FRACTIONS;
use relsparse::{gen_dataset, split_dataset, PipelineConfig, SimConfig};

fn main() -> relsparse::Result<()> {
    let mut args = std::env::args().skip(1);
    let gamma: f64 = args.next().map_or(3.0, |s| s.parse().expect("gamma"));
    let delta: f64 = args.next().map_or(1.0, |s| s.parse().expect("delta"));

    let d = gen_dataset(&SimConfig::standard(1000, 3))?;
    let split = split_dataset(d.n(), 3, DEFAULT_SPLIT_FRACTIONS)?;
    let train = d.subset(&split.split1_train)?;
    let test = d.subset(&split.split1_test)?;
    let cfg = PipelineConfig { fixed: Some((gamma, delta)), ..PipelineConfig::default() };
    let (_, v_beh, cells) = selection_grid(&train, Some(&test), &cfg)?;
    let cell = &cells[0];

    eprintln!("behavioral value {:.4}, threshold {:.4}", v_beh.v_weighted, cell.selection.v_min);
    eprintln!("{:>10} {:>9} {:>9} {:>8} {:>9}  active", "lambda", "beta_1", "beta_2", "band_2", "v_train");
    for (i, p) in cell.path.iter().enumerate() {
        let mark = if i == cell.selection.index { "  <- selected" } else { "" };
        eprintln!(
            "{:>10.5} {:>9.4} {:>9.4} {:>8.4} {:>9.4}  {:?}{mark}",
            p.lambda,
            p.beta.as_slice()[0],
            p.beta.as_slice()[1],
            p.sd_band[1],
            p.value_train.map_or(f64::NAN, |v| v.v_weighted),
            p.active_set.iter().map(|j| j + 1).collect::<Vec<_>>(),
        );
    }
    write_path_csv(&cell.path, d.dim(), std::io::stdout())
}
