//! Load trajectories from CSV, scale the states and run the pipeline,
//! writing the same artifacts as the command-line `pipeline` command.
//!
//! cargo run --example csv_pipeline -- [input.csv] [out_dir]
//!
//! Without arguments a simulated file is written to a temporary directory first.

use std::fs::{self, File};
use std::path::PathBuf;

use relsparse::output::{write_inference_csv, write_path_csv};
use relsparse::trajectories::write_dataset;
use relsparse::{gen_dataset, load_dataset, run_pipeline, scale_states, CsvSchema, PipelineConfig, SimConfig};

fn main() -> relsparse::Result<()> {
    let mut args = std::env::args().skip(1);
    let tmp = std::env::temp_dir().join("relsparse_csv_pipeline");
    let input = match args.next() {
        Some(p) => PathBuf::from(p),
        None => {
            fs::create_dir_all(&tmp).expect("temp dir");
            let p = tmp.join("trajectories.csv");
            let d = gen_dataset(&SimConfig::standard(800, 9))?;
            write_dataset(&d, File::create(&p).expect("create csv"))?;
            p
        }
    };
    let out = args.next().map_or_else(|| tmp.join("out"), PathBuf::from);

    let schema = CsvSchema::standard(2);
    let d = scale_states(&load_dataset(&input, &schema)?)?;
    let report = run_pipeline(&d, &PipelineConfig::default())?;

    fs::create_dir_all(out.join("diagrams")).expect("output dir");
    for cell in &report.cells {
        let f = File::create(out.join(format!("diagrams/{}_{}.csv", cell.gamma, cell.delta))).expect("diagram");
        write_path_csv(&cell.path, d.dim(), f)?;
    }
    write_inference_csv(&report.inference, &schema.states, File::create(out.join("inference.csv")).expect("csv"))?;
    println!("read {} trajectories from {}", d.n(), input.display());
    println!("wrote {}", out.display());
    print!("{}", fs::read_to_string(out.join("inference.csv")).expect("read back"));
    Ok(())
}
