//! Sweep the regularization weight over twelve decades and print the
//! deformation/residual trade-off as CSV.
//!
//! cargo run --release --example lambda_sweep

use tilereg::pipeline::{prepare, SolveOptions};
use tilereg::regularize::{log_space, sweep_lambda, write_sweep_csv, LambdaSpec};
use tilereg::solvers::SolverConfig;
use tilereg::synth::{generate_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 5,
        grid_cols: 5,
        noise_sigma_px: 1.0,
        seed: 6,
        ..SynthConfig::default()
    })?;
    let problem = prepare(
        &d.tiles,
        &d.matches,
        &SolveOptions {
            lambda: LambdaSpec::uniform(1.0),
            ..SolveOptions::default()
        },
    )?;
    let rows = sweep_lambda(&problem.system, &problem.prior, &log_space(1e-4, 1e8, 13), &SolverConfig::default())?;
    write_sweep_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}
