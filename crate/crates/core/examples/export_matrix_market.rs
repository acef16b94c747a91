//! Write the regularized normal equations for an external solver, read a
//! solution back and score it.
//!
//! cargo run --release --example export_matrix_market

use tilereg::io;
use tilereg::pipeline::{prepare, SolveOptions};
use tilereg::solvers;
use tilereg::synth::{generate_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = generate_dataset(&SynthConfig {
        noise_sigma_px: 0.5,
        seed: 2,
        ..SynthConfig::default()
    })?;
    let problem = prepare(&d.tiles, &d.matches, &SolveOptions::default())?;
    let ns = problem.normal_equations()?;

    let dir = std::env::temp_dir().join("tilereg-export");
    std::fs::create_dir_all(&dir)?;
    let (mtx, rhs, sol) = (dir.join("A.mtx"), dir.join("b.txt"), dir.join("x.txt"));
    io::write_matrix_market(&mtx, &ns.a_tilde)?;
    io::write_vector(&rhs, &ns.b_tilde)?;
    println!("wrote {} and {}", mtx.display(), rhs.display());

    // Stand-in for the external solver: re-read the files and factor them.
    let a = io::read_matrix_market(&mtx)?;
    let b = io::read_vector(&rhs)?;
    let reread = tilereg::assembly::NormalSystem {
        a_tilde: a,
        b_tilde: b,
        block_size: ns.block_size,
    };
    io::write_vector(&sol, &solvers::solve_direct(&reread)?.x)?;

    let x = io::read_vector(&sol)?;
    let report = problem.report_for(&ns, x)?;
    println!("imported solution: precision {:.2e}, mean residual {:.4} px", report.precision, report.mean_residual_px);
    Ok(())
}
