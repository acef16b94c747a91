//! Run every backend on the same normal equations.
//!
//! cargo run --release --example backend_compare

use tilereg::pipeline::{prepare, SolveOptions};
use tilereg::solvers::{self, Backend, SolverConfig};
use tilereg::synth::{generate_dataset, SynthConfig};

fn main() -> tilereg::Result<()> {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 10,
        grid_cols: 10,
        noise_sigma_px: 1.0,
        seed: 4,
        ..SynthConfig::default()
    })?;
    let problem = prepare(&d.tiles, &d.matches, &SolveOptions::default())?;
    let ns = problem.normal_equations()?;
    println!("n = {}, nnz(A~) = {}", ns.n(), ns.a_tilde.nnz());
    println!("{:<10} {:>10} {:>12} {:>10} {:>10}", "backend", "status", "precision", "iters", "seconds");
    for backend in Backend::ALL {
        let r = solvers::solve(&ns, &SolverConfig::with_backend(backend))?;
        println!(
            "{:<10} {:>10} {:>12.2e} {:>10} {:>10.4}",
            backend.name(),
            format!("{:?}", r.status),
            r.precision,
            r.iterations,
            r.solve_seconds
        );
    }
    Ok(())
}
