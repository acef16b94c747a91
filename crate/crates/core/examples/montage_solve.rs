//! Solve a noisy 6x6 affine montage and compare it with the ground truth.
//!
//! cargo run --release --example montage_solve

use tilereg::pipeline::{solve_dataset, SolveOptions};
use tilereg::synth::{gauge_align, generate_dataset, SynthConfig};

fn main() -> tilereg::Result<()> {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 6,
        grid_cols: 6,
        noise_sigma_px: 0.5,
        seed: 1,
        ..SynthConfig::default()
    })?;
    let out = solve_dataset(&d.tiles, &d.matches, &SolveOptions::default())?;
    let fit = gauge_align(&d.tiles, &out.solution, &d.truth)?;
    let r = &out.report;
    println!("tiles            {}", d.tiles.len());
    println!("point matches    {}", r.point_matches);
    println!("nnz(A~)          {}", r.nnz);
    println!("mean residual    {:.4} px", r.mean_residual_px);
    println!("precision        {:.2e}", r.precision);
    println!("corner rms/truth {:.4} px", fit.rms);
    Ok(())
}
