//! Show the shrinking strip that an unregularized affine solve produces, and
//! how the rigid prior removes it.
//!
//! cargo run --release --example scale_collapse

use tilereg::pipeline::{solve_dataset, SolveOptions};
use tilereg::regularize::{deformation_ratio, LambdaSpec};
use tilereg::synth::{generate_dataset, Perturbation, SynthConfig};

fn main() -> tilereg::Result<()> {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 1,
        grid_cols: 30,
        matches_per_pair: 100,
        noise_sigma_px: 3.0,
        perturbation: Perturbation {
            linear: 0.0,
            ..Perturbation::default()
        },
        seed: 5,
        ..SynthConfig::default()
    })?;
    let ratios = |lambda: f64, fixed: Vec<String>| -> tilereg::Result<Vec<f64>> {
        let opts = SolveOptions {
            lambda: LambdaSpec::uniform(lambda),
            fixed,
            ..SolveOptions::default()
        };
        let out = solve_dataset(&d.tiles, &d.matches, &opts)?;
        Ok(deformation_ratio(&d.tiles, &out.solution, 8)?.per_tile)
    };
    let free = ratios(0.0, vec![d.tiles[0].tile_id.clone()])?;
    let cured = ratios(1e6, Vec::new())?;
    println!("{:>5} {:>14} {:>14}", "tile", "lambda=0", "lambda=1e6");
    for (i, (a, b)) in free.iter().zip(&cured).enumerate().step_by(3) {
        println!("{i:>5} {a:>14.6} {b:>14.6}");
    }
    Ok(())
}
