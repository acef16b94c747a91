//! Solve a small serial-section volume with one section frozen at its prior.
//!
//! cargo run --release --example volume_freeze

use std::collections::BTreeMap;

use tilereg::pipeline::{solve_dataset, SolveOptions};
use tilereg::regularize::{LambdaSpec, LambdaValue};
use tilereg::synth::{generate_dataset, SynthConfig};

fn main() -> tilereg::Result<()> {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 3,
        grid_cols: 3,
        sections: 5,
        noise_sigma_px: 0.5,
        seed: 7,
        ..SynthConfig::default()
    })?;
    let mut lambda = LambdaSpec::uniform(0.1);
    lambda.per_section.insert(2, LambdaValue::FROZEN);
    let out = solve_dataset(&d.tiles, &d.matches, &SolveOptions { lambda, ..SolveOptions::default() })?;

    let prior = out.problem.system.unpack(&out.problem.prior.d);
    let mut worst: BTreeMap<i64, f64> = BTreeMap::new();
    for t in &d.tiles {
        let (x, p) = (&out.solution[&t.tile_id].coeffs, &prior[&t.tile_id].coeffs);
        let dev = x.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let e = worst.entry(t.z).or_insert(0.0);
        *e = e.max(dev);
    }
    println!("mean residual {:.4} px over {} point matches", out.report.mean_residual_px, out.report.point_matches);
    println!("section  max coefficient change from prior");
    for (z, dev) in worst {
        println!("{z:>7}  {dev:.3e}{}", if z == 2 { "  (frozen)" } else { "" });
    }
    Ok(())
}
