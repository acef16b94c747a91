//! Estimate the rigid approximation on its own and show how close each
//! tile's rotation is to the truth.
//!
//! cargo run --release --example rigid_prior

use tilereg::rigid_prior;
use tilereg::synth::{generate_dataset, Perturbation, SynthConfig};

fn main() -> tilereg::Result<()> {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 3,
        grid_cols: 3,
        perturbation: Perturbation {
            rotation_deg: 3.0,
            linear: 0.0,
            ..Perturbation::default()
        },
        seed: 3,
        ..SynthConfig::default()
    })?;
    let rigid = rigid_prior::estimate(&d.tiles, &d.matches)?;
    let anchor = d.tiles.iter().map(|t| t.tile_id.as_str()).min().unwrap();
    let truth_angle = |id: &str| {
        let c = &d.truth[id].coeffs;
        (c[3] - c[1]).atan2(c[0] + c[4])
    };
    let offset = truth_angle(anchor);
    println!("{:<16} {:>12} {:>12} {:>10}", "tile", "angle (deg)", "truth (deg)", "scale");
    for (id, t) in &rigid.tiles {
        println!(
            "{id:<16} {:>12.5} {:>12.5} {:>10.6}",
            t.angle().to_degrees(),
            (truth_angle(id) - offset).to_degrees(),
            t.scale_removed
        );
    }
    if !rigid.degenerate.is_empty() {
        println!("degenerate: {:?}", rigid.degenerate);
    }
    Ok(())
}
