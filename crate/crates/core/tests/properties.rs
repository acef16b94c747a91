use std::collections::BTreeMap;

use proptest::prelude::*;

use tilereg::assembly::{build_system, MatchFilter, MatchSet, Solution};
use tilereg::model::{ModelKind, Point2, TileSpec, TransformParams};
use tilereg::pipeline::{solve_dataset, SolveOptions};
use tilereg::regularize::LambdaSpec;
use tilereg::rigid_prior::{self, rescale_to_unit_area, solve_similarity};
use tilereg::solvers::{residual_stats, SolverConfig};
use tilereg::synth::{gauge_align, generate_dataset, Perturbation, SynthConfig};

fn rigid_truth(seed: u64, rows: usize, cols: usize) -> SynthConfig {
    SynthConfig {
        grid_rows: rows,
        grid_cols: cols,
        seed,
        perturbation: Perturbation {
            linear: 0.0,
            rotation_deg: 2.0,
            ..Perturbation::default()
        },
        ..SynthConfig::default()
    }
}

/// `s·R(θ)` as a linear block.
fn similarity(s: f64, theta: f64) -> [f64; 4] {
    let (c, si) = (theta.cos(), theta.sin());
    [s * c, -s * si, s * si, s * c]
}

#[test]
fn global_similarity_is_recovered_before_rescaling() {
    // Tiles share one scale and rotation relative to the anchor's frame:
    // local points of every tile map through the same block.
    let (s, theta) = (0.8, 0.3);
    let m = similarity(s, theta);
    let tiles: Vec<TileSpec> = (0..4).map(|i| TileSpec::new(format!("t{i}"), 0, 100.0, 100.0).unwrap()).collect();
    let world = |i: usize, p: Point2| {
        let off = [(0.0, 0.0), (90.0, 0.0), (0.0, 90.0), (90.0, 90.0)][i];
        Point2::new(p.x + off.0, p.y + off.1)
    };
    // Local coordinates of t1..t3 are the world scaled and rotated by `m`,
    // so their solved blocks must be its inverse.
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    let local = |i: usize, w: Point2| {
        if i == 0 {
            return w;
        }
        Point2::new(m[0] * w.x + m[1] * w.y, m[2] * w.x + m[3] * w.y)
    };
    let mut matches = Vec::new();
    for (a, b) in [(0, 1), (0, 2), (1, 3), (2, 3)] {
        let pts: Vec<Point2> = (0..6).map(|k| Point2::new(92.0 + k as f64, 10.0 + 15.0 * k as f64)).collect();
        let ws: Vec<Point2> = pts.iter().map(|p| world(a, *p)).collect();
        let p: Vec<Point2> = ws.iter().map(|w| local(a, *w)).collect();
        let q: Vec<Point2> = ws.iter().map(|w| local(b, *w)).collect();
        matches.push(MatchSet::new(format!("t{a}"), format!("t{b}"), p, q, None).unwrap());
    }
    let blocks = solve_similarity(&tiles, &matches).unwrap();
    for i in 1..4 {
        let got = blocks[&format!("t{i}")];
        for (g, w) in got.iter().zip(&inv) {
            assert!((g - w).abs() < 1e-8, "t{i}: {got:?} vs {inv:?}");
        }
    }
}

#[test]
fn shrinking_chain_rescales_to_unit_determinant() {
    let mut blocks = BTreeMap::new();
    for i in 0..20 {
        let s = 0.97f64.powi(i);
        blocks.insert(format!("t{i:02}"), similarity(s, 0.01 * i as f64));
    }
    let (rescaled, degenerate) = rescale_to_unit_area(&blocks);
    assert!(degenerate.is_empty());
    for (id, r) in &rescaled {
        let [a, b, c, d] = r.block;
        assert!(((a * d - b * c).abs() - 1.0).abs() <= 1e-9, "{id}");
    }
}

#[test]
fn rigid_translations_match_truth_after_gauge_alignment() {
    let d = generate_dataset(&rigid_truth(9, 4, 4)).unwrap();
    let rigid = rigid_prior::estimate(&d.tiles, &d.matches).unwrap();
    let fit = gauge_align(&d.tiles, &rigid.transforms(ModelKind::Affine), &d.truth).unwrap();
    assert!(fit.rms <= 1e-6, "rms {:e}", fit.rms);
}

#[test]
fn direct_precision_on_a_158_tile_montage() {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 2,
        grid_cols: 79,
        noise_sigma_px: 1.0,
        seed: 158,
        ..SynthConfig::default()
    })
    .unwrap();
    let out = solve_dataset(&d.tiles, &d.matches, &SolveOptions::default()).unwrap();
    assert_eq!(out.problem.system.n_tiles(), 158);
    assert!(out.report.precision <= 1e-10, "{:e}", out.report.precision);
}

#[test]
fn noisy_residual_matches_the_noise_oracle() {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 5,
        grid_cols: 5,
        noise_sigma_px: 0.5,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap();
    let out = solve_dataset(&d.tiles, &d.matches, &SolveOptions::default()).unwrap();
    // The same statistic evaluated at the true transforms measures the noise
    // alone.
    let system = &out.problem.system;
    let truth_x = system.pack(&d.truth).unwrap();
    let oracle = residual_stats(system, &truth_x).global_mean;
    let got = out.report.mean_residual_px;
    assert!((got - oracle).abs() <= 0.2 * oracle, "{got} vs {oracle}");
}

#[test]
fn smaller_lambda_never_fits_worse() {
    let d = generate_dataset(&SynthConfig {
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let res = |l: f64| {
        let opts = SolveOptions {
            lambda: LambdaSpec::uniform(l),
            ..SolveOptions::default()
        };
        solve_dataset(&d.tiles, &d.matches, &opts).unwrap().report.mean_residual_px
    };
    assert!(res(1e-10) <= res(1.0));
}

#[test]
fn noiseless_volume_is_recovered() {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 2,
        grid_cols: 2,
        sections: 3,
        seed: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let opts = SolveOptions {
        lambda: LambdaSpec::uniform(1e-10),
        ..SolveOptions::default()
    };
    let out = solve_dataset(&d.tiles, &d.matches, &opts).unwrap();
    let fit = gauge_align(&d.tiles, &out.solution, &d.truth).unwrap();
    assert!(fit.rms <= 1e-6, "rms {:e}", fit.rms);
}

#[test]
fn direct_beats_default_iterative_precision() {
    let d = generate_dataset(&SynthConfig {
        grid_rows: 6,
        grid_cols: 6,
        noise_sigma_px: 1.0,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let direct = solve_dataset(&d.tiles, &d.matches, &SolveOptions::default()).unwrap();
    for backend in tilereg::solvers::Backend::ALL.into_iter().skip(1) {
        let opts = SolveOptions {
            solver: SolverConfig::with_backend(backend),
            ..SolveOptions::default()
        };
        let it = solve_dataset(&d.tiles, &d.matches, &opts).unwrap();
        assert!(direct.report.precision <= it.report.precision, "{backend}");
    }
}

fn solution_gap(a: &Solution, b: &Solution) -> f64 {
    a.iter()
        .flat_map(|(id, t)| t.coeffs.iter().zip(&b[id].coeffs).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn row_count_and_pattern(seed in 0u64..500, kind_ix in 0usize..5, rows in 1usize..4, cols in 2usize..4) {
        let kind = ModelKind::ALL[kind_ix];
        let d = generate_dataset(&SynthConfig { grid_rows: rows, grid_cols: cols, seed, matches_per_pair: 7, ..SynthConfig::default() }).unwrap();
        let s = build_system(&d.tiles, &d.matches, kind, MatchFilter::default()).unwrap();
        let points: usize = d.matches.iter().map(MatchSet::len).sum();
        prop_assert_eq!(s.nrows(), 2 * points);
        prop_assert_eq!(s.nnz(), 2 * points * kind.coeffs_per_tile());
        prop_assert_eq!(s.ncols(), rows * cols * kind.coeffs_per_tile());
    }

    #[test]
    fn rescaled_blocks_have_unit_area(s in 0.05f64..20.0, theta in -3.1f64..3.1) {
        let mut blocks = BTreeMap::new();
        blocks.insert("a".to_string(), similarity(s, theta));
        let (r, _) = rescale_to_unit_area(&blocks);
        let [a, b, c, d] = r["a"].block;
        prop_assert!(((a * d - b * c) - 1.0).abs() <= 1e-9);
        prop_assert!((r["a"].scale_removed - s).abs() <= 1e-9 * s);
    }

    #[test]
    fn flipping_match_orientation_changes_nothing(seed in 0u64..500) {
        let d = generate_dataset(&SynthConfig { grid_rows: 2, grid_cols: 2, seed, noise_sigma_px: 0.5, ..SynthConfig::default() }).unwrap();
        let flipped: Vec<MatchSet> = d.matches.iter().map(MatchSet::reversed).collect();
        let a = solve_dataset(&d.tiles, &d.matches, &SolveOptions::default()).unwrap();
        let b = solve_dataset(&d.tiles, &flipped, &SolveOptions::default()).unwrap();
        prop_assert!(solution_gap(&a.solution, &b.solution) <= 1e-9);
    }

    #[test]
    fn frozen_tiles_stay_at_their_prior(seed in 0u64..500) {
        let d = generate_dataset(&SynthConfig { grid_rows: 2, grid_cols: 3, seed, noise_sigma_px: 1.0, ..SynthConfig::default() }).unwrap();
        let id = d.tiles[2].tile_id.clone();
        let mut lambda = LambdaSpec::uniform(0.1);
        lambda.per_tile.insert(id.clone(), tilereg::regularize::LambdaValue::FROZEN);
        let out = solve_dataset(&d.tiles, &d.matches, &SolveOptions { lambda, ..SolveOptions::default() }).unwrap();
        let prior = out.problem.system.unpack(&out.problem.prior.d);
        let gap: f64 = out.solution[&id].coeffs.iter().zip(&prior[&id].coeffs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let t: &TransformParams = &prior[&id];
        prop_assert!(gap <= 1e-3 * t.coeffs.iter().map(|c| c.abs()).fold(0.0, f64::max));
    }
}
