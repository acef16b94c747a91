//! Synthetic montages and volumes with known ground truth.
//!
//! Tiles sit on a grid with a given overlap. Each tile's true transform is its
//! nominal placement composed with a seeded random perturbation. Matches are
//! drawn uniformly in the true overlap of two tiles, mapped back to each
//! tile's local frame and jittered by Gaussian noise.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{MatchSet, Solution};
use crate::error::{Error, Result};
use crate::model::{ModelKind, Point2, TileSpec, TransformParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    /// Per-tile rotation about the tile center, uniform in `±rotation_deg`.
    pub rotation_deg: f64,
    /// Per-tile linear distortion: each entry of `I + L` gets `±linear`.
    pub linear: f64,
    /// Per-tile translation, uniform in `±translation_px` per axis.
    pub translation_px: f64,
    /// Peak displacement of each higher-order polynomial term at the far
    /// corner of the tile.
    pub nonlinear_px: f64,
    /// Per-section translation, uniform in `±section_drift_px`.
    pub section_drift_px: f64,
    /// Per-section rotation about the grid center.
    pub section_rotation_deg: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            rotation_deg: 0.5,
            linear: 0.01,
            translation_px: 5.0,
            nonlinear_px: 0.0,
            section_drift_px: 20.0,
            section_rotation_deg: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub sections: usize,
    pub tile_w: f64,
    pub tile_h: f64,
    pub overlap_fraction: f64,
    pub matches_per_pair: usize,
    pub noise_sigma_px: f64,
    pub truth_model: ModelKind,
    pub perturbation: Perturbation,
    /// Also match each tile with the same grid position two sections up.
    pub skip_section_pairs: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_rows: 4,
            grid_cols: 4,
            sections: 1,
            tile_w: 800.0,
            tile_h: 600.0,
            overlap_fraction: 0.1,
            matches_per_pair: 20,
            noise_sigma_px: 0.0,
            truth_model: ModelKind::Affine,
            perturbation: Perturbation::default(),
            skip_section_pairs: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synth config: {m}")));
        if self.grid_rows == 0 || self.grid_cols == 0 || self.sections == 0 {
            return bad("grid and section counts must be at least 1");
        }
        if !(self.tile_w > 0.0 && self.tile_h > 0.0) {
            return bad("tile size must be positive");
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction < 1.0) {
            return bad("overlap_fraction must lie in (0, 1)");
        }
        if self.matches_per_pair < 2 {
            return bad("matches_per_pair must be at least 2");
        }
        if !(self.noise_sigma_px >= 0.0 && self.noise_sigma_px.is_finite()) {
            return bad("noise_sigma_px must be finite and non-negative");
        }
        if self.truth_model == ModelKind::RigidApprox {
            return bad("rigid_approx has no translation and cannot be a truth model");
        }
        Ok(())
    }

    pub fn tile_id(&self, z: usize, r: usize, c: usize) -> String {
        format!("z{z:03}-r{r:03}-c{c:03}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub tiles: Vec<TileSpec>,
    pub matches: Vec<MatchSet>,
    /// True tile-to-world transforms.
    pub truth: Solution,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let h = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(h)))
}

fn sym(rng: &mut ChaCha8Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.random_range(-a..=a)
    } else {
        0.0
    }
}

fn rot(deg: f64) -> Matrix2<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix2::new(c, -s, s, c)
}

fn truth_transform(cfg: &SynthConfig, z: usize, r: usize, c: usize) -> TransformParams {
    let p = &cfg.perturbation;
    let (w, h) = (cfg.tile_w, cfg.tile_h);
    let step = Vector2::new(w * (1.0 - cfg.overlap_fraction), h * (1.0 - cfg.overlap_fraction));
    let origin = Vector2::new(c as f64 * step.x, r as f64 * step.y);

    let mut srng = stream(cfg.seed, &format!("section/{z}"));
    let drift = Vector2::new(sym(&mut srng, p.section_drift_px), sym(&mut srng, p.section_drift_px));
    let section_rot = rot(sym(&mut srng, p.section_rotation_deg));

    let mut trng = stream(cfg.seed, &format!("tile/{}", cfg.tile_id(z, r, c)));
    let theta = sym(&mut trng, p.rotation_deg);
    let lin = Matrix2::new(
        1.0 + sym(&mut trng, p.linear),
        sym(&mut trng, p.linear),
        sym(&mut trng, p.linear),
        1.0 + sym(&mut trng, p.linear),
    );
    let shift = Vector2::new(sym(&mut trng, p.translation_px), sym(&mut trng, p.translation_px));

    let grid_center = Vector2::new(
        (cfg.grid_cols as f64 - 1.0) * step.x + w,
        (cfg.grid_rows as f64 - 1.0) * step.y + h,
    ) * 0.5;
    let center = Vector2::new(w, h) * 0.5;

    if cfg.truth_model == ModelKind::Translation {
        let t = origin + shift + drift;
        return TransformParams::new(ModelKind::Translation, vec![t.x, t.y]).unwrap();
    }
    // tile: x ↦ origin + center + R·L·(x - center) + shift
    // section: y ↦ G + S·(y - G) + drift
    let a_tile = rot(theta) * lin;
    let t_tile = origin + center - a_tile * center + shift;
    let a = section_rot * a_tile;
    let t = grid_center + section_rot * (t_tile - grid_center) + drift;
    let affine = TransformParams::affine([a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]], [t.x, t.y]);
    let mut out = affine.convert_to(cfg.truth_model);
    let nb = cfg.truth_model.basis_len();
    if nb > 3 && p.nonlinear_px > 0.0 {
        // higher monomials in basis order: x², xy, y², x³, x²y, xy², y³
        let powers = [(2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)];
        for (k, &(i, j)) in powers.iter().take(nb - 3).enumerate() {
            let norm = w.powi(i) * h.powi(j);
            out.coeffs[3 + k] = sym(&mut trng, p.nonlinear_px) / norm;
            out.coeffs[nb + 3 + k] = sym(&mut trng, p.nonlinear_px) / norm;
        }
    }
    out
}

fn inside(tile: &TileSpec, p: Point2) -> bool {
    p.x >= 0.0 && p.x <= tile.width && p.y >= 0.0 && p.y <= tile.height
}

fn sample_pair(
    cfg: &SynthConfig,
    a: (&TileSpec, &TransformParams),
    b: (&TileSpec, &TransformParams),
) -> Result<MatchSet> {
    let bbox = |(tile, t): (&TileSpec, &TransformParams)| {
        let pts: Vec<Point2> = tile.corners().iter().map(|c| t.apply(*c)).collect();
        let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&Point2) -> f64| pts.iter().map(g).fold(init, f);
        (
            fold(f64::min, f64::INFINITY, |p| p.x),
            fold(f64::max, f64::NEG_INFINITY, |p| p.x),
            fold(f64::min, f64::INFINITY, |p| p.y),
            fold(f64::max, f64::NEG_INFINITY, |p| p.y),
        )
    };
    let (ax0, ax1, ay0, ay1) = bbox(a);
    let (bx0, bx1, by0, by1) = bbox(b);
    let (x0, x1, y0, y1) = (ax0.max(bx0), ax1.min(bx1), ay0.max(by0), ay1.min(by1));
    let empty = || Error::OverlapEmpty(a.0.tile_id.clone(), b.0.tile_id.clone());
    if !(x0 < x1 && y0 < y1) {
        return Err(empty());
    }

    let n = cfg.matches_per_pair;
    let mut rng = stream(cfg.seed, &format!("pair/{}/{}", a.0.tile_id, b.0.tile_id));
    let noise = Normal::new(0.0, cfg.noise_sigma_px).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let jitter = |rng: &mut ChaCha8Rng, p: Point2| {
        if cfg.noise_sigma_px > 0.0 {
            Point2::new(p.x + noise.sample(rng), p.y + noise.sample(rng))
        } else {
            p
        }
    };
    let (mut p, mut q) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _round in 0..10 {
        for _ in 0..50 * n {
            if p.len() == n {
                break;
            }
            let world = Point2::new(rng.random_range(x0..=x1), rng.random_range(y0..=y1));
            let (Some(lp), Some(lq)) = (a.1.inverse_apply(world), b.1.inverse_apply(world)) else {
                continue;
            };
            if inside(a.0, lp) && inside(b.0, lq) {
                p.push(jitter(&mut rng, lp));
                q.push(jitter(&mut rng, lq));
            }
        }
        if p.len() == n {
            return MatchSet::new(a.0.tile_id.clone(), b.0.tile_id.clone(), p, q, None);
        }
    }
    Err(empty())
}

fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (rows, cols) = (cfg.grid_rows, cfg.grid_cols);
    let index = |z: usize, r: usize, c: usize| (z * rows + r) * cols + c;
    let mut tiles = Vec::with_capacity(cfg.sections * rows * cols);
    let mut truth = Vec::with_capacity(tiles.capacity());
    for z in 0..cfg.sections {
        for r in 0..rows {
            for c in 0..cols {
                tiles.push(TileSpec::new(cfg.tile_id(z, r, c), z as i64, cfg.tile_w, cfg.tile_h)?);
                truth.push(truth_transform(cfg, z, r, c));
            }
        }
    }

    let mut pairs = Vec::new();
    for z in 0..cfg.sections {
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    pairs.push((index(z, r, c), index(z, r, c + 1)));
                }
                if r + 1 < rows {
                    pairs.push((index(z, r, c), index(z, r + 1, c)));
                }
            }
        }
        for dz in [1, 2] {
            if z + dz < cfg.sections && (dz == 1 || cfg.skip_section_pairs) {
                for r in 0..rows {
                    for c in 0..cols {
                        pairs.push((index(z, r, c), index(z + dz, r, c)));
                    }
                }
            }
        }
    }
    let matches = pairs
        .par_iter()
        .map(|&(i, j)| sample_pair(cfg, (&tiles[i], &truth[i]), (&tiles[j], &truth[j])))
        .collect::<Result<Vec<_>>>()?;
    let truth = tiles.iter().map(|t| t.tile_id.clone()).zip(truth).collect();
    Ok(SynthDataset { tiles, matches, truth })
}

/// A single-section montage.
pub fn generate_montage(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.sections != 1 {
        return Err(Error::InvalidInput("a montage has exactly one section".into()));
    }
    generate(cfg)
}

/// A multi-section volume with matches between the same grid position of
/// adjacent sections.
pub fn generate_volume(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.sections < 2 {
        return Err(Error::InvalidInput("a volume needs at least two sections".into()));
    }
    generate(cfg)
}

/// Montage or volume depending on `cfg.sections`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    generate(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaugeFit {
    /// Global affine transform taking solved world positions to true ones.
    pub g: TransformParams,
    pub rms: f64,
    pub max: f64,
}

/// Fits the global affine `g` minimizing the squared distance between
/// `g(solution(corner))` and `truth(corner)` over all tile corners.
pub fn gauge_align(tiles: &[TileSpec], solution: &Solution, truth: &Solution) -> Result<GaugeFit> {
    let mut src = Vec::with_capacity(4 * tiles.len());
    let mut dst = Vec::with_capacity(4 * tiles.len());
    for tile in tiles {
        let missing = || Error::UnknownTile(tile.tile_id.clone());
        let s = solution.get(&tile.tile_id).ok_or_else(missing)?;
        let t = truth.get(&tile.tile_id).ok_or_else(missing)?;
        for corner in tile.corners() {
            src.push(s.apply(corner));
            dst.push(t.apply(corner));
        }
    }
    if src.is_empty() {
        return Err(Error::InvalidInput("gauge alignment needs at least one tile".into()));
    }
    let n = src.len() as f64;
    let mean = |v: &[Point2]| {
        let (x, y) = v.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
        Vector2::new(x / n, y / n)
    };
    let (ms, md) = (mean(&src), mean(&dst));
    let mut ss = Matrix2::zeros();
    let mut ds = Matrix2::zeros();
    for (s, d) in src.iter().zip(&dst) {
        let s = Vector2::new(s.x, s.y) - ms;
        let d = Vector2::new(d.x, d.y) - md;
        ss += s * s.transpose();
        ds += d * s.transpose();
    }
    let a = ss.try_inverse().map(|inv| ds * inv).unwrap_or_else(Matrix2::identity);
    let t = md - a * ms;
    let g = TransformParams::affine([a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]], [t.x, t.y]);
    let errs: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| g.apply(*s).distance(d)).collect();
    let rms = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let max = errs.iter().cloned().fold(0.0, f64::max);
    Ok(GaugeFit { g, rms, max })
}

/// Truth transforms keyed by tile id.
pub type GroundTruth = BTreeMap<String, TransformParams>;
