//! Per-parameter regularization weights, tile deformation and λ sweeps.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{gram, Solution, SparseSystem};
use crate::error::{Error, Result};
use crate::model::{ModelKind, ParamClass, Point2, TileSpec};
use crate::solvers::{self, residual_stats, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frozen {
    Frozen,
}

/// A tile or section override: a weight, or `"frozen"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaValue {
    Value(f64),
    Frozen(Frozen),
}

impl LambdaValue {
    pub const FROZEN: LambdaValue = LambdaValue::Frozen(Frozen::Frozen);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaSpec {
    pub default: f64,
    pub per_class: BTreeMap<ParamClass, f64>,
    pub per_section: BTreeMap<i64, LambdaValue>,
    pub per_tile: BTreeMap<String, LambdaValue>,
    pub frozen_multiplier: f64,
}

impl Default for LambdaSpec {
    fn default() -> Self {
        Self {
            default: 0.0,
            per_class: BTreeMap::new(),
            per_section: BTreeMap::new(),
            per_tile: BTreeMap::new(),
            frozen_multiplier: 1e8,
        }
    }
}

impl LambdaSpec {
    pub fn uniform(lambda: f64) -> Self {
        Self {
            default: lambda,
            ..Self::default()
        }
    }

    /// Weight given to frozen tiles. With a zero default the multiplier
    /// itself is used so that freezing still constrains.
    pub fn frozen_value(&self) -> f64 {
        if self.default > 0.0 {
            self.default * self.frozen_multiplier
        } else {
            self.frozen_multiplier
        }
    }

    fn resolve(&self, v: LambdaValue) -> f64 {
        match v {
            LambdaValue::Value(v) => v,
            LambdaValue::Frozen(_) => self.frozen_value(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        let overrides = self.per_section.values().chain(self.per_tile.values());
        if !ok(self.default)
            || !ok(self.frozen_multiplier)
            || !self.per_class.values().all(|v| ok(*v))
            || !overrides.into_iter().all(|v| match v {
                LambdaValue::Value(v) => ok(*v),
                LambdaValue::Frozen(_) => true,
            })
        {
            return Err(Error::InvalidInput("lambda values must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Weight of every coefficient of one tile, in coefficient order.
    pub fn tile_weights(&self, tile: &TileSpec, kind: ModelKind) -> Vec<f64> {
        let whole = self
            .per_tile
            .get(&tile.tile_id)
            .or_else(|| self.per_section.get(&tile.z))
            .map(|v| self.resolve(*v));
        let classes: Vec<ParamClass> = kind.term_classes().collect();
        classes
            .iter()
            .chain(&classes)
            .map(|c| whole.unwrap_or_else(|| *self.per_class.get(c).unwrap_or(&self.default)))
            .collect()
    }
}

/// Expands `spec` to one weight per coefficient of `tiles` (in the given
/// order).
pub fn expand_lambda(spec: &LambdaSpec, tiles: &[TileSpec], kind: ModelKind) -> Result<Vec<f64>> {
    spec.validate()?;
    for id in spec.per_tile.keys() {
        if !tiles.iter().any(|t| &t.tile_id == id) {
            return Err(Error::UnknownTile(id.clone()));
        }
    }
    for z in spec.per_section.keys() {
        if !tiles.iter().any(|t| t.z == *z) {
            return Err(Error::UnknownSection(*z));
        }
    }
    Ok(tiles.iter().flat_map(|t| spec.tile_weights(t, kind)).collect())
}

/// Weights for the unknowns of `system` (free tiles only).
pub fn expand_for_system(spec: &LambdaSpec, system: &SparseSystem) -> Result<Vec<f64>> {
    let full = expand_lambda(spec, &system.tiles, system.kind)?;
    Ok(system.free_vector(&full))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationStats {
    /// Ratio per tile, in the order of the given tiles.
    pub per_tile: Vec<f64>,
    /// Mean over tiles with a finite ratio.
    pub mean: f64,
    /// Tiles whose transform produced a non-finite ratio.
    pub non_finite: Vec<String>,
}

fn shoelace(poly: &[Point2]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum();
    0.5 * twice.abs()
}

/// Transformed area of `tile` divided by its original area.
pub fn tile_deformation(tile: &TileSpec, t: &crate::model::TransformParams, samples_per_edge: usize) -> f64 {
    match t.kind {
        ModelKind::Translation => 1.0,
        ModelKind::Affine | ModelKind::RigidApprox => {
            let [m1, m2, m3, m4] = t.linear_part();
            (m1 * m4 - m2 * m3).abs()
        }
        ModelKind::Poly2 | ModelKind::Poly3 => {
            let k = samples_per_edge.max(1);
            let c = tile.corners();
            let boundary: Vec<Point2> = (0..4)
                .flat_map(|e| {
                    let (a, b) = (c[e], c[(e + 1) % 4]);
                    (0..k).map(move |i| {
                        let s = i as f64 / k as f64;
                        Point2::new(a.x + s * (b.x - a.x), a.y + s * (b.y - a.y))
                    })
                })
                .map(|p| t.apply(p))
                .collect();
            shoelace(&boundary) / tile.area()
        }
    }
}

pub fn deformation_ratio(tiles: &[TileSpec], solution: &Solution, samples_per_edge: usize) -> Result<DeformationStats> {
    let mut per_tile = Vec::with_capacity(tiles.len());
    let mut non_finite = Vec::new();
    for tile in tiles {
        let t = solution.get(&tile.tile_id).ok_or_else(|| Error::UnknownTile(tile.tile_id.clone()))?;
        let r = tile_deformation(tile, t, samples_per_edge);
        if !r.is_finite() {
            non_finite.push(tile.tile_id.clone());
        }
        per_tile.push(r);
    }
    let finite: Vec<f64> = per_tile.iter().copied().filter(|r| r.is_finite()).collect();
    let mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(DeformationStats {
        per_tile,
        mean,
        non_finite,
    })
}

/// Regularization target and weights for the unknowns of a system.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorVector {
    pub d: Vec<f64>,
    pub b_diag: Vec<f64>,
    pub lambda_diag: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_deformation_ratio: f64,
    pub mean_residual_px: f64,
    pub precision: f64,
    /// Set when the solve for this λ failed; the numeric fields are NaN.
    pub error: Option<String>,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

/// Solves the system once per λ, scaling `prior.lambda_diag` uniformly.
/// `AᵀDA` is computed once and shared by all solves.
pub fn sweep_lambda(
    system: &SparseSystem,
    prior: &PriorVector,
    lambdas: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidInput("sweep needs a nonempty list of positive lambdas".into()));
    }
    let g = gram(system);
    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(f64::total_cmp);
    let rows = lambdas
        .par_iter()
        .map(|&lambda| {
            let scaled: Vec<f64> = prior.lambda_diag.iter().map(|l| l * lambda).collect();
            let outcome = g
                .normal_equations(&scaled, &prior.b_diag, &prior.d)
                .and_then(|ns| solvers::solve(&ns, cfg))
                .and_then(|rep| {
                    let solution = system.unpack(&rep.x);
                    let def = deformation_ratio(&system.tiles, &solution, 8)?;
                    Ok((def.mean, residual_stats(system, &rep.x).global_mean, rep.precision))
                });
            match outcome {
                Ok((d, r, p)) => SweepRow {
                    lambda,
                    mean_deformation_ratio: d,
                    mean_residual_px: r,
                    precision: p,
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep solve at lambda {lambda} failed: {e}");
                    SweepRow {
                        lambda,
                        mean_deformation_ratio: f64::NAN,
                        mean_residual_px: f64::NAN,
                        precision: f64::NAN,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(rows)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        ryu::Buffer::new().format(v).to_string()
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "lambda,mean_deformation_ratio,mean_residual_px,precision")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(r.lambda),
            fmt_f64(r.mean_deformation_ratio),
            fmt_f64(r.mean_residual_px),
            fmt_f64(r.precision)
        )?;
    }
    Ok(())
}
