//! End-to-end solve: assembly, prior, normal equations and backend.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::assembly::{build_system, fix_tiles, gram, MatchFilter, MatchSet, NormalSystem, Solution, SparseSystem};
use crate::error::{Error, Result};
use crate::model::{ModelKind, TileSpec, TransformParams};
use crate::regularize::{expand_for_system, LambdaSpec, PriorVector};
use crate::rigid_prior;
use crate::solvers::{self, SolveReport, SolverConfig};

/// Where the regularization target comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorSource {
    /// The rigid approximation estimated from the matches.
    Rigid,
    /// Given transforms, e.g. stage coordinates.
    Given(Solution),
    /// Identity transforms.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    pub kind: ModelKind,
    pub lambda: LambdaSpec,
    pub prior: PriorSource,
    pub solver: SolverConfig,
    pub filter: MatchFilter,
    /// Tiles held at the identity transform.
    pub fixed: Vec<String>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            kind: ModelKind::Affine,
            lambda: LambdaSpec::uniform(0.1),
            prior: PriorSource::Rigid,
            solver: SolverConfig::default(),
            filter: MatchFilter::default(),
            fixed: Vec::new(),
        }
    }
}

/// An assembled problem ready for one or more solves.
#[derive(Clone, Debug)]
pub struct Problem {
    pub system: SparseSystem,
    pub prior: PriorVector,
    pub assembly_seconds: f64,
}

/// Composes every affine transform with the inverse of `anchor`'s, so that
/// `anchor` becomes the identity.
fn rebase(prior: &Solution, anchor: &str) -> Result<Solution> {
    let a = prior
        .get(anchor)
        .ok_or_else(|| Error::UnknownTile(anchor.to_string()))?
        .convert_to(ModelKind::Affine);
    let [a1, a2, a3, a4] = a.linear_part();
    let det = a1 * a4 - a2 * a3;
    let inv = [a4 / det, -a2 / det, -a3 / det, a1 / det];
    let [ta1, ta2] = a.translation_part();
    Ok(prior
        .iter()
        .map(|(id, t)| {
            let t = t.convert_to(ModelKind::Affine);
            let [m1, m2, m3, m4] = t.linear_part();
            let [t1, t2] = t.translation_part();
            let m = [
                inv[0] * m1 + inv[1] * m3,
                inv[0] * m2 + inv[1] * m4,
                inv[2] * m1 + inv[3] * m3,
                inv[2] * m2 + inv[3] * m4,
            ];
            let (d1, d2) = (t1 - ta1, t2 - ta2);
            let tt = [inv[0] * d1 + inv[1] * d2, inv[2] * d1 + inv[3] * d2];
            (id.clone(), TransformParams::affine(m, tt))
        })
        .collect())
}

/// The prior transforms for every tile of `tiles` under `source`.
pub fn prior_transforms(tiles: &[TileSpec], matches: &[MatchSet], source: &PriorSource) -> Result<Solution> {
    match source {
        PriorSource::Rigid => Ok(rigid_prior::estimate(tiles, matches)?.transforms(ModelKind::Affine)),
        PriorSource::Given(s) => Ok(s.clone()),
        PriorSource::Identity => Ok(tiles
            .iter()
            .map(|t| (t.tile_id.clone(), TransformParams::identity(ModelKind::Affine)))
            .collect()),
    }
}

/// Builds the system, fixes tiles and packs the prior.
pub fn prepare(tiles: &[TileSpec], matches: &[MatchSet], opts: &SolveOptions) -> Result<Problem> {
    let started = Instant::now();
    let system = build_system(tiles, matches, opts.kind, opts.filter)?;
    let fixed: BTreeMap<String, TransformParams> = opts
        .fixed
        .iter()
        .map(|id| (id.clone(), TransformParams::identity(opts.kind)))
        .collect();
    let system = fix_tiles(&system, &fixed)?;
    let lambda_diag = expand_for_system(&opts.lambda, &system)?;

    let d = if lambda_diag.iter().all(|l| *l == 0.0) {
        vec![0.0; system.ncols()]
    } else {
        let mut prior = prior_transforms(tiles, matches, &opts.prior)?;
        if let Some(anchor) = opts.fixed.first() {
            prior = rebase(&prior, anchor)?;
        }
        rigid_prior::assemble_prior(&prior, &system, &opts.lambda)?.d
    };
    Ok(Problem {
        prior: PriorVector {
            b_diag: vec![1.0; d.len()],
            lambda_diag,
            d,
        },
        system,
        assembly_seconds: started.elapsed().as_secs_f64(),
    })
}

impl Problem {
    pub fn normal_equations(&self) -> Result<NormalSystem> {
        gram(&self.system).normal_equations(&self.prior.lambda_diag, &self.prior.b_diag, &self.prior.d)
    }

    /// Report for a solution vector computed outside this crate.
    pub fn report_for(&self, ns: &NormalSystem, x: Vec<f64>) -> Result<SolveReport> {
        if x.len() != ns.n() {
            return Err(Error::InvalidInput(format!(
                "solution has {} entries but the system has {} unknowns",
                x.len(),
                ns.n()
            )));
        }
        let mut rep = SolveReport {
            precision: solvers::precision(ns, &x),
            x,
            backend: solvers::Backend::External,
            status: solvers::SolveStatus::Converged,
            iterations: 0,
            solve_seconds: 0.0,
            assembly_seconds: self.assembly_seconds,
            nnz: ns.a_tilde.nnz(),
            mean_residual_px: 0.0,
            point_matches: 0,
            history: Vec::new(),
            energy: Vec::new(),
        };
        rep.attach(&self.system);
        Ok(rep)
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub problem: Problem,
    pub report: SolveReport,
    pub solution: Solution,
}

/// Assembles and solves the regularized problem.
pub fn solve_dataset(tiles: &[TileSpec], matches: &[MatchSet], opts: &SolveOptions) -> Result<SolveOutcome> {
    let problem = prepare(tiles, matches, opts)?;
    let started = Instant::now();
    let ns = problem.normal_equations()?;
    let normal_seconds = started.elapsed().as_secs_f64();
    let mut report = solvers::solve(&ns, &opts.solver)?;
    report.assembly_seconds = problem.assembly_seconds + normal_seconds;
    report.attach(&problem.system);
    let solution = problem.system.unpack(&report.x);
    Ok(SolveOutcome {
        problem,
        report,
        solution,
    })
}
