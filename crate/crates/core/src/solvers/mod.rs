//! Backends for the normal equations and the quality metrics of a solve.

pub mod direct;
pub mod iterative;
pub mod ordering;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::assembly::{NormalSystem, SparseSystem};
use crate::error::{Error, Result};
use crate::sparse::norm2;

pub use direct::CholeskyFactor;
pub use iterative::SolveStatus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Direct,
    Cg,
    BiCgStab,
    Gmres,
    /// A solution imported from an external solver.
    External,
}

impl Backend {
    pub const ALL: [Backend; 4] = [Backend::Direct, Backend::Cg, Backend::BiCgStab, Backend::Gmres];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Direct => "direct",
            Backend::Cg => "cg",
            Backend::BiCgStab => "bicgstab",
            Backend::Gmres => "gmres",
            Backend::External => "external",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backend::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown backend `{s}` (direct, cg, bicgstab, gmres)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub backend: Backend,
    /// Relative residual target of the iterative backends.
    pub tol: f64,
    /// Iteration cap; `None` means `10·n`.
    pub max_iter: Option<usize>,
    /// GMRES restart length.
    pub restart: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Direct,
            tol: 1e-10,
            max_iter: None,
            restart: 50,
        }
    }
}

impl SolverConfig {
    pub fn with_backend(backend: Backend) -> Self {
        Self {
            backend,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("solver tolerance must be positive".into()));
        }
        if self.max_iter == Some(0) || self.restart == 0 {
            return Err(Error::InvalidInput("max_iter and restart must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub x: Vec<f64>,
    pub backend: Backend,
    pub status: SolveStatus,
    pub precision: f64,
    /// Zero for the direct backend.
    pub iterations: usize,
    pub solve_seconds: f64,
    pub assembly_seconds: f64,
    /// Stored entries of the solved matrix `Ã`.
    pub nnz: usize,
    pub mean_residual_px: f64,
    pub point_matches: usize,
    /// Relative residual per iteration.
    #[serde(skip)]
    pub history: Vec<f64>,
    /// CG energy per iteration.
    #[serde(skip)]
    pub energy: Vec<f64>,
}

impl SolveReport {
    /// Fills the point-match fields from the system the solve belongs to.
    pub fn attach(&mut self, system: &SparseSystem) {
        self.mean_residual_px = residual_stats(system, &self.x).global_mean;
        self.point_matches = system.point_match_count();
    }

    /// The report without timing fields, for reproducibility checks.
    pub fn without_timings(&self) -> SolveReport {
        SolveReport {
            solve_seconds: 0.0,
            assembly_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// `‖Ã·x - b̃‖ / ‖b̃‖`, or the absolute norm when `b̃ = 0`.
pub fn precision(ns: &NormalSystem, x: &[f64]) -> f64 {
    let mut r = ns.a_tilde.matvec(x);
    r.iter_mut().zip(&ns.b_tilde).for_each(|(ri, bi)| *ri -= bi);
    let bn = norm2(&ns.b_tilde);
    let rn = norm2(&r);
    if bn == 0.0 {
        rn
    } else {
        rn / bn
    }
}

fn report(ns: &NormalSystem, backend: Backend, x: Vec<f64>, started: Instant) -> SolveReport {
    SolveReport {
        precision: precision(ns, &x),
        x,
        backend,
        status: SolveStatus::Converged,
        iterations: 0,
        solve_seconds: started.elapsed().as_secs_f64(),
        assembly_seconds: 0.0,
        nnz: ns.a_tilde.nnz(),
        mean_residual_px: 0.0,
        point_matches: 0,
        history: Vec::new(),
        energy: Vec::new(),
    }
}

pub fn solve_direct(ns: &NormalSystem) -> Result<SolveReport> {
    let started = Instant::now();
    let x = direct::solve_direct_vec(ns)?;
    Ok(report(ns, Backend::Direct, x, started))
}

pub fn solve_iterative(ns: &NormalSystem, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let started = Instant::now();
    let (a, b) = (&ns.a_tilde, &ns.b_tilde);
    let max_iter = cfg.max_iter.unwrap_or(10 * ns.n()).max(1);
    let out = match cfg.backend {
        Backend::Cg => iterative::cg(a, b, cfg.tol, max_iter),
        Backend::BiCgStab => iterative::bicgstab(a, b, cfg.tol, max_iter),
        Backend::Gmres => iterative::gmres(a, b, cfg.tol, max_iter, cfg.restart),
        Backend::Direct => return solve_direct(ns),
        Backend::External => return Err(Error::InvalidInput("the external backend cannot solve in-process".into())),
    };
    if out.status != SolveStatus::Converged {
        log::warn!(
            "{} stopped after {} iterations: {:?}",
            cfg.backend,
            out.iterations,
            out.status
        );
    }
    let mut rep = report(ns, cfg.backend, out.x, started);
    rep.status = out.status;
    rep.iterations = out.iterations;
    rep.history = out.residuals;
    rep.energy = out.energy;
    Ok(rep)
}

/// Solves with the configured backend.
pub fn solve(ns: &NormalSystem, cfg: &SolverConfig) -> Result<SolveReport> {
    match cfg.backend {
        Backend::Direct => solve_direct(ns),
        _ => solve_iterative(ns, cfg),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    /// Mean point-match residual of each tile in `SparseSystem::tiles` order;
    /// `NaN` for tiles without matches.
    pub per_tile: Vec<f64>,
    /// Mean of the per-tile values.
    pub global_mean: f64,
    pub max: f64,
}

/// Point-match residuals `‖T_p(p) - T_q(q)‖` under the solution `x`.
pub fn residual_stats(system: &SparseSystem, x: &[f64]) -> ResidualStats {
    let solution = system.unpack(x);
    let transforms: Vec<_> = system.tiles.iter().map(|t| &solution[&t.tile_id]).collect();
    let n = system.n_tiles();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    let mut max: f64 = 0.0;
    for (pair, m) in system.pairs.iter().zip(&system.matches) {
        let (tp, tq) = (transforms[pair.p], transforms[pair.q]);
        for (p, q) in m.p.iter().zip(&m.q) {
            let r = tp.apply(*p).distance(&tq.apply(*q));
            sum[pair.p] += r;
            sum[pair.q] += r;
            count[pair.p] += 1;
            count[pair.q] += 1;
            max = max.max(r);
        }
    }
    let per_tile: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    let valid: Vec<f64> = per_tile.iter().copied().filter(|v| !v.is_nan()).collect();
    let global_mean = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    ResidualStats {
        per_tile,
        global_mean,
        max,
    }
}
