//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::assembly::{build_system, MatchFilter, Solution};
use crate::error::Error;
use crate::io;
use crate::model::ModelKind;
use crate::pipeline::{self, PriorSource, SolveOptions};
use crate::regularize::{deformation_ratio, log_space, sweep_lambda, write_sweep_csv, LambdaSpec};
use crate::rigid_prior;
use crate::solvers::{residual_stats, Backend, SolveStatus, SolverConfig};
use crate::synth::{generate_dataset, Perturbation, SynthConfig};

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "TILEREG_THREADS";

#[derive(Parser, Debug)]
#[command(name = "tilereg", version, about = "Joint registration of overlapping image tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve for per-tile transforms.
    Solve(SolveArgs),
    /// Estimate the rigid approximation only.
    Rigid(RigidArgs),
    /// Solve for a range of lambdas and write a CSV.
    Sweep(SweepArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Write the regularized normal equations as Matrix Market.
    ExportSystem(ExportArgs),
    /// Residual metrics of existing transforms against a dataset.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    tiles: PathBuf,
    #[arg(long)]
    matches: PathBuf,
    /// Drop tile pairs with fewer point matches.
    #[arg(long, default_value_t = 1)]
    min_matches: usize,
    /// Subsample tile pairs with more point matches.
    #[arg(long)]
    max_matches: Option<usize>,
}

impl DataArgs {
    fn filter(&self) -> MatchFilter {
        MatchFilter {
            min_matches: self.min_matches,
            max_matches: self.max_matches.unwrap_or(usize::MAX),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolveModel {
    Translation,
    Affine,
    Poly2,
    Poly3,
}

impl From<SolveModel> for ModelKind {
    fn from(m: SolveModel) -> Self {
        match m {
            SolveModel::Translation => ModelKind::Translation,
            SolveModel::Affine => ModelKind::Affine,
            SolveModel::Poly2 => ModelKind::Poly2,
            SolveModel::Poly3 => ModelKind::Poly3,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PriorArg {
    Rigid,
    File,
    Identity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Direct,
    Cg,
    Bicgstab,
    Gmres,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Direct => Backend::Direct,
            BackendArg::Cg => Backend::Cg,
            BackendArg::Bicgstab => Backend::BiCgStab,
            BackendArg::Gmres => Backend::Gmres,
        }
    }
}

#[derive(Args, Debug)]
struct ProblemArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "affine")]
    model: SolveModel,
    /// Uniform regularization weight.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// JSON lambda specification; replaces --lambda.
    #[arg(long)]
    lambda_spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "rigid")]
    prior: PriorArg,
    /// Transforms file used by `--prior file`.
    #[arg(long)]
    prior_file: Option<PathBuf>,
    /// Hold a tile at the identity transform (repeatable).
    #[arg(long = "fix")]
    fixed: Vec<String>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "direct")]
    backend: BackendArg,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, default_value_t = 50)]
    restart: usize,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            backend: self.backend.into(),
            tol: self.tol,
            max_iter: self.max_iter,
            restart: self.restart,
        }
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Output transforms; metrics go to `<stem>.metrics.json`.
    #[arg(long)]
    out: PathBuf,
    /// Score a solution vector computed elsewhere instead of solving.
    #[arg(long)]
    import_solution: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RigidArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// `lo..hi` (log spaced, see --steps) or a comma separated list.
    #[arg(long)]
    lambdas: String,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    rhs: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    transforms: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON synth configuration; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    sections: Option<usize>,
    #[arg(long)]
    tile_w: Option<f64>,
    #[arg(long)]
    tile_h: Option<f64>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    matches_per_pair: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    truth_model: Option<ModelKind>,
    #[arg(long)]
    rotation_deg: Option<f64>,
    #[arg(long)]
    linear: Option<f64>,
    #[arg(long)]
    translation_px: Option<f64>,
    #[arg(long)]
    nonlinear_px: Option<f64>,
    #[arg(long)]
    section_drift_px: Option<f64>,
    #[arg(long)]
    section_rotation_deg: Option<f64>,
    #[arg(long)]
    skip_section_pairs: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

impl SynthArgs {
    fn config(&self) -> Result<SynthConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Failure::Data(Error::Parse {
                path: p.clone(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }))?,
            None => SynthConfig::default(),
        };
        let p: &mut Perturbation = &mut c.perturbation;
        macro_rules! set {
            ($($field:expr => $value:expr),* $(,)?) => {
                $(if let Some(v) = $value { $field = v; })*
            };
        }
        set!(
            p.rotation_deg => self.rotation_deg,
            p.linear => self.linear,
            p.translation_px => self.translation_px,
            p.nonlinear_px => self.nonlinear_px,
            p.section_drift_px => self.section_drift_px,
            p.section_rotation_deg => self.section_rotation_deg,
        );
        set!(
            c.grid_rows => self.rows,
            c.grid_cols => self.cols,
            c.sections => self.sections,
            c.tile_w => self.tile_w,
            c.tile_h => self.tile_h,
            c.overlap_fraction => self.overlap,
            c.matches_per_pair => self.matches_per_pair,
            c.noise_sigma_px => self.noise,
            c.truth_model => self.truth_model,
            c.seed => self.seed,
        );
        c.skip_section_pairs |= self.skip_section_pairs;
        Ok(c)
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
    /// Outputs were written but the iterative solve did not converge.
    NotConverged(SolveStatus),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(e) if e.is_solver_failure() => 3,
            Failure::Data(_) => 2,
            Failure::NotConverged(_) => 3,
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

/// Parses `lo..hi` into `steps` log-spaced values, or a comma separated list.
pub fn parse_lambdas(text: &str, steps: usize) -> Result<Vec<f64>, String> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("bad lambda `{}`", s.trim()));
    let values = match text.split_once("..") {
        Some((lo, hi)) => {
            let (lo, hi) = (num(lo)?, num(hi)?);
            if !(lo > 0.0 && hi >= lo) {
                return Err(format!("lambda range `{text}` must satisfy 0 < lo <= hi"));
            }
            if steps == 0 {
                return Err("--steps must be at least 1".into());
            }
            log_space(lo, hi, steps)
        }
        None => text.split(',').map(num).collect::<Result<_, _>>()?,
    };
    if values.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err("lambdas must be positive".into());
    }
    Ok(values)
}

fn options(args: &ProblemArgs) -> Result<SolveOptions, Failure> {
    let lambda = match &args.lambda_spec {
        Some(p) => serde_json::from_str::<LambdaSpec>(&read(p)?).map_err(|e| {
            Failure::Data(Error::Parse {
                path: p.clone(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })
        })?,
        None => LambdaSpec::uniform(args.lambda),
    };
    lambda.validate()?;
    let prior = match (args.prior, &args.prior_file) {
        (PriorArg::File, Some(p)) => PriorSource::Given(io::load_transforms(p)?),
        (PriorArg::File, None) => return Err(Failure::Usage("--prior file needs --prior-file".into())),
        (PriorArg::Rigid, _) => PriorSource::Rigid,
        (PriorArg::Identity, _) => PriorSource::Identity,
    };
    let solver = args.solver.config();
    solver.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(SolveOptions {
        kind: args.model.into(),
        lambda,
        prior,
        solver,
        filter: args.data.filter(),
        fixed: args.fixed.clone(),
    })
}

fn load(data: &DataArgs) -> Result<io::Dataset, Failure> {
    Ok(io::load_dataset(&data.tiles, &data.matches, None)?)
}

fn cmd_solve(args: &SolveArgs) -> Result<(), Failure> {
    let opts = options(&args.problem)?;
    let data = load(&args.problem.data)?;
    let (solution, report) = match &args.import_solution {
        Some(path) => {
            let problem = pipeline::prepare(&data.tiles, &data.matches, &opts)?;
            let ns = problem.normal_equations()?;
            let report = problem.report_for(&ns, io::read_vector(path)?)?;
            (problem.system.unpack(&report.x), report)
        }
        None => {
            let out = pipeline::solve_dataset(&data.tiles, &data.matches, &opts)?;
            (out.solution, out.report)
        }
    };
    io::save_transforms(&args.out, &solution, &report)?;
    log::info!(
        "{} tiles, precision {:e}, mean residual {:.4} px",
        solution.len(),
        report.precision,
        report.mean_residual_px
    );
    match report.status {
        SolveStatus::Converged => Ok(()),
        s => Err(Failure::NotConverged(s)),
    }
}

fn cmd_rigid(args: &RigidArgs) -> Result<(), Failure> {
    let data = load(&args.data)?;
    let system = build_system(&data.tiles, &data.matches, ModelKind::Affine, args.data.filter())?;
    let rigid = rigid_prior::estimate(&system.tiles, &system.matches)?;
    if !rigid.degenerate.is_empty() {
        log::warn!("degenerate rigid blocks replaced by identity: {}", rigid.degenerate.join(", "));
    }
    io::write_transforms(&args.out, &rigid.transforms(ModelKind::Affine))?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let lambdas = parse_lambdas(&args.lambdas, args.steps).map_err(Failure::Usage)?;
    let mut opts = options(&args.problem)?;
    // The swept value multiplies the --lambda-spec weights; without them it is the uniform lambda.
    if args.problem.lambda_spec.is_none() {
        opts.lambda = LambdaSpec::uniform(1.0);
    }
    let data = load(&args.problem.data)?;
    let problem = pipeline::prepare(&data.tiles, &data.matches, &opts)?;
    let rows = sweep_lambda(&problem.system, &problem.prior, &lambdas, &opts.solver)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).expect("writing to memory");
    fs::write(&args.out, buf).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let cfg = args.config()?;
    let d = generate_dataset(&cfg)?;
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    io::save_tiles(&dir.join("tiles.json"), &d.tiles)?;
    io::save_matches(&dir.join("matches.json"), &d.matches)?;
    io::write_transforms(&dir.join("truth.json"), &d.truth)?;
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<(), Failure> {
    let opts = options(&args.problem)?;
    let data = load(&args.problem.data)?;
    let problem = pipeline::prepare(&data.tiles, &data.matches, &opts)?;
    let ns = problem.normal_equations()?;
    io::write_matrix_market(&args.matrix, &ns.a_tilde)?;
    io::write_vector(&args.rhs, &ns.b_tilde)?;
    Ok(())
}

/// Residual and deformation metrics of `solution`, as JSON.
fn report_json(data: &io::Dataset, filter: MatchFilter, solution: &Solution) -> Result<serde_json::Value, Failure> {
    let kind = solution
        .values()
        .map(|t| t.kind)
        .max()
        .ok_or_else(|| Failure::Data(Error::InvalidInput("transforms file is empty".into())))?;
    let system = build_system(&data.tiles, &data.matches, kind, filter)?;
    let x = system.pack(solution)?;
    let stats = residual_stats(&system, &x);
    let deformation = deformation_ratio(&system.tiles, solution, 8)?;
    let per_tile: serde_json::Map<String, serde_json::Value> = system
        .tiles
        .iter()
        .zip(&stats.per_tile)
        .map(|(t, r)| (t.tile_id.clone(), json!(r)))
        .collect();
    Ok(json!({
        "tiles": system.n_tiles(),
        "point_matches": system.point_match_count(),
        "mean_residual_px": stats.global_mean,
        "max_residual_px": stats.max,
        "mean_deformation_ratio": deformation.mean,
        "per_tile_residual_px": per_tile,
    }))
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let data = load(&args.data)?;
    let solution = io::load_transforms(&args.transforms)?;
    let mut value = report_json(&data, args.data.filter(), &solution)?;
    let sidecar = io::metrics_path(&args.transforms);
    if sidecar.exists() {
        value["solve"] = serde_json::to_value(io::load_metrics(&sidecar)?).expect("metrics serialize");
    }
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    Ok(())
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Rigid(a) => cmd_rigid(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ExportSystem(a) => cmd_export(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Data(e) => eprintln!("error: {e}"),
                Failure::NotConverged(s) => eprintln!("error: iterative solver stopped with status {s:?}"),
            }
            f.exit_code()
        }
    }
}

/// Sizes the global thread pool from `TILEREG_THREADS` when it is set.
pub fn configure_threads() {
    let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) else {
        return;
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::warn!("could not size the thread pool: {e}");
    }
}
