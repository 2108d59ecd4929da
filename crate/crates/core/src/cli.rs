//! Command-line front end. `main` forwards to [`run`], which returns the
//! process exit code.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::basis::BasisSpec;
use crate::control::{estimate_control, passthrough_control, ControlEstimate};
use crate::dataset::Dataset;
use crate::diagnostics::{self, Tolerances};
use crate::error::{Error, Result};
use crate::montecarlo::{self, McConfig, Study};
use crate::sieve;
use crate::simulate::{simulate_seeded, DgpConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IDENTIFICATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hetcoef", version, about = "Control-function estimation with heterogeneous coefficients")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "HETCOEF_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a sample from a DGP config; writes CSV plus a `.truth.json` sidecar.
    Simulate(SimulateArgs),
    /// Estimate the control variable from a discrete instrument column `z`.
    Control(ControlArgs),
    /// Fit the sieve control regression and report ASF / ATE.
    Estimate(EstimateArgs),
    /// Check the identification conditions bin by bin.
    Diagnose(DiagnoseArgs),
    /// Run a Monte Carlo study.
    Mc(McArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControlFlag {
    /// Use the `v` column as given.
    Column,
    /// Estimate `V` from `z`.
    DiscreteZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyFlag {
    Run,
    Approximation,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output CSV with the `v` column set to the estimate.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Outcome basis, e.g. `power:2`, `bspline:6`, `treatment_dummies:2`.
    #[arg(long = "p", value_parser = parse_basis)]
    pub p: BasisSpec,
    /// Control sieve, e.g. `power:3`, `indicator:8`, `bspline:6`.
    #[arg(long = "psi", value_parser = parse_basis)]
    pub psi: BasisSpec,
    #[arg(long, default_value_t = 0.0, value_parser = parse_ridge, allow_hyphen_values = true)]
    pub ridge: f64,
    /// Defaults to `column` when the input has a `v` column.
    #[arg(long, value_enum)]
    pub control: Option<ControlFlag>,
    /// Treatment levels for the ASF, comma separated (scalar x only).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub asf_x: Vec<f64>,
    /// Fit JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot-ready CSV of the ASF on `--asf-x`.
    #[arg(long)]
    pub asf_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "p", value_parser = parse_basis)]
    pub p: BasisSpec,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
    #[arg(long, value_enum)]
    pub control: Option<ControlFlag>,
    #[arg(long, default_value_t = 1e-6)]
    pub eps_id: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub eps_p: f64,
    #[arg(long, default_value_t = 30)]
    pub min_bin_count: usize,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-bin eigenvalue profile CSV.
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// One CSV row per (n, K, target) cell.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON summary; stdout when omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Overrides `study` in the config.
    #[arg(long, value_enum)]
    pub study: Option<StudyFlag>,
}

fn parse_basis(s: &str) -> std::result::Result<BasisSpec, String> {
    let spec: BasisSpec = s.parse().map_err(|e: Error| e.to_string())?;
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn parse_ridge(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if r.is_finite() && r >= 0.0 {
        Ok(r)
    } else {
        Err(format!("ridge must be a finite number >= 0, got {s}"))
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.threads {
        Some(0) => {
            eprintln!("error: --threads must be positive");
            return EXIT_USAGE;
        }
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command)),
            Err(e) => {
                eprintln!("error: cannot start thread pool: {e}");
                return EXIT_FAILURE;
            }
        },
        None => dispatch(&cli.command),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::IdentificationFailure { .. } => EXIT_IDENTIFICATION,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Control(a) => cmd_control(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Mc(a) => cmd_mc(a),
    }
}

/// Writes through a temp file in the target directory and renames it into
/// place, so failed runs leave no partial output.
fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        }),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            serde_json::to_writer_pretty(&mut lock, value)?;
            writeln!(lock)?;
            Ok(())
        }
    }
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_csv(BufReader::new(File::open(path)?))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// `data.csv` -> `data.truth.json`.
pub fn truth_sidecar_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    out.with_file_name(format!("{stem}.truth.json"))
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let config: DgpConfig = read_json(&a.config)?;
    let seed = a.seed.unwrap_or(config.seed);
    let n = a.n as usize;
    let sim = simulate_seeded(&config, n, seed)?;
    let sidecar = json!({
        "schema_version": 1,
        "n": n,
        "seed": seed,
        "truth": sim.truth,
        "config": config,
    });
    write_atomic(&a.out, |w| sim.data.write_csv(w))?;
    write_json(Some(&truth_sidecar_path(&a.out)), &sidecar)?;
    eprintln!("wrote {n} rows to {}", a.out.display());
    Ok(())
}

fn resolve_control(data: &Dataset, flag: Option<ControlFlag>) -> Result<ControlEstimate> {
    let flag = flag.unwrap_or(if data.v().is_some() {
        ControlFlag::Column
    } else {
        ControlFlag::DiscreteZ
    });
    match flag {
        ControlFlag::Column => passthrough_control(data),
        ControlFlag::DiscreteZ => estimate_control(data),
    }
}

fn cmd_control(a: &ControlArgs) -> Result<()> {
    let data = read_dataset(&a.input)?;
    let control = estimate_control(&data)?;
    for (code, count) in &control.cell_counts {
        eprintln!("z = {code}: {count} rows");
    }
    let out = data.with_v(control.v_hat)?;
    write_atomic(&a.out, |w| out.write_csv(w))
}

#[derive(Debug, Serialize)]
struct AsfPoint {
    x: f64,
    asf: f64,
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let data = read_dataset(&a.input)?;
    let control = resolve_control(&data, a.control)?;
    let fit = match sieve::fit(&data, &control, &a.p, &a.psi, a.ridge) {
        Ok(fit) => fit,
        Err(e @ Error::IdentificationFailure { .. }) => {
            eprintln!(
                "the conditional second moment of p(X) given V is singular; \
                 q(V) and the average structural function are not identified with {} and ridge 0",
                a.p
            );
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    if fit.gram_min_eigenvalue < fit.singularity_threshold() {
        eprintln!(
            "warning: Gram minimum eigenvalue {:.3e} below {:.3e}; estimates rely on the ridge penalty",
            fit.gram_min_eigenvalue,
            fit.singularity_threshold()
        );
    }
    let mean_q = sieve::mean_q(&fit, &control)?;
    let mut asf = Vec::new();
    if !a.asf_x.is_empty() {
        if data.x_cols() != 1 {
            return Err(Error::InvalidConfig("--asf-x needs a scalar x".into()));
        }
        for &x in &a.asf_x {
            asf.push(AsfPoint {
                x,
                asf: sieve::asf(&fit, &control, &[x])?,
            });
        }
    }
    let ate = sieve::ate(&fit, &control).ok();
    let avg_derivative = if data.x_cols() == 1 {
        sieve::average_derivative(&fit, &data, &control).ok()
    } else {
        None
    };
    let report = json!({
        "schema_version": 1,
        "control_source": control.source,
        "cell_counts": control.cell_counts,
        "fit": fit,
        "mean_q": mean_q,
        "asf": asf,
        "ate": ate,
        "average_derivative": avg_derivative,
    });
    if let Some(path) = &a.asf_csv {
        write_atomic(path, |w| {
            let mut wtr = csv::Writer::from_writer(w);
            for point in &asf {
                wtr.serialize(point)?;
            }
            wtr.flush()?;
            Ok(())
        })?;
    }
    write_json(a.out.as_deref(), &report)
}

fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let data = read_dataset(&a.input)?;
    let control = resolve_control(&data, a.control)?;
    let tol = Tolerances {
        eps_id: a.eps_id,
        eps_p: a.eps_p,
        min_bin_count: a.min_bin_count,
        ..Tolerances::default()
    };
    let report = diagnostics::diagnose(&data, &control, &a.p, a.bins as usize, &tol)?;
    for (name, verdict) in &report.overall_verdicts {
        eprintln!("{name}: {:?} ({})", verdict.status, verdict.detail);
    }
    if let Some(path) = &a.profile {
        write_atomic(path, |w| report.write_profile_csv(w))?;
    }
    write_json(a.out.as_deref(), &report)
}

fn cmd_mc(a: &McArgs) -> Result<()> {
    let mut config: McConfig = read_json(&a.config)?;
    if let Some(study) = a.study {
        config.study = match study {
            StudyFlag::Run => Study::Run,
            StudyFlag::Approximation => Study::Approximation,
        };
    }
    let report = montecarlo::run_study(&config)?;
    write_atomic(&a.out, |w| report.write_csv(w))?;
    write_json(a.summary.as_deref(), &report)
}
