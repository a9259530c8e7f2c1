//! `dfpt`: batch front-end for ground-state preparation, response solves,
//! gap-sweep benchmarks and adaptive extra-band selection.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dfpt_core::adaptive::{adapt_bands, conditioning_report};
use dfpt_core::bench::run_gap_sweep;
use dfpt_core::gauges::GaugeKind;
use dfpt_core::groundstate::prepare_groundstate;
use dfpt_core::io::{
    load_groundstate, read_perturbation, save_groundstate, write_json, write_trace, ResponseFile, RunConfig,
};
use dfpt_core::report::write_csv;
use dfpt_core::response::{apply_chi0, solve_dyson};
use dfpt_core::sternheimer::Method;
use dfpt_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_PREPARE: u8 = 2;
const EXIT_RESPOND: u8 = 3;
const EXIT_BUDGET: u8 = 4;

#[derive(Parser)]
#[command(name = "dfpt", version, about = "Finite-temperature density response on a 1D plane-wave model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct SolverFlags {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    gauge: Option<GaugeKind>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    precond_shift: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Eigensolve the configured model and write `groundstate.json`.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Apply χ0 (or solve the Dyson equation) and write `response.json` and `reports.csv`.
    Respond {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solver: SolverFlags,
        /// Ground-state file; defaults to `<out>/groundstate.json`.
        #[arg(long)]
        groundstate: Option<PathBuf>,
        /// Perturbation file; defaults to the `perturbation` key of the config.
        #[arg(long)]
        perturbation: Option<PathBuf>,
        /// Solve `δρ = χ0(δV + Kδρ)` with the Hartree kernel instead of applying χ0 once.
        #[arg(long)]
        dyson: bool,
    },
    /// Gap sweep on the engineered small-gap model; writes `bench.csv` and `bench.json`.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solver: SolverFlags,
        /// Comma-separated gaps, overriding the config.
        #[arg(long, value_delimiter = ',')]
        gaps: Option<Vec<f64>>,
        /// Comma-separated methods, overriding the config.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// Add extra bands until ξ ≤ target; writes the updated ground state and `trace.csv`.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        groundstate: Option<PathBuf>,
        #[arg(long)]
        xi_target: Option<f64>,
        #[arg(long)]
        max_added: Option<usize>,
        #[arg(long)]
        channel: Option<usize>,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn new(code: u8, err: impl Into<anyhow::Error>) -> Self {
        Self { code, err: err.into() }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(EXIT_CONFIG, e)
}

/// Input errors map to 1 whatever the command; everything else to `solver_code`.
fn classify(e: Error, solver_code: u8) -> Failure {
    let code = match e {
        Error::InvalidArgument(_) | Error::Parse { .. } | Error::Format(_) | Error::Io(_) | Error::Json(_) => EXIT_CONFIG,
        _ => solver_code,
    };
    Failure::new(code, e)
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::from_file(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))
        .map_err(config_err)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))
        .map_err(config_err)?;
    Ok(cfg)
}

fn apply_solver_flags(cfg: &mut RunConfig, f: &SolverFlags) {
    if let Some(m) = f.method {
        cfg.method = m;
    }
    if let Some(g) = f.gauge {
        cfg.gauge = g;
    }
    if let Some(t) = f.tol {
        cfg.tol = t;
    }
    if let Some(m) = f.max_iter {
        cfg.max_iter = m;
    }
    if let Some(s) = f.precond_shift {
        cfg.precond_shift = s;
    }
}

fn write_file(path: &Path, bytes: Vec<u8>) -> Result<(), Failure> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(config_err)
}

fn csv_bytes(rows: &[dfpt_core::report::SolverReport]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("in-memory CSV");
    buf
}

fn prepare(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let channels = cfg.channels().map_err(config_err)?;
    let smearing = cfg.smearing_scheme().map_err(config_err)?;
    let n_el = cfg
        .n_el
        .ok_or_else(|| config_err(anyhow::anyhow!("config needs n_el")))?;
    let gs = prepare_groundstate(channels, smearing, n_el, &cfg.groundstate_options())
        .map_err(|e| classify(e, EXIT_PREPARE))?;
    let path = common.out.join("groundstate.json");
    save_groundstate(&gs, &path).map_err(config_err)?;

    println!("fermi_level = {:.12e}", gs.fermi_level);
    for (k, ch) in gs.channels.iter().enumerate() {
        let s = &ch.slice;
        let worst = s.res_norms.iter().zip(&s.converged).filter(|(_, &c)| c).fold(0.0f64, |a, (&r, _)| a.max(r));
        println!(
            "channel {k}: N = {}, N_ex = {}, eps_N = {:.12e}, max converged residual = {:.3e}, h_applies = {}",
            s.n_occ(),
            s.n_ex(),
            s.eps[s.n_occ() - 1],
            worst,
            ch.eig_applies
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn respond(
    common: &Common,
    solver: &SolverFlags,
    groundstate: Option<&Path>,
    perturbation: Option<&Path>,
    dyson: bool,
) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    apply_solver_flags(&mut cfg, solver);
    let gs_path = groundstate.map_or_else(|| common.out.join("groundstate.json"), Path::to_path_buf);
    let gs = load_groundstate(&gs_path)
        .with_context(|| format!("reading {}", gs_path.display()))
        .map_err(config_err)?;
    let dv_path = perturbation
        .map(Path::to_path_buf)
        .or_else(|| cfg.perturbation.clone())
        .ok_or_else(|| config_err(anyhow::anyhow!("no perturbation file given")))?;
    let dv = read_perturbation(&dv_path)
        .with_context(|| format!("reading {}", dv_path.display()))
        .map_err(config_err)?;

    let opts = cfg.sternheimer_options();
    let kernel = cfg.kernel();
    let result = if dyson {
        solve_dyson(&gs, &dv, &kernel, &cfg.dyson_options(), cfg.gauge, &opts)
    } else {
        apply_chi0(&gs, &dv, cfg.gauge, &opts)
    };
    let csv_path = common.out.join("reports.csv");
    let r = match result {
        Ok(r) => r,
        Err(e) => {
            if let Error::ResponseFailed { reports, .. } = &e {
                write_file(&csv_path, csv_bytes(reports))?;
            }
            return Err(classify(e, EXIT_RESPOND));
        }
    };
    let file = ResponseFile::from_response(&r, cfg.seed, dyson.then_some(&kernel));
    let mut buf = Vec::new();
    write_json(&mut buf, &file).map_err(config_err)?;
    write_file(&common.out.join("response.json"), buf)?;
    write_file(&csv_path, csv_bytes(&file.reports))?;

    println!("drho norm = {:.12e}", r.drho.norm());
    println!("delta fermi level = {:.12e}", r.def);
    println!("total iterations = {}, total h_applies = {}", r.total_iterations(), r.total_h_applies);
    if !r.dyson_history.is_empty() {
        println!("dyson iterations = {}", r.dyson_history.len());
    }
    Ok(())
}

fn bench(common: &Common, solver: &SolverFlags, gaps: Option<&[f64]>, methods: Option<&[Method]>) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    apply_solver_flags(&mut cfg, solver);
    let gaps = gaps.map_or_else(|| cfg.gaps.clone(), <[f64]>::to_vec);
    let methods = methods.map_or_else(|| cfg.bench_methods.clone(), <[Method]>::to_vec);
    if gaps.is_empty() || methods.is_empty() {
        return Err(config_err(anyhow::anyhow!("bench needs at least one gap and one method")));
    }
    let mut params = cfg.bench;
    params.seed = cfg.seed;
    let out = run_gap_sweep(&params, &gaps, &methods, cfg.gauge, &cfg.sternheimer_options());

    write_file(&common.out.join("bench.csv"), csv_bytes(&out.rows))?;
    let summary = serde_json::json!({
        "seed": cfg.seed,
        "params": params,
        "points": out.points,
        "failures": out.failures,
    });
    let mut buf = Vec::new();
    write_json(&mut buf, &summary).map_err(config_err)?;
    write_file(&common.out.join("bench.json"), buf)?;

    for p in &out.points {
        println!(
            "gap {:.3e} {:>8}: n=N iterations {:>4}, total iterations {:>6}, h_applies {:>7}",
            p.gap, p.method, p.top_iterations, p.total_iterations, p.total_h_applies
        );
    }
    if let Some(f) = out.failures.first() {
        for f in &out.failures {
            eprintln!("failed at gap {:e}: {}", f.requested_gap, f.message);
        }
        return Err(Failure::new(EXIT_RESPOND, anyhow::anyhow!("{} bench point(s) failed, first: {}", out.failures.len(), f.message)));
    }
    Ok(())
}

fn adapt(
    common: &Common,
    groundstate: Option<&Path>,
    xi_target: Option<f64>,
    max_added: Option<usize>,
    channel: Option<usize>,
) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let gs_path = groundstate.map_or_else(|| common.out.join("groundstate.json"), Path::to_path_buf);
    let mut gs = load_groundstate(&gs_path)
        .with_context(|| format!("reading {}", gs_path.display()))
        .map_err(config_err)?;
    let xi_target = xi_target.unwrap_or(cfg.xi_target);
    let max_added = max_added.unwrap_or(cfg.max_added);
    let channel = channel.unwrap_or(cfg.adapt_channel);

    let trace_path = common.out.join("trace.csv");
    let trace = match adapt_bands(&mut gs, channel, xi_target, max_added, &cfg.eigen_options(), cfg.seed) {
        Ok(t) => t,
        Err(e) => {
            if let Error::BudgetExhausted { trace, .. } = &e {
                let mut buf = Vec::new();
                write_trace(&mut buf, trace).map_err(config_err)?;
                write_file(&trace_path, buf)?;
                return Err(Failure::new(EXIT_BUDGET, e));
            }
            return Err(classify(e, EXIT_PREPARE));
        }
    };
    let mut buf = Vec::new();
    write_trace(&mut buf, &trace).map_err(config_err)?;
    write_file(&trace_path, buf)?;
    let out_gs = common.out.join("groundstate.json");
    save_groundstate(&gs, &out_gs).map_err(config_err)?;

    let report = conditioning_report(&gs).map_err(|e| classify(e, EXIT_PREPARE))?;
    let r = &report[channel];
    println!("added {} band(s); N_ex = {}, xi = {:.6}", trace.len(), gs.channels[channel].slice.n_ex(), r.xi);
    if let Some(c) = r.xi_certified {
        println!("xi with certified eigenvalue bound = {c:.6}");
    }
    println!("wrote {} and {}", out_gs.display(), trace_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Prepare { common } => prepare(common),
        Command::Respond {
            common,
            solver,
            groundstate,
            perturbation,
            dyson,
        } => respond(common, solver, groundstate.as_deref(), perturbation.as_deref(), *dyson),
        Command::Bench {
            common,
            solver,
            gaps,
            methods,
        } => bench(common, solver, gaps.as_deref(), methods.as_deref()),
        Command::Adapt {
            common,
            groundstate,
            xi_target,
            max_added,
            channel,
        } => adapt(common, groundstate.as_deref(), *xi_target, *max_added, *channel),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
