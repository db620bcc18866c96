//! Command-line front end: configuration loading, experiment dispatch and
//! artifact output.
//!
//! Exit codes: `0` when every selected check passes, `1` when a check or
//! a geometry gate fails, `2` for configuration and usage errors.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::fields::random;
use crate::flow::{integrate_geodesic, scattering_relation, validate_simple, PhasePoint};
use crate::geometry::{boundary_fan, BoundaryPoint, MagneticSystem};
use crate::probes::{self, ProbeReport};
use crate::sm::FiberPoly;
use crate::transform::{scattering_data, transform_fan};
use crate::verify::{self, SuiteReport, VerifyInput, SUITES};

pub const PROBE_SUITES: [&str; 5] = ["kernel", "gauge", "tensor", "degree", "nullspace"];

/// Samples on the boundary used by the convexity and conjugate-point gate.
const GATE_SAMPLES: usize = 64;
const UNITARITY_TOLERANCE: f64 = 1e-6;
const SKEW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(name = "magtomo", version, about = "Magnetic ray transforms on conformal disks")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Flags {
    /// Experiment configuration (TOML); defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory for CSV and JSON artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "magtomo-out")]
    out: PathBuf,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true, num_args = 3, value_names = ["NX", "NY", "NT"])]
    grid: Option<Vec<usize>>,
    #[arg(long, global = true, value_name = "N")]
    fan: Option<usize>,
    /// Comma-separated suite names for `verify` and `probe`.
    #[arg(long, global = true, value_delimiter = ',', value_name = "NAME[,NAME...]")]
    suite: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Geodesic from the `[trace]` entry point: t, x, y, theta.
    Trace,
    /// Scattering relation over the boundary fan.
    ScatterFan,
    /// Attenuated transform of the `[integrand]` over the fan.
    Transform,
    /// Scattering data `C₊` over the fan.
    Scatter,
    /// Fiber-discretization identity suites.
    Verify { suites: Vec<String> },
    /// Theorem-level empirical probes.
    Probe { suites: Vec<String> },
    /// Skew-Hermitian residuals of the attenuation fields.
    ValidateFields,
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return 2;
    }
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Parse { .. }) => 2,
        _ => 1,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MAGTOMO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("MAGTOMO_THREADS must be a positive integer, got '{v}'")))?;
    if n == 0 {
        return Err(Error::Config("MAGTOMO_THREADS must be at least 1".into()).into());
    }
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn resolve_config(flags: &Flags) -> Result<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml("schema_version = 1\n")?,
    };
    if let Some(s) = flags.seed {
        cfg.numerics.seed = s;
    }
    if let Some(dt) = flags.dt {
        cfg.numerics.dt = dt;
    }
    if let Some(g) = &flags.grid {
        cfg.numerics.grid = [g[0], g[1], g[2]];
    }
    if let Some(f) = flags.fan {
        cfg.numerics.fan_size = f;
    }
    cfg.check_numerics()?;
    Ok(cfg)
}

fn select(positional: &[String], flag: &[String], config: &[String], all: &[&str]) -> Result<Vec<String>> {
    let chosen: Vec<String> = [positional, flag]
        .concat()
        .iter()
        .flat_map(|s| s.split(','))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let chosen = match (chosen.is_empty(), config.is_empty()) {
        (false, _) => chosen,
        (true, false) => config.to_vec(),
        (true, true) => all.iter().map(|s| s.to_string()).collect(),
    };
    for s in &chosen {
        if !all.contains(&s.as_str()) {
            return Err(Error::Config(format!("unknown suite '{s}' (expected one of {})", all.join(", "))).into());
        }
    }
    Ok(chosen)
}

fn execute(cli: Cli) -> Result<bool> {
    let cfg = resolve_config(&cli.flags)?;
    let hash = cfg.hash();
    println!("config_hash {hash}");
    let out = &cli.flags.out;
    if let Command::ValidateFields = cli.command {
        return validate_fields(&cfg, out, &hash);
    }
    let system = cfg.system()?;
    let pair = cfg.pair()?;
    validate_simple(&system, GATE_SAMPLES)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Trace => trace(&cfg, &system, out),
        Command::ScatterFan => scatter_fan(&cfg, &system, out),
        Command::Transform => {
            let f = cfg.integrand(&system)?;
            let fan = boundary_fan(cfg.numerics.fan_size);
            let rows = transform_fan(&system, &pair, &f, &fan)?;
            let mut header = vec!["beta".to_string(), "mu".into(), "tau".into()];
            for c in 0..pair.rank() {
                header.push(format!("re_{c}"));
                header.push(format!("im_{c}"));
            }
            let mut w = csv_writer(&out.join("transform.csv"), &header)?;
            let mut worst = 0.0f64;
            for (bp, tau, v) in &rows {
                let mut rec = vec![fmt(bp.beta), fmt(bp.mu), fmt(*tau)];
                for z in v.iter() {
                    rec.push(fmt(z.re));
                    rec.push(fmt(z.im));
                    worst = worst.max(z.norm());
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
            let finite = rows.iter().all(|(_, t, v)| t.is_finite() && v.iter().all(|z| z.is_finite()));
            summary("transform", finite, &format!("{} rays, max |I| = {worst:.6e}", rows.len()));
            Ok(finite)
        }
        Command::Scatter => {
            let data = scattering_data(&system, &pair, cfg.numerics.fan_size)?;
            let n = pair.rank();
            let mut header = vec!["beta".to_string(), "mu".into()];
            for i in 0..n {
                for j in 0..n {
                    header.push(format!("re_{i}{j}"));
                    header.push(format!("im_{i}{j}"));
                }
            }
            let mut w = csv_writer(&out.join("scatter.csv"), &header)?;
            for (bp, c) in &data.fan {
                let mut rec = vec![fmt(bp.beta), fmt(bp.mu)];
                for i in 0..n {
                    for j in 0..n {
                        rec.push(fmt(c[(i, j)].re));
                        rec.push(fmt(c[(i, j)].im));
                    }
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
            let defect = data.max_unitarity_defect();
            let pass = defect < UNITARITY_TOLERANCE;
            summary("scatter", pass, &format!("{} rays, max unitarity defect = {defect:.3e}", data.fan.len()));
            Ok(pass)
        }
        Command::Verify { suites } => {
            let chosen = select(&suites, &cli.flags.suite, &cfg.suites, &SUITES)?;
            let input = VerifyInput {
                system,
                pair,
                grid: cfg.grid(),
                seed: cfg.numerics.seed,
                intfactor_max_iterations: cfg.numerics.intfactor_max_iterations,
            };
            run_verify(&chosen, &input, out, &hash)
        }
        Command::Probe { suites } => {
            let chosen = select(&suites, &cli.flags.suite, &cfg.suites, &PROBE_SUITES)?;
            run_probes(&chosen, &cfg, &system, &pair, out, &hash)
        }
        Command::ValidateFields => unreachable!(),
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

fn summary(name: &str, pass: bool, text: &str) {
    println!("{name}: {} {text}", if pass { "PASS" } else { "FAIL" });
}

fn csv_writer(path: &Path, header: &[String]) -> Result<csv::Writer<File>> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    Ok(w)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn trace(cfg: &ExperimentConfig, system: &MagneticSystem, out: &Path) -> Result<bool> {
    let bp = BoundaryPoint::new(cfg.trace.beta, cfg.trace.mu);
    if !bp.is_incoming() {
        return Err(Error::Config(format!("trace.mu = {} is not an incoming direction", bp.mu)).into());
    }
    let tr = integrate_geodesic(system, PhasePoint::from_boundary(&bp), system.dt)?;
    let header: Vec<String> = ["t", "x", "y", "theta"].iter().map(|s| s.to_string()).collect();
    let mut w = csv_writer(&out.join("trace.csv"), &header)?;
    for (t, p) in &tr.samples {
        w.write_record([fmt(*t), fmt(p.x), fmt(p.y), fmt(p.theta)])?;
    }
    w.flush()?;
    let end = tr.end();
    summary(
        "trace",
        tr.exited,
        &format!("tau = {:.10}, exit = ({:.8}, {:.8})", tr.exit_time, end.x, end.y),
    );
    Ok(tr.exited)
}

fn scatter_fan(cfg: &ExperimentConfig, system: &MagneticSystem, out: &Path) -> Result<bool> {
    use rayon::prelude::*;
    let fan = boundary_fan(cfg.numerics.fan_size);
    let exits = fan
        .par_iter()
        .map(|bp| scattering_relation(system, bp))
        .collect::<crate::Result<Vec<_>>>()?;
    let header: Vec<String> = ["beta_in", "mu_in", "beta_out", "mu_out", "tau"].iter().map(|s| s.to_string()).collect();
    let mut w = csv_writer(&out.join("scatter_fan.csv"), &header)?;
    for (bp, e) in fan.iter().zip(&exits) {
        w.write_record([fmt(bp.beta), fmt(bp.mu), fmt(e.beta), fmt(e.mu), fmt(e.tau)])?;
    }
    w.flush()?;
    let max_tau = exits.iter().map(|e| e.tau).fold(0.0, f64::max);
    summary("scatter-fan", true, &format!("{} rays, max tau = {max_tau:.6}", exits.len()));
    Ok(true)
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    config_hash: &'a str,
    reports: &'a [SuiteReport],
}

fn run_verify(suites: &[String], input: &VerifyInput, out: &Path, hash: &str) -> Result<bool> {
    let mut reports = Vec::new();
    for s in suites {
        let start = Instant::now();
        let r = verify::run_suite(s, input).with_context(|| format!("suite {s}"))?;
        summary(
            &format!("verify {s}"),
            r.pass,
            &format!("residual = {:.3e} at {} ({:.1} s)", r.residual, r.resolution, start.elapsed().as_secs_f64()),
        );
        reports.push(r);
    }
    write_json(&out.join("verify.json"), &VerifyOutput { config_hash: hash, reports: &reports })?;
    let mut w = csv::Writer::from_path(out.join("verify_refinement.csv"))?;
    for row in reports.iter().flat_map(|r| &r.refinement) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(reports.iter().all(|r| r.pass))
}

fn run_probes(
    suites: &[String],
    cfg: &ExperimentConfig,
    system: &MagneticSystem,
    pair: &crate::fields::AttenuationPair,
    out: &Path,
    hash: &str,
) -> Result<bool> {
    let p = &cfg.probes;
    let seed = cfg.numerics.seed;
    let fan = cfg.numerics.fan_size;
    let mut reports: Vec<ProbeReport> = Vec::new();
    for s in suites {
        let start = Instant::now();
        let report = match s.as_str() {
            "kernel" => probes::probe_kernel_forward(system, pair, p.draws, fan, seed)?,
            "gauge" => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q = random::gauge(&mut rng, pair.rank(), p.gauge_degree);
                probes::probe_gauge_determination(system, pair, &q, fan, seed)?
            }
            "tensor" => probes::probe_tensor_tomography(system, p.tensor_order, p.draws, fan, seed)?,
            "degree" => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = p.degree_m.max(1) as i32 - 1;
                let mut u = FiberPoly::zero(1);
                for k in -d..=d {
                    u = u.add(&FiberPoly::mode(k, random::vanishing_vector(&mut rng, 1, 2, 1)));
                }
                let nt = (2 * p.degree_m + 2).next_power_of_two().max(16);
                probes::probe_degree_reduction(system, &u, p.degree_m, 4, nt)?
            }
            "nullspace" => probes::probe_nullspace_svd(system, pair, p.basis_degree, fan)?,
            other => unreachable!("suite {other} was validated"),
        }
        .with_config_hash(hash);
        let headline = report
            .metrics
            .iter()
            .map(|(k, v)| format!("{k} = {v:.3e}"))
            .take(2)
            .collect::<Vec<_>>()
            .join(", ");
        summary(&format!("probe {s}"), report.pass, &format!("{headline} ({:.1} s)", start.elapsed().as_secs_f64()));
        reports.push(report);
    }
    write_json(&out.join("probes.json"), &reports)?;
    Ok(reports.iter().all(|r| r.pass))
}

#[derive(Serialize)]
struct FieldValidation<'a> {
    config_hash: &'a str,
    rank: usize,
    a_x: f64,
    a_y: f64,
    phi: f64,
    pass: bool,
}

fn validate_fields(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<bool> {
    let pair = cfg.pair_unchecked()?;
    let [ax, ay, phi] = pair.skew_hermitian_residuals();
    let pass = ax.max(ay).max(phi) < SKEW_TOLERANCE;
    println!("skew-Hermitian residuals: a_x = {ax:.3e}, a_y = {ay:.3e}, phi = {phi:.3e}");
    summary("validate-fields", pass, &format!("rank {}", pair.rank()));
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(
        &out.join("validate.json"),
        &FieldValidation {
            config_hash: hash,
            rank: pair.rank(),
            a_x: ax,
            a_y: ay,
            phi,
            pass,
        },
    )?;
    Ok(pass)
}
