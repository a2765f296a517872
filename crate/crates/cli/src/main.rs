//! `khorbit`: integrate the Kepler-Heisenberg system and find, polish, verify
//! and rescale its symmetric periodic orbits.
//!
//! Exit codes: 0 success, 1 usage or format error, 2 collision,
//! 3 non-convergence or a failed verification.

mod config;

use std::f64::consts::{FRAC_2_PI, TAU};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use kh_core::dynamics::{invariant_report, Integrator, Termination, DEFAULT_COLLISION_MU};
use kh_core::loopspace::SymmetricLoop;
use kh_core::minimizer::{minimize, MinimizeConfig, MinimizeStatus, SeedSpec};
use kh_core::numfmt::{fmt17, json_number};
use kh_core::shooting::{polish, polish_loop, verify, OrbitCertificate, PolishOptions, VerifyBounds};
use kh_core::{Error, PhasePoint, PotentialParams};

const EXIT_USAGE: u8 = 1;
const EXIT_COLLISION: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

/// Samples per symmetry segment in the orbit plot files.
const PLOT_SAMPLES_PER_SEGMENT: usize = 128;

#[derive(Parser)]
#[command(name = "khorbit", version, about = "Symmetric periodic orbits of a Kepler-type potential on the Heisenberg group")]
struct Cli {
    /// File of `key = value` lines supplying defaults for the subcommand's flags
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate Hamilton's equations from one initial condition
    Integrate(IntegrateArgs),
    /// Minimize the action over symmetric loops, polish and verify the result
    FindOrbit(FindOrbitArgs),
    /// Shoot a loop or phase-space guess onto a periodic orbit
    Polish(PolishArgs),
    /// Re-integrate a certificate and check its residuals
    Verify(VerifyArgs),
    /// Dilate a certificate and re-measure it
    Scale(ScaleArgs),
}

#[derive(Args, Serialize)]
struct IntegrateArgs {
    /// Initial condition x,y,z,px,py,pz
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    ic: Vec<f64>,
    #[arg(long, allow_hyphen_values = true)]
    t_final: f64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Potential strength; 0 gives free sub-Riemannian geodesics
    #[arg(long, default_value_t = FRAC_2_PI)]
    alpha: f64,
    /// Record this many equal intervals instead of every accepted step
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_COLLISION_MU)]
    collision_mu: f64,
    #[arg(long, default_value = "trajectory.csv")]
    #[serde(skip)]
    out: PathBuf,
    /// Invariant report
    #[arg(long, default_value = "invariants.json")]
    #[serde(skip)]
    report: PathBuf,
}

#[derive(Args, Serialize)]
struct FindOrbitArgs {
    /// Symmetry order; odd and at least 3 for non-degenerate orbits
    #[arg(long)]
    k: usize,
    /// Controls per fundamental domain (even)
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = TAU)]
    period: f64,
    #[arg(long, default_value_t = FRAC_2_PI)]
    alpha: f64,
    /// Seed of the random perturbation of the initial loop
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial penalty weight
    #[arg(long, default_value_t = 1.0)]
    w0: f64,
    /// Penalty growth factor between stages
    #[arg(long, default_value_t = 10.0)]
    growth: f64,
    #[arg(long, default_value_t = 8)]
    stages: usize,
    #[arg(long, default_value_t = 1e-9)]
    grad_tol: f64,
    /// Iteration cap per penalty stage
    #[arg(long, default_value_t = 20_000)]
    max_iter: usize,
    /// Radius of the initial loop
    #[arg(long, default_value_t = 1.0)]
    r0: f64,
    /// Relative k-fold radial modulation of the initial loop
    #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
    eps: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    phase: f64,
    /// Relative amplitude of the random perturbation
    #[arg(long, default_value_t = 1e-3)]
    jitter: f64,
    #[arg(long, default_value_t = DEFAULT_COLLISION_MU)]
    collision_mu: f64,
    /// Integration tolerance used while polishing
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long, default_value_t = 40)]
    polish_max_iter: usize,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct PolishArgs {
    /// Loop JSON to polish
    #[arg(long = "loop", value_name = "PATH", required_unless_present = "ic", conflicts_with = "ic")]
    loop_path: Option<PathBuf>,
    /// Phase-space guess x,y,z,px,py,pz (with --s and --k)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires_all = ["s", "k"])]
    ic: Option<Vec<f64>>,
    /// Segment time T/k of the guess
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = FRAC_2_PI)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long, default_value_t = 40)]
    max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_COLLISION_MU)]
    collision_mu: f64,
    #[arg(long, default_value = "certificate.json")]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[serde(skip)]
    certificate: PathBuf,
    /// Tolerance of the run being checked; re-integration uses a tenth of it
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Also write the report as JSON
    #[arg(long, value_name = "PATH")]
    #[serde(skip)]
    json: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ScaleArgs {
    #[serde(skip)]
    certificate: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    lambda: f64,
    /// Integration tolerance for re-measuring the residuals
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long, default_value = "scaled.json")]
    #[serde(skip)]
    out: PathBuf,
}

fn params(alpha: f64) -> Result<PotentialParams> {
    Ok(PotentialParams::with_alpha(alpha)?)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn phase_point(v: &[f64]) -> Result<PhasePoint> {
    let a: [f64; 6] =
        v.try_into().map_err(|_| anyhow::anyhow!("--ic needs six comma-separated numbers, got {}", v.len()))?;
    let p = PhasePoint::from_array(a);
    if !p.is_finite() {
        bail!("--ic must be finite");
    }
    Ok(p)
}

fn cmd_integrate(a: &IntegrateArgs) -> Result<u8> {
    let ic = phase_point(&a.ic)?;
    let p = params(a.alpha)?;
    let integrator = Integrator::new(p, a.tol)?.with_collision_mu(a.collision_mu)?;
    let samples = match a.samples {
        Some(0) => bail!("--samples must be positive"),
        Some(m) => {
            Some((0..=m).map(|i| if i == m { a.t_final } else { a.t_final * i as f64 / m as f64 }).collect::<Vec<_>>())
        }
        None => None,
    };
    let traj = integrator.with_exact_stops(samples.is_some()).integrate(&ic, a.t_final, samples.as_deref())?;
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    traj.write_csv(std::io::BufWriter::new(file)).with_context(|| format!("writing {}", a.out.display()))?;

    let inv = invariant_report(&traj, &p)?;
    let termination = match traj.termination {
        Termination::Completed => json!({ "kind": "completed" }),
        Termination::Collision { t, mu } => json!({ "kind": "collision", "t": json_number(t), "mu": json_number(mu) }),
    };
    let report = json!({
        "termination": termination,
        "final_time": json_number(traj.final_time().unwrap_or(0.0)),
        "accepted_steps": traj.accepted_steps,
        "rejected_steps": traj.rejected_steps,
        "energy_drift": json_number(inv.energy_drift),
        "angular_momentum_drift": json_number(inv.angular_momentum_drift),
        "dilation_drift": json_number(inv.dilation_drift),
        "min_mu": json_number(inv.min_mu),
        "provenance": config::provenance("integrate", a),
    });
    write_file(&a.report, &(serde_json::to_string_pretty(&report)? + "\n"))?;

    println!("rows         {}", traj.len());
    println!("final time   {}", fmt17(traj.final_time().unwrap_or(0.0)));
    println!("H drift      {}", fmt17(inv.energy_drift));
    println!("p_theta drift {}", fmt17(inv.angular_momentum_drift));
    println!("J drift      {}", fmt17(inv.dilation_drift));
    if let Termination::Collision { t, mu } = traj.termination {
        eprintln!("collision at t = {t} (mu = {mu:e}); trajectory truncated");
        return Ok(EXIT_COLLISION);
    }
    Ok(0)
}

/// Writes `t,x,y` and `t,z` files sampled along one period of the orbit.
fn write_orbit_curves(cert: &OrbitCertificate, tol: f64, dir: &Path) -> Result<()> {
    let integrator = Integrator::new(cert.params()?, tol)?.with_exact_stops(true);
    let m = cert.k * PLOT_SAMPLES_PER_SEGMENT;
    let period = cert.period();
    let times: Vec<f64> = (0..=m).map(|i| if i == m { period } else { period * i as f64 / m as f64 }).collect();
    let traj = integrator.integrate(&cert.ic, period, Some(&times))?;
    let pts: Vec<(f64, f64, f64, f64)> =
        traj.times.iter().zip(&traj.states).map(|(t, s)| (*t, s.q.x, s.q.y, s.q.z)).collect();
    write_curves(&pts, dir)
}

fn write_loop_curves(lp: &SymmetricLoop, dir: &Path) -> Result<()> {
    let dt = lp.dt();
    let pts: Vec<(f64, f64, f64, f64)> =
        lp.unroll().points.iter().enumerate().map(|(i, q)| (i as f64 * dt, q.x, q.y, q.z)).collect();
    write_curves(&pts, dir)
}

fn write_curves(pts: &[(f64, f64, f64, f64)], dir: &Path) -> Result<()> {
    let mut xy = String::from("t,x,y\n");
    let mut z = String::from("t,z\n");
    for &(t, x, y, h) in pts {
        xy.push_str(&format!("{},{},{}\n", fmt17(t), fmt17(x), fmt17(y)));
        z.push_str(&format!("{},{}\n", fmt17(t), fmt17(h)));
    }
    write_file(&dir.join("xy.csv"), &xy)?;
    write_file(&dir.join("z.csv"), &z)
}

fn cmd_find_orbit(a: &FindOrbitArgs) -> Result<u8> {
    let p = params(a.alpha)?;
    let cfg = MinimizeConfig {
        k: a.k,
        n_f: a.n,
        period: a.period,
        w0: a.w0,
        growth: a.growth,
        stages: a.stages,
        grad_tol: a.grad_tol,
        max_iter: a.max_iter,
        seed: SeedSpec { r0: a.r0, eps: a.eps, phase: a.phase, jitter: a.jitter },
        rng_seed: a.seed,
        collision_mu: a.collision_mu,
    };
    cfg.validate()?;
    let popts =
        PolishOptions { tol: a.tol, max_iter: a.polish_max_iter, collision_mu: a.collision_mu, ..Default::default() };
    if popts.tol.is_nan() || popts.tol <= 0.0 || popts.max_iter == 0 {
        bail!("--tol and --polish-max-iter must be positive");
    }
    let prov = config::provenance("find-orbit", a);
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dir = a.out_dir.as_path();

    let mut result = minimize(&cfg, &p)?;
    result.provenance = prov.clone();
    write_file(&dir.join("result.json"), &(result.to_json() + "\n"))?;
    write_file(&dir.join("loop.json"), &(result.lp.to_json() + "\n"))?;
    let mut history = Vec::new();
    result.write_history_csv(&mut history)?;
    fs::write(dir.join("history.csv"), history).context("writing history.csv")?;

    println!("minimize     {}", result.status.as_str());
    println!("action       {}", fmt17(result.action));
    println!("s2 (loop)    {}", fmt17(result.residuals.s2));
    println!("max|z|       {}", fmt17(result.max_abs_z));
    println!("max|z| sym   {}", fmt17(result.symmetric_max_abs_z));

    match result.status {
        MinimizeStatus::Converged => {}
        MinimizeStatus::Degenerate => {
            write_loop_curves(&result.lp, dir)?;
            eprintln!(
                "k = {} is even: the symmetric part of z vanishes identically (max {:e}); no orbit to polish",
                a.k, result.symmetric_max_abs_z
            );
            return Ok(EXIT_NOT_CONVERGED);
        }
        MinimizeStatus::Collision => {
            write_loop_curves(&result.lp, dir)?;
            eprintln!("minimization stopped at the collision barrier");
            return Ok(EXIT_COLLISION);
        }
        MinimizeStatus::Stalled => {
            write_loop_curves(&result.lp, dir)?;
            eprintln!("minimization stalled with |grad| = {:e}", result.grad_norm);
            return Ok(EXIT_NOT_CONVERGED);
        }
    }

    let mut cert = match polish_loop(&result.lp, &p, &popts) {
        Ok(c) => c,
        Err(e) => {
            write_loop_curves(&result.lp, dir)?;
            return Err(e.into());
        }
    };
    cert.provenance = prov;
    write_file(&dir.join("certificate.json"), &(cert.to_json() + "\n"))?;
    write_orbit_curves(&cert, a.tol, dir)?;

    let report = verify(&cert, a.tol, &VerifyBounds::default());
    write_file(&dir.join("verify.txt"), &report.table())?;
    write_file(&dir.join("verify.json"), &(report.to_json() + "\n"))?;
    println!(
        "polish       {} after {} iterations",
        if cert.converged { "converged" } else { "stalled" },
        cert.iterations
    );
    println!("T            {}", fmt17(cert.period()));
    print!("{}", report.table());
    Ok(if cert.converged && report.passed() { 0 } else { EXIT_NOT_CONVERGED })
}

fn cmd_polish(a: &PolishArgs) -> Result<u8> {
    let p = params(a.alpha)?;
    let opts = PolishOptions { tol: a.tol, max_iter: a.max_iter, collision_mu: a.collision_mu, ..Default::default() };
    let mut cert = match (&a.loop_path, &a.ic) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            polish_loop(&SymmetricLoop::from_json(&text)?, &p, &opts)?
        }
        (None, Some(ic)) => {
            let (s, k) = (a.s.unwrap_or(f64::NAN), a.k.unwrap_or(0));
            polish(&phase_point(ic)?, s, k, &p, &opts)?
        }
        (None, None) => bail!("either --loop or --ic is required"),
    };
    let mut prov = config::provenance("polish", a);
    if let Some(path) = &a.loop_path {
        prov["input"] = json!(path.file_name().map(|n| n.to_string_lossy().into_owned()));
    }
    cert.provenance = prov;
    write_file(&a.out, &(cert.to_json() + "\n"))?;
    println!(
        "polish       {} after {} iterations",
        if cert.converged { "converged" } else { "stalled" },
        cert.iterations
    );
    println!("s            {}", fmt17(cert.s));
    println!("closure      {}", fmt17(cert.residuals.closure));
    println!("|H|          {}", fmt17(cert.residuals.energy));
    Ok(if cert.converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn read_certificate(path: &Path) -> Result<OrbitCertificate> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(OrbitCertificate::from_json(&text)?)
}

fn cmd_verify(a: &VerifyArgs) -> Result<u8> {
    if !(a.tol > 0.0 && a.tol.is_finite()) {
        bail!("--tol must be positive");
    }
    let cert = read_certificate(&a.certificate)?;
    let report = verify(&cert, a.tol, &VerifyBounds::default());
    if let Some(path) = &a.json {
        write_file(path, &(report.to_json() + "\n"))?;
    }
    print!("{}", report.table());
    Ok(if report.passed() { 0 } else { EXIT_NOT_CONVERGED })
}

fn cmd_scale(a: &ScaleArgs) -> Result<u8> {
    let cert = read_certificate(&a.certificate)?;
    let opts = PolishOptions { tol: a.tol, ..Default::default() };
    let mut scaled = cert.dilate(a.lambda, &opts)?;
    let mut prov = config::provenance("scale", a);
    prov["parent"] = cert.provenance.clone();
    scaled.provenance = prov;
    write_file(&a.out, &(scaled.to_json() + "\n"))?;
    println!("s            {}", fmt17(scaled.s));
    println!("closure      {}", fmt17(scaled.residuals.closure));
    Ok(0)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Collision { .. }) => EXIT_COLLISION,
        Some(Error::StepSizeUnderflow { .. }) | Some(Error::TooManySteps { .. }) => EXIT_NOT_CONVERGED,
        _ => EXIT_USAGE,
    }
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Integrate(a) => cmd_integrate(a),
        Command::FindOrbit(a) => cmd_find_orbit(a),
        Command::Polish(a) => cmd_polish(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Scale(a) => cmd_scale(a),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = match std::env::args_os().map(|a| a.into_string()).collect() {
        Ok(a) => a,
        Err(bad) => {
            eprintln!("error: argument is not valid UTF-8: {bad:?}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let args = match config::merge_config(args, &Cli::command()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let code = match run(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    };
    let _ = std::io::stdout().flush();
    ExitCode::from(code)
}
