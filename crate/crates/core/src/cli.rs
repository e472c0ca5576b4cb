//! Command-line front end.

use crate::audit::run_audit;
use crate::diagnostics::{check_estimates, EstimateInputs, MomentRow, MomentSeries, RunManifest};
use crate::dsmc::{self, DsmcError};
use crate::homogeneous::{self, ls_dissipation_check, SectionalOperator};
use crate::io::{write_homo_csv, write_json, ConfigError, RunConfig};
use crate::kernels::gronwall_constant_mass;
use crate::verify;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "coagkin", version, about = "Kinetic coagulation-fragmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Audit a kernel suite against the structural assumptions.
    Audit(RunArgs),
    /// Deterministic sectional solver for the mass-only equation.
    Homo(RunArgs),
    /// Stochastic particle simulation of the full model.
    Dsmc(RunArgs),
    /// Built-in property suites; no config needed.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (`audit`: report file).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sample budget (`audit`) or particle count (`dsmc`).
    #[arg(long)]
    pub budget: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// One of kinematics, samplers, moments; all when omitted.
    #[arg(long)]
    pub suite: Option<String>,
    /// Pairs, samples or particles, depending on the suite.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Check(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Usage(format!("csv error: {e}"))
    }
}

impl From<DsmcError> for Failure {
    fn from(e: DsmcError) -> Self {
        match e {
            DsmcError::MajorantBreach { .. }
            | DsmcError::AsymmetricKernel(_)
            | DsmcError::Sampling(_)
            | DsmcError::State(_) => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit status.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => EXIT_PASS,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK_FAILED
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
    }
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    match &cli.command {
        Command::Audit(a) => audit(a),
        Command::Homo(a) => homo(a),
        Command::Dsmc(a) => dsmc_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn out_dir(a: &RunArgs) -> Result<PathBuf, Failure> {
    let dir = a.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn audit(a: &RunArgs) -> Result<bool, Failure> {
    let (cfg, bytes) = RunConfig::from_path(&a.config)?;
    let suite = cfg.kernel_suite()?;
    let acfg = cfg.audit_config(a.budget);
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let report = run_audit(&suite, &acfg, seed).map_err(|e| Failure::Usage(e.to_string()))?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("audit_report.json"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_json(&out, &report)?;
    let mut manifest = RunManifest::new("audit", &bytes, seed);
    manifest.kernels.insert("coag".into(), suite.coag.name());
    manifest.kernels.insert("frag".into(), suite.frag.name());
    manifest.outputs.push(out.display().to_string());
    write_json(&sibling(&out, "manifest.json"), &manifest)?;
    for e in &report.entries {
        println!("{:<24} {:?}{}", e.id, e.status, if e.mandatory { "" } else { " (advisory)" });
    }
    Ok(report.passed())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn homo(a: &RunArgs) -> Result<bool, Failure> {
    let (cfg, bytes) = RunConfig::from_path(&a.config)?;
    let (hcfg, init) = cfg.homogeneous()?;
    let dir = out_dir(a)?;
    let op = SectionalOperator::new(hcfg.grid.clone(), &hcfg.suite);
    let traj = homogeneous::run_with(&hcfg, &op, init).map_err(|e| Failure::Usage(e.to_string()))?;
    let pure = !op.has_fragmentation();
    let ls = ls_dissipation_check(&traj, pure, 1e-6);
    let mut series = MomentSeries::default();
    for r in &traj.rows {
        series.push(MomentRow {
            t: r.t,
            n: r.n,
            m: r.m + r.overflow_mass,
            px: 0.0,
            py: 0.0,
            pz: 0.0,
            ekin: 0.0,
            eint: 0.0,
            etot: 0.0,
            mx2: 0.0,
        });
    }
    series.ls = Some(traj.rows.iter().map(|r| r.ls).collect());
    let gron = gronwall_constant_mass(hcfg.suite.frag.as_ref(), cfg.suite.c0, 64);
    let estimates = check_estimates(
        &series,
        &EstimateInputs {
            gronwall_c: Some(gron),
            pure_coagulation: pure,
            conservation_tol: 1e-10,
            ..Default::default()
        },
    );
    let csv_path = dir.join("homo.csv");
    write_homo_csv(&traj.rows, BufWriter::new(File::create(&csv_path)?))?;
    let passed = ls.passed && traj.max_mass_drift <= 1e-10 && traj.max_mass_balance_residual <= 1e-12 && estimates.passed();
    write_json(
        &dir.join("report.json"),
        &json!({
            "passed": passed,
            "ls_check": ls,
            "ls_check_kind": "mass-only analogue of the kinetic inequality",
            "max_mass_drift": traj.max_mass_drift,
            "max_mass_balance_residual": traj.max_mass_balance_residual,
            "steps": traj.steps,
            "rejected_steps": traj.rejected_steps,
            "underflow_number_deficit": traj.final_state.underflow_number_deficit,
            "estimates": estimates,
        }),
    )?;
    let mut manifest = RunManifest::new("homo", &bytes, a.seed.or(cfg.seed).unwrap_or(0));
    manifest.kernels.insert("coag".into(), hcfg.suite.coag.name());
    manifest.kernels.insert("frag".into(), hcfg.suite.frag.name());
    manifest.outputs = vec!["homo.csv".into(), "report.json".into()];
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!(
        "homo: {} rows, mass drift {:.3e}, Ls check {}",
        traj.rows.len(),
        traj.max_mass_drift,
        if ls.passed { "pass" } else { "FAIL" }
    );
    Ok(passed)
}

fn dsmc_cmd(a: &RunArgs) -> Result<bool, Failure> {
    let (cfg, bytes) = RunConfig::from_path(&a.config)?;
    let (dcfg, sampler) = cfg.dsmc(a.seed, a.budget.map(|b| b as usize))?;
    let dir = out_dir(a)?;
    let out = dsmc::run(&dcfg, &sampler)?;
    out.series.write_csv(BufWriter::new(File::create(dir.join("moments.csv"))?))?;
    out.ledger.write_csv(BufWriter::new(File::create(dir.join("ledger.csv"))?))?;
    let exact = out.ledger.max_event_residual() <= crate::diagnostics::EVENT_TOL;
    let passed = out.estimates.passed() && exact;
    write_json(
        &dir.join("report.json"),
        &json!({
            "passed": passed,
            "estimates": out.estimates,
            "gronwall": out.gronwall,
            "events": out.ledger.total_events(),
            "skips": out.ledger.total_skips(),
            "skip_rate": out.skip_rate(),
            "max_event_residual": out.ledger.max_event_residual(),
            "max_drift": out.ledger.max_drift(),
            "b1_source": out.b1_source,
        }),
    )?;
    let mut manifest = RunManifest::new("dsmc", &bytes, dcfg.seed);
    manifest.kernels.insert("coag".into(), dcfg.suite.coag.name());
    manifest.kernels.insert("frag".into(), dcfg.suite.frag.name());
    manifest.outputs = vec!["moments.csv".into(), "ledger.csv".into(), "report.json".into()];
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!(
        "dsmc: {} events, {} particles at T, estimates {}",
        out.ledger.total_events(),
        out.ensemble.len(),
        if passed { "pass" } else { "FAIL" }
    );
    Ok(passed)
}

fn verify_cmd(a: &VerifyArgs) -> Result<bool, Failure> {
    let names: Vec<String> = match &a.suite {
        Some(s) => vec![s.clone()],
        None => verify::SUITES.iter().map(|s| s.to_string()).collect(),
    };
    let mut reports = Vec::new();
    for n in &names {
        let rep = verify::run_suite(n, a.budget, a.seed).ok_or_else(|| {
            Failure::Usage(format!("unknown suite `{n}` (known: {})", verify::SUITES.join(", ")))
        })?;
        for c in &rep.checks {
            println!(
                "{}/{:<28} {} observed {:.3e} tolerance {:.1e}",
                rep.suite,
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.observed,
                c.tolerance
            );
        }
        reports.push(rep);
    }
    if let Some(out) = &a.out {
        write_json(out, &reports)?;
    }
    Ok(reports.iter().all(|r| r.passed()))
}
