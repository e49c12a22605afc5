//! Command-line front end for the suboptimal MHE library.
//!
//! Every command returns an [`Outcome`] instead of printing, so the binary
//! and the tests share one code path. Exit codes: 0 ok, 1 usage or
//! configuration error, 2 certification failure, 3 an assumption or
//! guarantee was falsified.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use smhe_core::config::{Config, Iterations};
use smhe_core::harness::{self, Experiment};
use smhe_core::lyapcert::{self, GammaParams, DEFAULT_SCAN_CAP};
use smhe_core::mhe::{CandidateMode, Form};
use smhe_core::model;
use smhe_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CERTIFICATION: i32 = 2;
pub const EXIT_FALSIFIED: i32 = 3;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    pub stdout: String,
    pub stderr: String,
    pub code: i32,
}

impl Outcome {
    fn json(value: &Value, code: i32) -> Self {
        Self {
            stdout: format!("{}\n", serde_json::to_string_pretty(value).expect("json values serialize")),
            stderr: String::new(),
            code,
        }
    }

    fn error(code: i32, msg: impl std::fmt::Display) -> Self {
        Self {
            stdout: String::new(),
            stderr: format!("error: {msg}\n"),
            code,
        }
    }

    fn warn(mut self, msg: impl std::fmt::Display) -> Self {
        self.stderr.push_str(&format!("warning: {msg}\n"));
        self
    }
}

#[derive(Parser, Debug)]
#[command(name = "smhe", version, about = "Suboptimal moving horizon estimation with certified horizons")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormArg {
    Prediction,
    Filtering,
}

impl From<FormArg> for Form {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Prediction => Form::Prediction,
            FormArg::Filtering => Form::Filtering,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "M")]
    M,
    #[value(name = "T")]
    T,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Smallest horizon M (or reinitialization depth T) with gamma1 < 1.
    Certify {
        config: PathBuf,
        #[arg(long, value_enum)]
        form: Option<FormArg>,
        #[arg(long, value_enum, default_value = "M")]
        mode: ModeArg,
        /// Horizon used in T mode.
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SCAN_CAP)]
        cap: usize,
        /// Prior weight scale, overrides the configuration.
        #[arg(long)]
        a: Option<f64>,
    },
    /// Sample the dissipation inequality and the output Lipschitz constant.
    CheckAssumptions {
        config: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        slack: f64,
        /// Replace the certificate's decay rate.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Run one closed-loop simulation and write its trace.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Optimizer iterations per step, or "converged".
        #[arg(long)]
        iterations: Option<Iterations>,
        #[arg(long)]
        a: Option<f64>,
    },
    /// Mean SSE over replicates for a grid of prior weights and iteration budgets.
    Benchmark {
        config: PathBuf,
        /// For example "a=1e-3,1e2;i=0,1,converged".
        #[arg(long)]
        grid: String,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-check a stored trace against the estimator guarantees.
    Verify {
        trace: PathBuf,
        config: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli.command),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                Outcome {
                    stdout: text,
                    ..Outcome::default()
                }
            } else {
                Outcome {
                    stderr: text,
                    code,
                    ..Outcome::default()
                }
            }
        }
    }
}

pub fn execute(command: Command) -> Outcome {
    let result = match command {
        Command::Certify {
            config,
            form,
            mode,
            m,
            cap,
            a,
        } => cmd_certify(&config, form.map(Form::from), mode, m, cap, a),
        Command::CheckAssumptions {
            config,
            samples,
            seed,
            slack,
            eta,
        } => cmd_check_assumptions(&config, samples, seed, slack, eta),
        Command::Simulate {
            config,
            out,
            seed,
            iterations,
            a,
        } => cmd_simulate(&config, &out, seed, iterations, a),
        Command::Benchmark {
            config,
            grid,
            replicates,
            seed,
        } => cmd_benchmark(&config, &grid, replicates, seed),
        Command::Verify { trace, config } => cmd_verify(&trace, &config),
    };
    result.unwrap_or_else(|e| Outcome::error(EXIT_USAGE, e))
}

fn load(path: &Path) -> smhe_core::Result<Config> {
    Config::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn with_a(cfg: &mut Config, a: Option<f64>) -> smhe_core::Result<()> {
    if let Some(a) = a {
        cfg.file.estimator.a = a;
        cfg.validate()?;
    }
    Ok(())
}

pub fn cmd_certify(
    path: &Path,
    form: Option<Form>,
    mode: ModeArg,
    m: Option<usize>,
    cap: usize,
    a: Option<f64>,
) -> smhe_core::Result<Outcome> {
    let mut cfg = load(path)?;
    with_a(&mut cfg, a)?;
    let form = form.unwrap_or(cfg.file.estimator.form);
    let cert = cfg.certificate()?;
    let params = GammaParams::from_certificate(&cert, &cfg.prior_weight(cfg.file.estimator.a)?)?;
    let (key, result) = match mode {
        ModeArg::M => ("M_min", lyapcert::min_horizon(&params, form, cap)),
        ModeArg::T => {
            let m = m.unwrap_or(cfg.file.estimator.m);
            ("T_min", lyapcert::min_t(&params, m, form, cap))
        }
    };
    match result {
        Ok(h) => {
            let mut obj = serde_json::Map::new();
            obj.insert("form".into(), json!(form));
            obj.insert("a".into(), json!(cfg.file.estimator.a));
            obj.insert(key.into(), json!(h.value));
            obj.insert("gamma1_at_min".into(), json!(h.gamma1));
            obj.insert("gamma2_at_min".into(), json!(h.gamma2));
            obj.insert("gamma3_at_min".into(), json!(h.gamma3));
            obj.insert("scan_cap".into(), json!(h.scan_cap));
            Ok(Outcome::json(&Value::Object(obj), EXIT_OK))
        }
        Err(e @ Error::CertificationFailure { .. }) => Ok(Outcome::error(EXIT_CERTIFICATION, e)),
        Err(e) => Err(e),
    }
}

pub fn cmd_check_assumptions(
    path: &Path,
    samples: usize,
    seed: u64,
    slack: f64,
    eta: Option<f64>,
) -> smhe_core::Result<Outcome> {
    let cfg = load(path)?;
    let exp = cfg.experiment()?;
    let cert = match eta {
        Some(eta) => exp.certificate.with_eta(eta)?,
        None => exp.certificate.clone(),
    };
    let domains = cfg.sample_domains()?;
    let dissipation = lyapcert::check_dissipation(
        &cert,
        exp.system.as_ref(),
        &exp.observer,
        &domains,
        samples,
        seed,
        slack,
    )?;
    let l_est = model::estimate_lipschitz(exp.system.as_ref(), samples.max(2), seed)?;
    let l_h = exp.system.lipschitz_h();
    let lipschitz_ok = l_est <= l_h + 1e-9;
    let code = if dissipation.violations == 0 && lipschitz_ok {
        EXIT_OK
    } else {
        EXIT_FALSIFIED
    };
    let report = json!({
        "dissipation": dissipation,
        "lipschitz": {
            "samples": samples.max(2),
            "estimated": l_est,
            "declared": l_h,
            "ok": lipschitz_ok,
        },
    });
    Ok(Outcome::json(&report, code))
}

pub fn cmd_simulate(
    path: &Path,
    out: &Path,
    seed: Option<u64>,
    iterations: Option<Iterations>,
    a: Option<f64>,
) -> smhe_core::Result<Outcome> {
    let mut cfg = load(path)?;
    with_a(&mut cfg, a)?;
    if let Some(it) = iterations {
        cfg.file.estimator.iterations = it;
    }
    if let Some(seed) = seed {
        cfg.file.scenario.seed = seed;
    }
    cfg.validate()?;
    let exp = cfg.experiment()?;
    let scenario = cfg.scenario()?;
    let start = Instant::now();
    let trace = harness::run_closed_loop(&exp, &scenario)?;
    let wall = start.elapsed().as_secs_f64();
    let file = File::create(out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
    harness::write_trace_csv(&trace, BufWriter::new(file))?;
    let checks = harness::verify_trace(&exp, &trace)?;
    let max_step = trace.step_seconds.iter().copied().fold(0.0, f64::max);
    let summary = json!({
        "trace": out.display().to_string(),
        "seed": scenario.seed,
        "steps": trace.len(),
        "sse": harness::sse(&trace),
        "theorem1_violations": checks.theorem1.count(),
        "lemma1_violations": checks.lemma1.count(),
        "cost_decrease_violations": checks.cost_decrease.count(),
        "fallback_steps": trace.fallback.iter().filter(|f| **f).count(),
        "timing": {
            "wall_seconds": wall,
            "max_step_seconds": max_step,
        },
    });
    Ok(Outcome::json(&summary, EXIT_OK))
}

/// Parsed `--grid` argument.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub a: Vec<f64>,
    pub iterations: Vec<Iterations>,
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> smhe_core::Result<Self> {
        let mut a = Vec::new();
        let mut iterations = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid entry '{part}' has no '='")))?;
            let values = values.split(',').map(str::trim);
            match key.trim() {
                "a" => {
                    for v in values {
                        let x: f64 = v
                            .parse()
                            .map_err(|_| Error::Config(format!("grid value a='{v}' is not a number")))?;
                        if !(x > 0.0 && x.is_finite()) {
                            return Err(Error::Config(format!("grid value a={v} must be positive")));
                        }
                        a.push(x);
                    }
                }
                "i" => {
                    for v in values {
                        iterations.push(v.parse()?);
                    }
                }
                other => return Err(Error::Config(format!("unknown grid key '{other}', expected 'a' or 'i'"))),
            }
        }
        if a.is_empty() || iterations.is_empty() {
            return Err(Error::Config("grid needs at least one value for both 'a' and 'i'".into()));
        }
        Ok(Self { a, iterations })
    }
}

fn iterations_label(it: &Iterations) -> Value {
    match it {
        Iterations::Count(i) => json!(i),
        Iterations::Word(w) => json!(w),
    }
}

pub fn cmd_benchmark(
    path: &Path,
    grid: &str,
    replicates: Option<usize>,
    seed: Option<u64>,
) -> smhe_core::Result<Outcome> {
    let cfg = load(path)?;
    let grid: Grid = grid.parse()?;
    let replicates = replicates.unwrap_or(cfg.file.scenario.replicates);
    if replicates == 0 {
        return Err(Error::Config("replicates must be at least 1".into()));
    }
    let mut scenario = cfg.scenario()?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let base = cfg.experiment()?;
    let mut cells = Vec::new();
    let mut failures = 0;
    for &a in &grid.a {
        let mut exp: Experiment = base.clone();
        exp.estimator.w = cfg.prior_weight(a)?;
        if exp.estimator.candidate_mode == CandidateMode::Simple {
            let params = exp.gamma_params()?;
            match lyapcert::min_horizon(&params, exp.estimator.form, DEFAULT_SCAN_CAP) {
                Ok(h) => exp.estimator.horizon = h.value,
                Err(e) => {
                    failures += grid.iterations.len();
                    for it in &grid.iterations {
                        cells.push(json!({"a": a, "i": iterations_label(it), "error": e.to_string()}));
                    }
                    continue;
                }
            }
        }
        for it in &grid.iterations {
            let mut cell_exp = exp.clone();
            cell_exp.estimator.budget = it.budget()?;
            let start = Instant::now();
            match harness::run_batch(&cell_exp, &scenario, replicates) {
                Ok(summary) => cells.push(json!({
                    "a": a,
                    "i": iterations_label(it),
                    "M": cell_exp.estimator.horizon,
                    "mean_sse": summary.mean_sse,
                    "summary": summary,
                    "wall_seconds": start.elapsed().as_secs_f64(),
                })),
                Err(e) => {
                    failures += 1;
                    cells.push(json!({"a": a, "i": iterations_label(it), "error": e.to_string()}));
                }
            }
        }
    }
    let table = json!({
        "form": cfg.file.estimator.form,
        "replicates": replicates,
        "base_seed": scenario.seed,
        "cells": cells,
    });
    Ok(Outcome::json(&table, if failures == 0 { EXIT_OK } else { EXIT_USAGE }))
}

pub fn cmd_verify(trace_path: &Path, path: &Path) -> smhe_core::Result<Outcome> {
    let cfg = load(path)?;
    let exp = cfg.experiment()?;
    let file = File::open(trace_path).map_err(|e| Error::Config(format!("{}: {e}", trace_path.display())))?;
    let trace = harness::read_trace_csv(file, cfg.scenario()?.xhat0)?;
    let checks = harness::verify_trace(&exp, &trace)?;
    let report = json!({
        "rows": trace.len(),
        "theorem1": checks.theorem1,
        "lemma1": checks.lemma1,
        "cost_decrease": checks.cost_decrease,
        "total_violations": checks.total(),
    });
    let code = if checks.total() == 0 { EXIT_OK } else { EXIT_FALSIFIED };
    let out = Outcome::json(&report, code);
    Ok(if trace.is_empty() {
        out.warn("trace has no rows; all checks pass vacuously")
    } else {
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parses_both_axes() {
        let g: Grid = "a=1e-3, 100; i=0,1,converged".parse().unwrap();
        assert_eq!(g.a, vec![1e-3, 100.0]);
        assert_eq!(
            g.iterations,
            vec![
                Iterations::Count(0),
                Iterations::Count(1),
                Iterations::Word("converged".into())
            ]
        );
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!("a=1".parse::<Grid>().is_err());
        assert!("a=-1;i=0".parse::<Grid>().is_err());
        assert!("a=1;i=lots".parse::<Grid>().is_err());
        assert!("b=1;i=0".parse::<Grid>().is_err());
        assert!("a1;i=0".parse::<Grid>().is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let out = run(["smhe", "certify"]);
        assert_eq!(out.code, EXIT_USAGE);
        assert!(!out.stderr.is_empty());
        let out = run(["smhe", "frobnicate"]);
        assert_eq!(out.code, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        let out = run(["smhe", "--help"]);
        assert_eq!(out.code, EXIT_OK);
        assert!(out.stdout.contains("certify"));
    }

    #[test]
    fn missing_config_is_a_usage_error() {
        let out = run(["smhe", "certify", "/nonexistent/config.json"]);
        assert_eq!(out.code, EXIT_USAGE);
        assert!(out.stderr.contains("/nonexistent/config.json"));
    }
}
