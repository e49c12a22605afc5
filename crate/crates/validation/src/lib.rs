//! Acceptance criteria for the reactor benchmark.
//!
//! Each criterion is a plain function returning a [`Verdict`]; tolerances
//! and sample sizes are the constants below. The `acceptance` test target
//! runs them all and prints one line per criterion.

use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use smhe_core::config::Config;
use smhe_core::harness::{self, Experiment, Scenario};
use smhe_core::linalg;
use smhe_core::lyapcert::{self, GammaParams};
use smhe_core::mhe::{self, CandidateMode, Form, IterationBudget, Window, WindowProblem};
use smhe_core::model::BoxSet;
use smhe_core::rng::CounterRng;

const CONFIG: &str = include_str!("../../../configs/reactor_benchmark.json");

pub const SEEDS: u64 = 20;
pub const ITERATIONS: [IterationBudget; 3] = [
    IterationBudget::Fixed(0),
    IterationBudget::Fixed(1),
    IterationBudget::Fixed(5),
];

pub const DISSIPATION_SAMPLES: usize = 100_000;
pub const DISSIPATION_SLACK: f64 = 1e-9;
pub const FORCED_ETA: f64 = 0.5;

pub const SSE_I0_BAND: (f64, f64) = (25.0, 65.0);
pub const SSE_I1_BAND: (f64, f64) = (1.0, 15.0);
pub const SSE_MIN_RATIO: f64 = 5.0;
pub const SSE_CONVERGED_FACTOR: f64 = 1.05;

pub const JACOBIAN_WINDOWS: u64 = 100;
pub const JACOBIAN_FD_STEP: f64 = 1e-6;
pub const JACOBIAN_RTOL: f64 = 1e-5;

pub const GAMMA_AT: f64 = 1000.0;
pub const GAMMA_BAND: f64 = 1e-6;
pub const GAMMA1_MAX: f64 = 1e-10;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn config() -> Config {
    Config::parse(CONFIG).expect("bundled configuration parses")
}

fn experiment(a: f64, horizon: usize, mode: CandidateMode, budget: IterationBudget) -> Experiment {
    let cfg = config();
    let mut exp = cfg.experiment().unwrap();
    exp.estimator.w = cfg.prior_weight(a).unwrap();
    exp.estimator.horizon = horizon;
    exp.estimator.form = Form::Filtering;
    exp.estimator.candidate_mode = mode;
    exp.estimator.budget = budget;
    exp
}

fn scenario() -> Scenario {
    config().scenario().unwrap()
}

fn params(a: f64) -> GammaParams {
    let cfg = config();
    GammaParams::from_certificate(&cfg.certificate().unwrap(), &cfg.prior_weight(a).unwrap()).unwrap()
}

fn sweep_configs() -> [(&'static str, Experiment); 3] {
    [
        ("a=1e2 M=16", experiment(1e2, 16, CandidateMode::Simple, IterationBudget::Fixed(0))),
        ("a=1e-3 M=128", experiment(1e-3, 128, CandidateMode::Simple, IterationBudget::Fixed(0))),
        (
            "a=1e-3 M=3 T=178",
            experiment(1e-3, 3, CandidateMode::Reinit { depth: 178 }, IterationBudget::Fixed(0)),
        ),
    ]
}

pub fn horizon_certification() -> Verdict {
    let m_hi = lyapcert::min_horizon(&params(1e2), Form::Filtering, lyapcert::DEFAULT_SCAN_CAP);
    let m_lo = lyapcert::min_horizon(&params(1e-3), Form::Filtering, lyapcert::DEFAULT_SCAN_CAP);
    match (m_hi, m_lo) {
        (Ok(h), Ok(l)) => verdict(
            h.value == 16 && l.value == 128,
            format!("M(a=1e2) = {}, M(a=1e-3) = {}", h.value, l.value),
        ),
        (h, l) => verdict(false, format!("{h:?} / {l:?}")),
    }
}

pub fn t_certification() -> Verdict {
    match lyapcert::min_t(&params(1e-3), 3, Form::Filtering, lyapcert::DEFAULT_SCAN_CAP) {
        Ok(t) => verdict(t.value == 178, format!("T(M=3, a=1e-3) = {}", t.value)),
        Err(e) => verdict(false, e.to_string()),
    }
}

pub fn assumption_falsification() -> Verdict {
    let cfg = config();
    let exp = cfg.experiment().unwrap();
    let domains = cfg.sample_domains().unwrap();
    let check = |cert: &lyapcert::LyapunovCertificate| {
        lyapcert::check_dissipation(
            cert,
            exp.system.as_ref(),
            &exp.observer,
            &domains,
            DISSIPATION_SAMPLES,
            0,
            DISSIPATION_SLACK,
        )
        .unwrap()
    };
    let nominal = check(&exp.certificate);
    let forced = check(&exp.certificate.with_eta(FORCED_ETA).unwrap());
    verdict(
        nominal.violations == 0 && forced.violations > 0,
        format!(
            "eta = {}: {} violations (worst margin {:.3e}); eta = {FORCED_ETA}: {} violations",
            exp.certificate.eta(),
            nominal.violations,
            nominal.worst_margin,
            forced.violations
        ),
    )
}

pub fn guarantee_sweep() -> Verdict {
    let sc = scenario();
    let mut runs = 0;
    let (mut th, mut lm, mut cd) = (0, 0, 0);
    for (_, base) in sweep_configs() {
        for budget in ITERATIONS {
            let mut exp = base.clone();
            exp.estimator.budget = budget;
            let s = harness::run_batch(&exp, &sc, SEEDS as usize).unwrap();
            runs += s.replicates;
            th += s.theorem1_violations;
            lm += s.lemma1_violations;
            cd += s.cost_decrease_violations;
        }
    }
    verdict(
        th + lm + cd == 0,
        format!("{runs} runs: M-step {th}, candidate bound {lm}, cost decrease {cd} violations"),
    )
}

pub fn sse_reproduction() -> Verdict {
    let sc = scenario();
    let mean = |budget| {
        let exp = experiment(1e-3, 128, CandidateMode::Simple, budget);
        harness::run_batch(&exp, &sc, SEEDS as usize).unwrap().mean_sse
    };
    let i0 = mean(IterationBudget::Fixed(0));
    let i1 = mean(IterationBudget::Fixed(1));
    let conv = mean(IterationBudget::Converged);
    let ratio = i0 / i1;
    let in_band = |x: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&x);
    let checks = [
        in_band(i0, SSE_I0_BAND),
        in_band(i1, SSE_I1_BAND),
        ratio >= SSE_MIN_RATIO,
        conv <= SSE_CONVERGED_FACTOR * i1,
    ];
    verdict(
        checks.iter().all(|c| *c),
        format!(
            "SSE i=0 {i0:.3} [{}], i=1 {i1:.3} [{}], ratio {ratio:.3} [{}], converged {conv:.3} [{}]",
            ok(checks[0]),
            ok(checks[1]),
            ok(checks[2]),
            ok(checks[3])
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "out of range"
    }
}

pub fn observer_equivalence() -> Verdict {
    let sc = scenario();
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for (name, mut exp) in sweep_configs() {
        exp.estimator.budget = IterationBudget::Fixed(0);
        for seed in 0..SEEDS {
            let trace = harness::run_closed_loop(&exp, &sc.with_seed(seed)).unwrap();
            let mut z = sc.xhat0.clone();
            for t in 0..trace.len() {
                compared += 1;
                if trace.xhat[t].as_slice() != z.as_slice() {
                    mismatches.push(format!("{name} seed {seed} t {t}"));
                    break;
                }
                z = exp.observer.step(t, &z, trace.input(t), &trace.y[t]).unwrap();
            }
        }
    }
    verdict(
        mismatches.is_empty(),
        format!(
            "{compared} estimates compared, {} runs differ{}",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    )
}

pub fn jacobian_correctness() -> Verdict {
    let exp = experiment(1e-3, 128, CandidateMode::Simple, IterationBudget::Fixed(1));
    let trace = harness::run_closed_loop(&exp, &scenario()).unwrap();
    let cert = &exp.certificate;
    let scale = exp.estimator.stage_scale(cert).unwrap();
    let w_sqrt = linalg::sym_sqrt(&exp.estimator.w).unwrap();
    let g_sqrt = linalg::sym_sqrt(&exp.estimator.g).unwrap();
    let sample_box = BoxSet::new(vec![0.1, 0.0], vec![6.0, 5.0]).unwrap();
    let rng = CounterRng::new(7);
    let mut worst: f64 = 0.0;
    for k in 0..JACOBIAN_WINDOWS {
        let form = if k % 2 == 0 { Form::Filtering } else { Form::Prediction };
        let steps = 1 + (rng.bits(0, k) % 60) as usize;
        let start = (rng.bits(1, k) % (trace.len() - steps - 1) as u64) as usize;
        let stages = form.stage_count(steps);
        let window = Window::new(
            start,
            steps,
            form,
            (start..start + stages).map(|t| trace.input(t).clone()).collect(),
            trace.y[start..start + stages].to_vec(),
        )
        .unwrap();
        let prior = trace.xhat[start].clone();
        let pb = WindowProblem {
            system: exp.system.as_ref(),
            obs: &exp.observer,
            window: &window,
            prior: &prior,
            w_sqrt: &w_sqrt,
            g_sqrt: &g_sqrt,
            scale,
            eta: cert.eta(),
        };
        let x = rng.sample_box(&sample_box, 2, 2 * k);
        let x = DVector::from_vec(vec![x[0].clamp(0.2, 5.9), x[1]]);
        let jac = mhe::jacobian_rollout(&pb, &x).unwrap();
        let mut fd = DMatrix::zeros(jac.nrows(), jac.ncols());
        for c in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += JACOBIAN_FD_STEP;
            xm[c] -= JACOBIAN_FD_STEP;
            let col = (residual(&pb, &xp) - residual(&pb, &xm)) / (2.0 * JACOBIAN_FD_STEP);
            fd.set_column(c, &col);
        }
        let err = (&jac - &fd).norm() / fd.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(err);
    }
    verdict(
        worst < JACOBIAN_RTOL,
        format!("{JACOBIAN_WINDOWS} windows, worst relative error {worst:.3e}"),
    )
}

fn residual(pb: &WindowProblem<'_>, x: &DVector<f64>) -> DVector<f64> {
    use smhe_core::mhe::LeastSquares;
    pb.residual(x).unwrap()
}

pub fn gamma_asymptotics() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for a in [1e2, 1e-3] {
        let p = params(a);
        let (g1, g2, g3) = (p.gamma1(GAMMA_AT), p.gamma2(GAMMA_AT), p.gamma3(GAMMA_AT).unwrap());
        let band = 1.0..=1.0 + GAMMA_BAND;
        pass &= band.contains(&g2) && band.contains(&g3) && g1 < GAMMA1_MAX;
        lines.push(format!("a={a:e}: g1 {g1:.3e}, g2 {g2:.9}, g3 {g3:.9}"));
    }
    verdict(pass, lines.join("; "))
}

pub fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, CONFIG).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = smhe_cli::run([
            "smhe",
            "simulate",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        std::fs::read(out).unwrap()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    verdict(a == b && !a.is_empty(), format!("{} and {} bytes", a.len(), b.len()))
}

pub fn noiseless_convergence() -> Verdict {
    let mut sc = scenario();
    sc.w_box = BoxSet::symmetric(&[0.0, 0.0]).unwrap();
    sc.v_box = BoxSet::symmetric(&[0.0]).unwrap();
    sc.xhat0 = sc.x0.clone();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for (_, base) in sweep_configs() {
        for budget in ITERATIONS.into_iter().chain([IterationBudget::Converged]) {
            let mut exp = base.clone();
            exp.estimator.budget = budget;
            let trace = harness::run_closed_loop(&exp, &sc).unwrap();
            worst = worst.max(harness::sse(&trace));
            runs += 1;
        }
    }
    verdict(worst == 0.0, format!("{runs} runs, largest SSE {worst:e}"))
}

pub struct Criterion {
    pub name: &'static str,
    pub limit: Duration,
    pub check: fn() -> Verdict,
}

/// All criteria in their numbered order.
pub fn criteria() -> Vec<Criterion> {
    let c = |name, secs, check| Criterion {
        name,
        limit: Duration::from_secs(secs),
        check,
    };
    vec![
        c("horizon certification", 1, horizon_certification),
        c("T certification", 1, t_certification),
        c("assumption falsification", 30, assumption_falsification),
        c("guarantee sweep", 600, guarantee_sweep),
        c("benchmark SSE", 600, sse_reproduction),
        c("observer equivalence", 60, observer_equivalence),
        c("Jacobian correctness", 60, jacobian_correctness),
        c("gamma asymptotics", 1, gamma_asymptotics),
        c("determinism", 60, determinism),
        c("noiseless convergence", 60, noiseless_convergence),
    ]
}
