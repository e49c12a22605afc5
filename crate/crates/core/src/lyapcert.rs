//! δ-Lyapunov certificate of the auxiliary observer, the γ-functions bounding
//! the suboptimal estimator, horizon search, and trace-level checks of the
//! resulting inequalities.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::harness::SimTrace;
use crate::linalg;
use crate::mhe::{CandidateMode, Form, MheConfig};
use crate::model::{AuxObserver, BoxSet, System};
use crate::rng::CounterRng;

/// Default upper limit of the horizon scans.
pub const DEFAULT_SCAN_CAP: usize = 100_000;
/// Number of horizons past the first hit that must also satisfy the condition.
pub const VERIFY_WINDOW: usize = 200;
/// Relative round-off allowance when comparing both sides of a trace inequality.
pub const TRACE_RTOL: f64 = 1e-12;

pub type Evaluator = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;

/// `V_o` with sandwich bounds `P1`, `P2`, contraction rate `η` and
/// disturbance gains `Q`, `R`.
#[derive(Clone)]
pub struct LyapunovCertificate {
    p1: DMatrix<f64>,
    p2: DMatrix<f64>,
    eta: f64,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    quadratic: Option<DMatrix<f64>>,
    evaluator: Option<Evaluator>,
}

impl fmt::Debug for LyapunovCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovCertificate")
            .field("p1", &self.p1)
            .field("p2", &self.p2)
            .field("eta", &self.eta)
            .field("q", &self.q)
            .field("r", &self.r)
            .field("quadratic", &self.quadratic.is_some())
            .field("evaluator", &self.evaluator.is_some())
            .finish()
    }
}

impl LyapunovCertificate {
    /// `V_o(z, x) = ‖z − x‖²_P`, hence `P1 = P2 = P`.
    pub fn quadratic(p: DMatrix<f64>, eta: f64, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let mut cert = Self::with_bounds(p.clone(), p.clone(), eta, q, r)?;
        cert.quadratic = Some(p);
        Ok(cert)
    }

    /// A certificate known only through its sandwich bounds; `v_o` needs an
    /// evaluator (see [`with_evaluator`](Self::with_evaluator)).
    pub fn with_bounds(
        p1: DMatrix<f64>,
        p2: DMatrix<f64>,
        eta: f64,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        for (name, m) in [("P1", &p1), ("P2", &p2)] {
            linalg::ensure_symmetric(m, name)?;
            if !linalg::is_positive_definite(m) {
                return Err(Error::Matrix(format!("{name} must be positive definite")));
            }
        }
        check_dim("P2", p1.nrows(), p2.nrows())?;
        for (name, m) in [("Q", &q), ("R", &r)] {
            linalg::ensure_symmetric(m, name)?;
            if !linalg::is_positive_semidefinite(m) {
                return Err(Error::Matrix(format!("{name} must be positive semidefinite")));
            }
        }
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::Parameter(format!("eta must lie in [0, 1), got {eta}")));
        }
        Ok(Self {
            p1,
            p2,
            eta,
            q,
            r,
            quadratic: None,
            evaluator: None,
        })
    }

    pub fn with_evaluator(mut self, evaluator: Evaluator) -> Self {
        self.evaluator = Some(evaluator);
        self
    }

    /// Same certificate with another contraction rate.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::Parameter(format!("eta must lie in [0, 1), got {eta}")));
        }
        let mut c = self.clone();
        c.eta = eta;
        Ok(c)
    }

    pub fn p1(&self) -> &DMatrix<f64> {
        &self.p1
    }

    pub fn p2(&self) -> &DMatrix<f64> {
        &self.p2
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn quadratic_p(&self) -> Option<&DMatrix<f64>> {
        self.quadratic.as_ref()
    }

    pub fn v_o(&self, z: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        if let Some(f) = &self.evaluator {
            return Ok(f(z, x));
        }
        let p = self.quadratic.as_ref().ok_or(Error::UnsupportedCertificate)?;
        check_dim("V_o first argument", p.nrows(), z.len())?;
        check_dim("V_o second argument", p.nrows(), x.len())?;
        Ok(linalg::quad_form(p, &(z - x)))
    }

    fn w_norm(&self, w: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.q, w)
    }

    fn v_norm(&self, v: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.r, v)
    }
}

/// Sampling boxes for the falsification test of the dissipation inequality.
#[derive(Clone, Debug)]
pub struct SampleDomains {
    pub z: BoxSet,
    pub x: BoxSet,
    pub u: BoxSet,
    pub w: BoxSet,
    pub v: BoxSet,
}

#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub index: usize,
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DissipationReport {
    pub samples: usize,
    pub violations: usize,
    pub worst_margin: f64,
    pub slack: f64,
    pub witnesses: Vec<Witness>,
}

const MAX_WITNESSES: usize = 10;

/// `V_o(g(z,u,h(x,u,v)), f(x,u,w)) − η V_o(z,x) − ‖w‖²_Q − ‖v‖²_R`.
pub fn dissipation_margin(
    cert: &LyapunovCertificate,
    model: &dyn System,
    obs: &AuxObserver,
    z: &DVector<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<f64> {
    let y = crate::model::output(model, x, u, v)?;
    let z_next = obs.step(0, z, u, &y)?;
    let x_next = crate::model::step_system(model, x, u, w)?;
    Ok(cert.v_o(&z_next, &x_next)? - cert.eta() * cert.v_o(z, x)? - cert.w_norm(w) - cert.v_norm(v))
}

/// Samples `(z, x, u, w, v)` uniformly from `domains` and reports every
/// tuple whose dissipation margin exceeds `slack`. Zero violations means the
/// inequality was not falsified; it is not a proof.
pub fn check_dissipation(
    cert: &LyapunovCertificate,
    model: &dyn System,
    obs: &AuxObserver,
    domains: &SampleDomains,
    sample_count: usize,
    seed: u64,
    slack: f64,
) -> Result<DissipationReport> {
    if slack.is_nan() || slack < 0.0 {
        return Err(Error::Parameter(format!("slack must be nonnegative, got {slack}")));
    }
    if sample_count == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    for (name, b) in [
        ("z", &domains.z),
        ("x", &domains.x),
        ("u", &domains.u),
        ("w", &domains.w),
        ("v", &domains.v),
    ] {
        if !b.is_finite() {
            return Err(Error::Config(format!("sampling box for {name} must be finite")));
        }
    }
    let rng = CounterRng::new(seed);
    let margins: Vec<(usize, f64, [DVector<f64>; 5])> = (0..sample_count)
        .into_par_iter()
        .map(|i| {
            let i64 = i as u64;
            let z = rng.sample_box(&domains.z, 0, i64 * domains.z.dim() as u64);
            let x = rng.sample_box(&domains.x, 1, i64 * domains.x.dim() as u64);
            let u = rng.sample_box(&domains.u, 2, i64 * domains.u.dim() as u64);
            let w = rng.sample_box(&domains.w, 3, i64 * domains.w.dim() as u64);
            let v = rng.sample_box(&domains.v, 4, i64 * domains.v.dim() as u64);
            let m = dissipation_margin(cert, model, obs, &z, &x, &u, &w, &v)?;
            Ok((i, m, [z, x, u, w, v]))
        })
        .collect::<Result<_>>()?;

    let mut worst = f64::NEG_INFINITY;
    let mut bad: Vec<&(usize, f64, [DVector<f64>; 5])> = Vec::new();
    for entry in &margins {
        worst = worst.max(entry.1);
        if entry.1 > slack {
            bad.push(entry);
        }
    }
    let violations = bad.len();
    bad.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let witnesses = bad
        .into_iter()
        .take(MAX_WITNESSES)
        .map(|(i, m, [z, x, u, w, v])| Witness {
            index: *i,
            z: z.as_slice().to_vec(),
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            w: w.as_slice().to_vec(),
            v: v.as_slice().to_vec(),
            margin: *m,
        })
        .collect();
    Ok(DissipationReport {
        samples: sample_count,
        violations,
        worst_margin: worst,
        slack,
        witnesses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaKind {
    One,
    Two,
    Three,
}

/// Whether the constant term of `γ̄2`, `γ̄3` is `1` or, for the
/// re-initialized candidate, `2 λ_max(P2, P1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaVariant {
    Standard,
    Reinit,
}

/// The scalars entering the γ-functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GammaParams {
    pub lam_p2_p1: f64,
    pub lam_p2_w: f64,
    pub lam_min_p1: f64,
    pub lam_min_r: f64,
    pub eta: f64,
}

impl GammaParams {
    pub fn from_certificate(cert: &LyapunovCertificate, w: &DMatrix<f64>) -> Result<Self> {
        if !linalg::is_positive_definite(w) {
            return Err(Error::Matrix(
                "prior weight W must be positive definite for λ_max(P2, W)".into(),
            ));
        }
        Ok(Self {
            lam_p2_p1: linalg::generalized_eig_max(cert.p2(), cert.p1())?,
            lam_p2_w: linalg::generalized_eig_max(cert.p2(), w)?,
            lam_min_p1: linalg::lambda_min(cert.p1())?,
            lam_min_r: linalg::lambda_min(cert.r())?.max(0.0),
            eta: cert.eta(),
        })
    }

    fn constant(&self, variant: GammaVariant) -> f64 {
        match variant {
            GammaVariant::Standard => 1.0,
            GammaVariant::Reinit => 2.0 * self.lam_p2_p1,
        }
    }

    /// `γ̄1(k,r,s) = 2 λ_max(P2,P1) η^s + λ_max(P2,W) k η^(r+s)`.
    pub fn gamma_bar1(&self, k: f64, r: f64, s: f64) -> f64 {
        2.0 * self.lam_p2_p1 * self.eta.powf(s) + self.lam_p2_w * k * self.eta.powf(r + s)
    }

    /// `γ̄2(k,r) = c + λ_max(P2,W) k η^r`.
    pub fn gamma_bar2(&self, k: f64, r: f64, variant: GammaVariant) -> f64 {
        self.constant(variant) + self.lam_p2_w * k * self.eta.powf(r)
    }

    /// `γ̄3(k,r) = c + λ_max(P2,W)(η λ_min(P1)/λ_min(R) + k) η^r`.
    pub fn gamma_bar3(&self, k: f64, r: f64, variant: GammaVariant) -> Result<f64> {
        if self.lam_min_r <= 0.0 {
            return Err(Error::DivisionByZero(
                "λ_min(R) in the coefficient η·λ_min(P1)/λ_min(R) of γ̄3",
            ));
        }
        Ok(self.constant(variant)
            + self.lam_p2_w * (self.eta * self.lam_min_p1 / self.lam_min_r + k) * self.eta.powf(r))
    }

    pub fn eval(&self, kind: GammaKind, k: f64, r: f64, s: f64, variant: GammaVariant) -> Result<f64> {
        if k < 0.0 || r < 0.0 || s < 0.0 || k.is_nan() || r.is_nan() || s.is_nan() {
            return Err(Error::Parameter(format!(
                "γ arguments must be nonnegative, got ({k}, {r}, {s})"
            )));
        }
        match kind {
            GammaKind::One => Ok(self.gamma_bar1(k, r, s)),
            GammaKind::Two => Ok(self.gamma_bar2(k, r, variant)),
            GammaKind::Three => self.gamma_bar3(k, r, variant),
        }
    }

    pub fn gamma1(&self, m: f64) -> f64 {
        self.gamma_bar1(m, m, m)
    }

    pub fn gamma2(&self, m: f64) -> f64 {
        self.gamma_bar2(m, m, GammaVariant::Standard)
    }

    pub fn gamma3(&self, m: f64) -> Result<f64> {
        self.gamma_bar3(m, m, GammaVariant::Standard)
    }

    /// Contraction factor for horizon `m` and re-initialization depth `s`.
    pub fn contraction(&self, form: Form, m: usize, s: usize) -> f64 {
        self.gamma_bar1(form.stage_count(m) as f64, m as f64, s as f64)
    }

    /// Disturbance gains `(γ2, γ3)` of the given form; in filtering form the
    /// `γ3` value already contains the division by `η`.
    pub fn disturbance_gains(&self, form: Form, m: usize, variant: GammaVariant) -> Result<(f64, f64)> {
        let k = form.stage_count(m) as f64;
        let g2 = self.gamma_bar2(k, m as f64, variant);
        let g3 = self.gamma_bar3(k, m as f64, variant)?;
        let g3 = match form {
            Form::Prediction => g3,
            Form::Filtering => g3 / self.eta,
        };
        Ok((g2, g3))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HorizonCertificate {
    pub value: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub scan_cap: usize,
}

fn scan_min(lo: usize, cap: usize, holds: impl Fn(usize) -> bool, at_cap: f64) -> Result<usize> {
    let mut m = lo;
    'scan: while m <= cap {
        if !holds(m) {
            m += 1;
            continue;
        }
        for later in m + 1..=m + VERIFY_WINDOW {
            if !holds(later) {
                m = later + 1;
                continue 'scan;
            }
        }
        return Ok(m);
    }
    Err(Error::CertificationFailure {
        cap,
        value_at_cap: at_cap,
    })
}

/// Smallest `M ≥ 1` with `γ1(M) < 1` (prediction) or `γ̄1(M+1, M, M) < 1`
/// (filtering), confirmed on the next [`VERIFY_WINDOW`] horizons.
pub fn min_horizon(params: &GammaParams, form: Form, cap: usize) -> Result<HorizonCertificate> {
    if cap < 1 {
        return Err(Error::Parameter("scan cap must be at least 1".into()));
    }
    let m = scan_min(
        1,
        cap,
        |m| params.contraction(form, m, m) < 1.0,
        params.contraction(form, cap, cap),
    )?;
    let (gamma2, gamma3) = params.disturbance_gains(form, m, GammaVariant::Standard)?;
    Ok(HorizonCertificate {
        value: m,
        gamma1: params.contraction(form, m, m),
        gamma2,
        gamma3,
        scan_cap: cap,
    })
}

/// Smallest `T ≥ M` with `γ̄1(M, M, T) < 1` (prediction) or
/// `γ̄1(M+1, M, T) < 1` (filtering), confirmed like [`min_horizon`].
pub fn min_t(params: &GammaParams, m: usize, form: Form, cap: usize) -> Result<HorizonCertificate> {
    if m < 1 {
        return Err(Error::Parameter("M must be at least 1".into()));
    }
    if cap < m {
        return Err(Error::Parameter(format!("scan cap {cap} is below M = {m}")));
    }
    let t = scan_min(
        m,
        cap,
        |t| params.contraction(form, m, t) < 1.0,
        params.contraction(form, m, cap),
    )?;
    let (gamma2, gamma3) = params.disturbance_gains(form, m, GammaVariant::Reinit)?;
    Ok(HorizonCertificate {
        value: t,
        gamma1: params.contraction(form, m, t),
        gamma2,
        gamma3,
        scan_cap: cap,
    })
}

/// Which estimator produced a trace; determines the bounds being checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceSetup {
    pub form: Form,
    pub horizon: usize,
    pub candidate: CandidateMode,
}

impl From<&MheConfig> for TraceSetup {
    fn from(cfg: &MheConfig) -> Self {
        Self {
            form: cfg.form,
            horizon: cfg.horizon,
            candidate: cfg.candidate_mode,
        }
    }
}

impl TraceSetup {
    fn horizon_at(&self, t: usize) -> usize {
        t.min(self.horizon)
    }

    /// Depth of the window anchor: `M_t`, or `T_t` for the re-initialized candidate.
    fn anchor_depth(&self, t: usize) -> usize {
        match self.candidate {
            CandidateMode::Simple => self.horizon_at(t),
            CandidateMode::Reinit { depth } => t.min(depth),
        }
    }

    fn variant(&self) -> GammaVariant {
        match self.candidate {
            CandidateMode::Simple => GammaVariant::Standard,
            CandidateMode::Reinit { .. } => GammaVariant::Reinit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct InequalityReport {
    pub checked: usize,
    pub violations: Vec<Violation>,
    /// Largest `lhs − rhs` over the trace (negative when every step has slack).
    pub worst_margin: f64,
}

impl InequalityReport {
    fn new() -> Self {
        Self {
            checked: 0,
            violations: Vec::new(),
            worst_margin: f64::NEG_INFINITY,
        }
    }

    fn record(&mut self, t: usize, lhs: f64, rhs: f64, rtol: f64) {
        self.checked += 1;
        self.worst_margin = self.worst_margin.max(lhs - rhs);
        if lhs > rhs + rtol * rhs.abs().max(lhs.abs()) {
            self.violations.push(Violation { t, lhs, rhs });
        }
    }

    pub fn count(&self) -> usize {
        self.violations.len()
    }
}

fn check_trace_schema(trace: &SimTrace, setup: &TraceSetup) -> Result<()> {
    let n = trace.len();
    for (name, len) in [
        ("x", trace.x.len()),
        ("w", trace.w.len()),
        ("v", trace.v.len()),
        ("y", trace.y.len()),
        ("xhat", trace.xhat.len()),
        ("J", trace.cost.len()),
        ("Jtilde", trace.candidate_cost.len()),
        ("Mt", trace.horizon.len()),
    ] {
        if len != n {
            return Err(Error::TraceSchema(format!(
                "column {name} has {len} entries, expected {n}"
            )));
        }
    }
    for (t, &mt) in trace.horizon.iter().enumerate() {
        if mt != setup.horizon_at(t) {
            return Err(Error::TraceSchema(format!(
                "Mt at t={t} is {mt}, expected min(t, M) = {}",
                setup.horizon_at(t)
            )));
        }
    }
    Ok(())
}

/// Estimate the window anchored at time `t − depth` starts from; at `t = 0`
/// this is the initial guess.
fn anchor_estimate(trace: &SimTrace, t: usize, depth: usize) -> &DVector<f64> {
    if t == 0 {
        &trace.initial_guess
    } else {
        &trace.xhat[t - depth]
    }
}

fn discounted_sum(eta: f64, from: usize, to: usize, term: impl Fn(usize) -> f64) -> f64 {
    (from..=to).map(|j| eta.powi(j as i32 - 1) * term(j)).sum()
}

/// Checks the M-step Lyapunov decrease of the published estimates:
/// `V_o(x̂_t, x_t) ≤ γ̄1 V_o(x̂_{t−N}, x_{t−N}) + Σ η^{j−1}(γ̄2 ‖w_{t−j}‖²_Q + γ̄3 ‖v_{t−j}‖²_R)`
/// with `N = M_t` (or `T_t` for the re-initialized candidate) and the
/// filtering-form substitutions `k = M_t + 1`, `γ̄3/η` and the extra `v_t` term.
pub fn check_mstep_decrease(
    trace: &SimTrace,
    cert: &LyapunovCertificate,
    params: &GammaParams,
    setup: &TraceSetup,
) -> Result<InequalityReport> {
    check_trace_schema(trace, setup)?;
    let eta = params.eta;
    let mut report = InequalityReport::new();
    for t in 0..trace.len() {
        let m = setup.horizon_at(t);
        let depth = setup.anchor_depth(t);
        let gamma1 = params.contraction(setup.form, m, depth);
        let (gamma2, gamma3) = params.disturbance_gains(setup.form, m, setup.variant())?;
        let prior = cert.v_o(anchor_estimate(trace, t, depth), &trace.x[t - depth])?;
        let w_sum = discounted_sum(eta, 1, depth, |j| cert.w_norm(&trace.w[t - j]));
        let v_first = match setup.form {
            Form::Prediction => 1,
            Form::Filtering => 0,
        };
        let v_sum = discounted_sum(eta, v_first, depth, |j| cert.v_norm(&trace.v[t - j]));
        let rhs = gamma1 * prior + gamma2 * w_sum + gamma3 * v_sum;
        let lhs = cert.v_o(&trace.xhat[t], &trace.x[t])?;
        report.record(t, lhs, rhs, TRACE_RTOL);
    }
    Ok(report)
}

/// The candidate `x̃_{t−M_t|t}` the estimator had to beat at time `t`.
pub fn reconstruct_candidate(
    trace: &SimTrace,
    setup: &TraceSetup,
    obs: Option<&AuxObserver>,
    t: usize,
) -> Result<DVector<f64>> {
    let m = setup.horizon_at(t);
    match setup.candidate {
        CandidateMode::Simple => Ok(anchor_estimate(trace, t, m).clone()),
        CandidateMode::Reinit { .. } => {
            let obs = obs.ok_or_else(|| {
                Error::Config("re-initialized candidate needs the auxiliary observer".into())
            })?;
            let depth = setup.anchor_depth(t);
            let mut z = anchor_estimate(trace, t, depth).clone();
            for j in t - depth..t - m {
                z = obs.step(j, &z, trace.input(j), &trace.y[j])?;
            }
            Ok(z)
        }
    }
}

/// Checks the candidate-cost bound
/// `J̃_t ≤ k η^{M_t} V_o(x̃, x_{t−M_t}) + k Σ_{j=1}^{M_t} η^{j−1}(‖w_{t−j}‖²_Q + ‖v_{t−j}‖²_R)
///        + (η λ_min(P1)/λ_min(R)) Σ_{j=j0}^{M_t} η^{j−1} ‖v_{t−j}‖²_R`
/// with `k = M_t`, `j0 = 1` (prediction) or `k = M_t + 1`, `j0 = 0` (filtering).
pub fn check_lemma1(
    trace: &SimTrace,
    cert: &LyapunovCertificate,
    params: &GammaParams,
    setup: &TraceSetup,
    obs: Option<&AuxObserver>,
) -> Result<InequalityReport> {
    check_trace_schema(trace, setup)?;
    if params.lam_min_r <= 0.0 {
        return Err(Error::DivisionByZero(
            "λ_min(R) in the coefficient η·λ_min(P1)/λ_min(R) of the candidate-cost bound",
        ));
    }
    let eta = params.eta;
    let coeff = eta * params.lam_min_p1 / params.lam_min_r;
    let mut report = InequalityReport::new();
    for t in 0..trace.len() {
        let m = setup.horizon_at(t);
        let k = setup.form.stage_count(m) as f64;
        let cand = reconstruct_candidate(trace, setup, obs, t)?;
        let v_cand = cert.v_o(&cand, &trace.x[t - m])?;
        let dist = discounted_sum(eta, 1, m, |j| {
            cert.w_norm(&trace.w[t - j]) + cert.v_norm(&trace.v[t - j])
        });
        let v_first = match setup.form {
            Form::Prediction => 1,
            Form::Filtering => 0,
        };
        let noise = discounted_sum(eta, v_first, m, |j| cert.v_norm(&trace.v[t - j]));
        let rhs = k * eta.powi(m as i32) * v_cand + k * dist + coeff * noise;
        report.record(t, trace.candidate_cost[t], rhs, TRACE_RTOL);
    }
    Ok(report)
}

/// `J_t ≤ J̃_t` at every step, compared without tolerance.
pub fn check_cost_decrease(trace: &SimTrace) -> InequalityReport {
    let mut report = InequalityReport::new();
    for t in 0..trace.len().min(trace.cost.len()).min(trace.candidate_cost.len()) {
        report.record(t, trace.cost[t], trace.candidate_cost[t], 0.0);
    }
    report
}

/// Candidate RGES constants `C1..C3`, `λ1..λ3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RgesConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RgesReport {
    pub max_form: InequalityReport,
    pub sum_form: InequalityReport,
    /// Smallest common factor on `C1..C3` making the max form hold along the trace.
    pub required_scale_max: f64,
    pub required_scale_sum: f64,
}

/// Checks `‖x_t − x̂_t‖` against the RGES envelope in max and sum form.
pub fn check_rges_envelope(trace: &SimTrace, k: &RgesConstants) -> Result<RgesReport> {
    for (name, l) in [("lambda1", k.lambda1), ("lambda2", k.lambda2), ("lambda3", k.lambda3)] {
        if !(0.0..1.0).contains(&l) {
            return Err(Error::Parameter(format!("{name} must lie in [0, 1), got {l}")));
        }
    }
    let mut max_form = InequalityReport::new();
    let mut sum_form = InequalityReport::new();
    let mut scale_max: f64 = 0.0;
    let mut scale_sum: f64 = 0.0;
    if trace.is_empty() {
        return Ok(RgesReport {
            max_form,
            sum_form,
            required_scale_max: 0.0,
            required_scale_sum: 0.0,
        });
    }
    let e0 = (&trace.x[0] - &trace.xhat[0]).norm();
    for t in 0..trace.len() {
        let lhs = (&trace.x[t] - &trace.xhat[t]).norm();
        let init = k.c1 * k.lambda1.powi(t as i32) * e0;
        let (mut w_max, mut w_sum, mut v_max, mut v_sum) = (0.0f64, 0.0, 0.0f64, 0.0);
        for j in 0..t {
            let age = (t - j - 1) as i32;
            let wj = k.c2 * k.lambda2.powi(age) * trace.w[j].norm();
            let vj = k.c3 * k.lambda3.powi(age) * trace.v[j].norm();
            w_max = w_max.max(wj);
            v_max = v_max.max(vj);
            w_sum += wj;
            v_sum += vj;
        }
        let rhs_max = init.max(w_max).max(v_max);
        let rhs_sum = init + w_sum + v_sum;
        max_form.record(t, lhs, rhs_max, TRACE_RTOL);
        sum_form.record(t, lhs, rhs_sum, TRACE_RTOL);
        scale_max = scale_max.max(required(lhs, rhs_max));
        scale_sum = scale_sum.max(required(lhs, rhs_sum));
    }
    Ok(RgesReport {
        max_form,
        sum_form,
        required_scale_max: scale_max,
        required_scale_sum: scale_sum,
    })
}

fn required(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 {
        0.0
    } else if rhs == 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Projection, ReactorBenchmark};
    use approx::assert_relative_eq;

    fn benchmark_p() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.537, 1.380, 1.380, 1.254])
    }

    fn benchmark_cert() -> LyapunovCertificate {
        LyapunovCertificate::quadratic(
            benchmark_p(),
            0.955,
            DMatrix::identity(2, 2) * 1e3,
            DMatrix::from_element(1, 1, 100.0),
        )
        .unwrap()
    }

    fn params(a: f64) -> GammaParams {
        GammaParams::from_certificate(&benchmark_cert(), &(benchmark_p() * a)).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn v_o_examples() {
        let c = benchmark_cert();
        assert_eq!(c.v_o(&v(&[2.0, 3.0]), &v(&[2.0, 3.0])).unwrap(), 0.0);
        assert_eq!(c.v_o(&v(&[1.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), 1.537);
        assert_eq!(c.v_o(&v(&[0.0, 1.0]), &v(&[0.0, 0.0])).unwrap(), 1.254);
    }

    #[test]
    fn non_quadratic_certificate_needs_evaluator() {
        let c = LyapunovCertificate::with_bounds(
            benchmark_p(),
            benchmark_p() * 2.0,
            0.9,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!(matches!(
            c.v_o(&v(&[1.0, 0.0]), &v(&[0.0, 0.0])),
            Err(Error::UnsupportedCertificate)
        ));
        let c = c.with_evaluator(Arc::new(|z, x| (z - x).norm_squared() * 3.0));
        assert_eq!(c.v_o(&v(&[1.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), 3.0);
    }

    #[test]
    fn certificate_validation() {
        let bad_eta = LyapunovCertificate::quadratic(
            benchmark_p(),
            1.0,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
        );
        assert!(matches!(bad_eta, Err(Error::Parameter(_))));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(LyapunovCertificate::quadratic(
            indefinite,
            0.5,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1)
        )
        .is_err());
    }

    #[test]
    fn gamma2_with_zero_k_is_one() {
        let p = params(1e-3);
        assert_eq!(p.eval(GammaKind::Two, 0.0, 7.0, 0.0, GammaVariant::Standard).unwrap(), 1.0);
    }

    #[test]
    fn gamma1_is_the_literal_formula() {
        let p = params(1e2);
        for (k, r, s) in [(17.0, 16.0, 16.0), (4.0, 3.0, 178.0), (0.5, 2.5, 1.25)] {
            let direct = 2.0 * p.lam_p2_p1 * 0.955f64.powf(s) + p.lam_p2_w * k * 0.955f64.powf(r + s);
            assert_eq!(p.gamma_bar1(k, r, s), direct);
        }
    }

    #[test]
    fn filtering_boundary_for_a_1e2() {
        let p = params(1e2);
        assert!(p.gamma_bar1(17.0, 16.0, 16.0) < 1.0);
        assert!(p.gamma_bar1(16.0, 15.0, 15.0) >= 1.0);
    }

    #[test]
    fn gamma3_with_singular_r_is_division_by_zero() {
        let cert = LyapunovCertificate::quadratic(
            benchmark_p(),
            0.955,
            DMatrix::identity(2, 2),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let p = GammaParams::from_certificate(&cert, &benchmark_p()).unwrap();
        assert!(matches!(p.gamma3(10.0), Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn benchmark_horizons() {
        assert_eq!(min_horizon(&params(1e2), Form::Filtering, DEFAULT_SCAN_CAP).unwrap().value, 16);
        assert_eq!(min_horizon(&params(1e-3), Form::Filtering, DEFAULT_SCAN_CAP).unwrap().value, 128);
        assert_eq!(min_t(&params(1e-3), 3, Form::Filtering, DEFAULT_SCAN_CAP).unwrap().value, 178);
    }

    #[test]
    fn min_horizon_is_tight() {
        for a in [1e2, 1.0, 1e-3] {
            for form in [Form::Prediction, Form::Filtering] {
                let p = params(a);
                let m = min_horizon(&p, form, DEFAULT_SCAN_CAP).unwrap().value;
                assert!(p.contraction(form, m, m) < 1.0);
                assert!(p.contraction(form, m - 1, m - 1) >= 1.0);
            }
        }
    }

    #[test]
    fn vanishing_prior_weight_term_limit() {
        // with λ_max(P2,W) → 0 only 2 λ_max(P2,P1) η^M < 1 remains
        let mut p = params(1.0);
        p.lam_p2_w = 0.0;
        let m = min_horizon(&p, Form::Prediction, DEFAULT_SCAN_CAP).unwrap().value;
        let oracle = (1..).find(|&m| 2.0 * p.lam_p2_p1 * 0.955f64.powi(m) < 1.0).unwrap();
        assert_eq!(m, oracle as usize);
    }

    #[test]
    fn min_t_at_min_horizon_is_min_horizon() {
        for form in [Form::Prediction, Form::Filtering] {
            let p = params(1e-3);
            let m = min_horizon(&p, form, DEFAULT_SCAN_CAP).unwrap().value;
            assert_eq!(min_t(&p, m, form, DEFAULT_SCAN_CAP).unwrap().value, m);
        }
    }

    #[test]
    fn cap_too_small_is_certification_failure() {
        match min_horizon(&params(1e-3), Form::Filtering, 50) {
            Err(Error::CertificationFailure { cap, value_at_cap }) => {
                assert_eq!(cap, 50);
                assert_relative_eq!(value_at_cap, params(1e-3).gamma_bar1(51.0, 50.0, 50.0));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(min_t(&params(1e-3), 3, Form::Filtering, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn scan_skips_a_dip_that_does_not_persist() {
        // condition holds at 5, fails again at 7, holds from 9 on
        let holds = |m: usize| m == 5 || m >= 9;
        assert_eq!(scan_min(1, 1000, holds, 0.0).unwrap(), 9);
    }

    #[test]
    fn gamma_tails_converge() {
        let p = params(1e-3);
        assert!(p.gamma1(1000.0) < 1e-10);
        for g in [p.gamma2(1000.0), p.gamma3(1000.0).unwrap()] {
            assert!((1.0..=1.0 + 1e-6).contains(&g), "{g}");
        }
        let m = min_horizon(&p, Form::Prediction, DEFAULT_SCAN_CAP).unwrap().value;
        for k in m..m + 1000 {
            let (a, b) = (k as f64, k as f64 + 1.0);
            assert!(p.gamma1(b) < p.gamma1(a));
            assert!(p.gamma2(b) <= p.gamma2(a));
            assert!(p.gamma3(b).unwrap() <= p.gamma3(a).unwrap());
            // past M ≈ 1000 the tail falls below one ulp of the constant 1
            let tail = |m: f64| p.lam_p2_w * m * 0.955f64.powf(m);
            assert!(tail(b) < tail(a));
        }
    }

    #[test]
    fn benchmark_dissipation_margin_is_nonpositive_at_zero_error() {
        let b = ReactorBenchmark::default();
        let sys = Arc::new(b.system().unwrap());
        let obs = b.observer(sys.clone(), Projection::Metric(benchmark_p())).unwrap();
        let cert = benchmark_cert();
        for x in [[3.0, 1.0], [0.5, 4.0], [5.9, 0.0]] {
            let x = v(&x);
            let m = dissipation_margin(&cert, sys.as_ref(), &obs, &x, &x, &v(&[]), &v(&[0.0, 0.0]), &v(&[0.0]))
                .unwrap();
            assert!(m <= 0.0, "{m}");
        }
    }

    fn benchmark_domains(b: &ReactorBenchmark, sys: &dyn System) -> SampleDomains {
        SampleDomains {
            z: BoxSet::new(
                vec![b.sample_box[0].0, b.sample_box[1].0],
                vec![b.sample_box[0].1, b.sample_box[1].1],
            )
            .unwrap(),
            x: sys.state_box().clone(),
            u: sys.input_box().clone(),
            w: sys.disturbance_box().clone(),
            v: sys.noise_box().clone(),
        }
    }

    #[test]
    fn zero_eta_is_falsified_and_infinite_slack_is_not() {
        let b = ReactorBenchmark::default();
        let sys = Arc::new(b.system().unwrap());
        let obs = b.observer(sys.clone(), Projection::Metric(benchmark_p())).unwrap();
        let d = benchmark_domains(&b, sys.as_ref());
        let cert = benchmark_cert().with_eta(0.0).unwrap();
        let r = check_dissipation(&cert, sys.as_ref(), &obs, &d, 2000, 1, 1e-9).unwrap();
        assert!(r.violations > 0);
        assert!(r.witnesses.len() <= MAX_WITNESSES);
        assert!(r.witnesses.windows(2).all(|w| w[0].margin >= w[1].margin));
        let r = check_dissipation(&cert, sys.as_ref(), &obs, &d, 2000, 1, f64::INFINITY).unwrap();
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn dissipation_rejects_unbounded_domain_and_negative_slack() {
        let b = ReactorBenchmark::default();
        let sys = Arc::new(b.system().unwrap());
        let obs = b.observer(sys.clone(), Projection::Euclidean).unwrap();
        let mut d = benchmark_domains(&b, sys.as_ref());
        let cert = benchmark_cert();
        assert!(matches!(
            check_dissipation(&cert, sys.as_ref(), &obs, &d, 10, 0, -1.0),
            Err(Error::Parameter(_))
        ));
        d.z = b.observer_domain().unwrap();
        assert!(matches!(
            check_dissipation(&cert, sys.as_ref(), &obs, &d, 10, 0, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dissipation_report_is_seed_deterministic() {
        let b = ReactorBenchmark::default();
        let sys = Arc::new(b.system().unwrap());
        let obs = b.observer(sys.clone(), Projection::Metric(benchmark_p())).unwrap();
        let d = benchmark_domains(&b, sys.as_ref());
        let cert = benchmark_cert().with_eta(0.5).unwrap();
        let a = check_dissipation(&cert, sys.as_ref(), &obs, &d, 500, 9, 0.0).unwrap();
        let c = check_dissipation(&cert, sys.as_ref(), &obs, &d, 500, 9, 0.0).unwrap();
        assert_eq!(a.violations, c.violations);
        assert_eq!(a.worst_margin, c.worst_margin);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn min_t_goes_to_zero_with_depth(m in 1usize..50, a in 1e-3..1e2f64) {
                let p = params(a);
                let at = |t: f64| p.gamma_bar1(m as f64 + 1.0, m as f64, t);
                prop_assert!(at(5000.0) < at(50.0));
                prop_assert!(at(5000.0) < 1e-50);
            }

            #[test]
            fn reinit_variant_only_changes_the_constant(k in 0.0..300.0f64, r in 0.0..300.0f64) {
                let p = params(1e-3);
                let d2 = p.gamma_bar2(k, r, GammaVariant::Reinit) - p.gamma_bar2(k, r, GammaVariant::Standard);
                prop_assert!((d2 - (2.0 * p.lam_p2_p1 - 1.0)).abs() < 1e-9);
            }
        }
    }
}
