//! Moving horizon estimation over the trajectory of the auxiliary observer.
//!
//! The only decision variable is the window-initial state `x̂_{t−M_t|t}`;
//! the rest of the window follows from the observer driven by the recorded
//! data. The cost is
//!
//! ```text
//! J_t(x) = 2‖x − prior‖²_W + c Σ_j η^j ‖ŷ_{t−j|t} − y_{t−j}‖²_G,   c = λ_min(P1) / (2 L_h² λ_max(G))
//! ```
//!
//! with `j = 1..M_t` in prediction form and `j = 0..M_t` in filtering form.
//! Any number of optimizer iterations is allowed as long as the result is not
//! worse than the candidate solution; otherwise the candidate is returned.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::lyapcert::LyapunovCertificate;
use crate::model::{AuxObserver, System};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    /// The window ends before the current measurement.
    Prediction,
    /// The window includes the current measurement `y_t`.
    Filtering,
}

impl Form {
    /// Number of output stages in a window with `m` observer steps.
    pub fn stage_count(self, m: usize) -> usize {
        match self {
            Form::Prediction => m,
            Form::Filtering => m + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateMode {
    /// `x̃_{t−M_t|t} = x̂_{t−M_t}`.
    Simple,
    /// Restart the observer at `x̂_{t−T_t}` and run it forward to `t − M_t`.
    Reinit { depth: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IterationBudget {
    Fixed(usize),
    /// Iterate until the optimizer tolerances or `max_inner` stop it.
    Converged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub max_inner: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_inner: 100,
            grad_tol: 1e-14,
            step_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MheConfig {
    pub horizon: usize,
    pub w: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub lipschitz_h: f64,
    pub form: Form,
    pub candidate_mode: CandidateMode,
    pub budget: IterationBudget,
    pub optimizer: OptimizerSettings,
}

impl MheConfig {
    pub fn new(horizon: usize, w: DMatrix<f64>, g: DMatrix<f64>, lipschitz_h: f64, form: Form) -> Self {
        Self {
            horizon,
            w,
            g,
            lipschitz_h,
            form,
            candidate_mode: CandidateMode::Simple,
            budget: IterationBudget::Fixed(0),
            optimizer: OptimizerSettings::default(),
        }
    }

    pub fn with_candidate(mut self, mode: CandidateMode) -> Self {
        self.candidate_mode = mode;
        self
    }

    pub fn with_budget(mut self, budget: IterationBudget) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerSettings) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn validate(&self, state_dim: usize, output_dim: usize) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon M must be at least 1".into()));
        }
        check_dim("W rows", state_dim, self.w.nrows())?;
        check_dim("G rows", output_dim, self.g.nrows())?;
        for (name, m) in [("W", &self.w), ("G", &self.g)] {
            linalg::ensure_symmetric(m, name)?;
            if !linalg::is_positive_semidefinite(m) {
                return Err(Error::Config(format!("{name} must be positive semidefinite")));
            }
            if m.amax() == 0.0 {
                return Err(Error::Config(format!("{name} must be nonzero")));
            }
        }
        if !(self.lipschitz_h > 0.0 && self.lipschitz_h.is_finite()) {
            return Err(Error::Config("L_h must be positive and finite".into()));
        }
        if let CandidateMode::Reinit { depth } = self.candidate_mode {
            if depth < self.horizon {
                return Err(Error::Config(format!(
                    "re-initialization depth T = {depth} is below M = {}",
                    self.horizon
                )));
            }
        }
        let o = &self.optimizer;
        if !(o.grad_tol >= 0.0 && o.step_tol >= 0.0) {
            return Err(Error::Config("optimizer tolerances must be nonnegative".into()));
        }
        Ok(())
    }

    /// `λ_min(P1) / (2 L_h² λ_max(G))`.
    pub fn stage_scale(&self, cert: &LyapunovCertificate) -> Result<f64> {
        let lg = linalg::lambda_max(&self.g)?;
        if lg <= 0.0 {
            return Err(Error::Config("λ_max(G) must be positive".into()));
        }
        Ok(linalg::lambda_min(cert.p1())? / (2.0 * self.lipschitz_h * self.lipschitz_h * lg))
    }

    /// Number of past samples the estimator must retain.
    pub fn memory(&self) -> usize {
        match self.candidate_mode {
            CandidateMode::Simple => self.horizon,
            CandidateMode::Reinit { depth } => depth.max(self.horizon),
        }
    }

    pub fn max_iterations(&self) -> usize {
        match self.budget {
            IterationBudget::Fixed(i) => i,
            IterationBudget::Converged => self.optimizer.max_inner,
        }
    }
}

/// Recorded data of one estimation window starting at time `start`.
///
/// `inputs` and `outputs` hold `form.stage_count(steps)` samples; stage `k`
/// belongs to time `start + k` and carries the discount `η^(steps − k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub steps: usize,
    pub form: Form,
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl Window {
    pub fn new(
        start: usize,
        steps: usize,
        form: Form,
        inputs: Vec<DVector<f64>>,
        outputs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let stages = form.stage_count(steps);
        check_dim("window inputs", stages, inputs.len())?;
        check_dim("window outputs", stages, outputs.len())?;
        Ok(Self {
            start,
            steps,
            form,
            inputs,
            outputs,
        })
    }

    pub fn stages(&self) -> usize {
        self.outputs.len()
    }

    fn exponent(&self, k: usize) -> i32 {
        (self.steps - k) as i32
    }
}

/// Last `capacity + 1` data samples and published estimates.
#[derive(Clone, Debug)]
pub struct WindowBuffer {
    capacity: usize,
    pushed: usize,
    published: usize,
    data: VecDeque<(DVector<f64>, DVector<f64>)>,
    estimates: VecDeque<DVector<f64>>,
}

impl WindowBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            pushed: 0,
            published: 0,
            data: VecDeque::with_capacity(capacity + 1),
            estimates: VecDeque::with_capacity(capacity + 1),
        }
    }

    /// Time index of the most recent sample; `None` before the first push.
    pub fn time(&self) -> Option<usize> {
        self.pushed.checked_sub(1)
    }

    pub fn push(&mut self, u: DVector<f64>, y: DVector<f64>) {
        if self.data.len() == self.capacity + 1 {
            self.data.pop_front();
        }
        self.data.push_back((u, y));
        self.pushed += 1;
    }

    pub fn publish(&mut self, estimate: DVector<f64>) {
        if self.estimates.len() == self.capacity + 1 {
            self.estimates.pop_front();
        }
        self.estimates.push_back(estimate);
        self.published += 1;
    }

    pub fn sample(&self, time: usize) -> Option<&(DVector<f64>, DVector<f64>)> {
        let oldest = self.pushed - self.data.len();
        if time < oldest || time >= self.pushed {
            return None;
        }
        self.data.get(time - oldest)
    }

    pub fn estimate(&self, time: usize) -> Option<&DVector<f64>> {
        let oldest = self.published - self.estimates.len();
        if time < oldest || time >= self.published {
            return None;
        }
        self.estimates.get(time - oldest)
    }

    /// Window of `steps` observer steps ending at the current time.
    pub fn window(&self, steps: usize, form: Form) -> Result<Window> {
        let now = self
            .time()
            .ok_or_else(|| Error::Precondition("no data pushed yet".into()))?;
        if steps > now {
            return Err(Error::Precondition(format!(
                "window of {steps} steps needs data before t = 0 (now t = {now})"
            )));
        }
        let start = now - steps;
        let stages = form.stage_count(steps);
        let mut inputs = Vec::with_capacity(stages);
        let mut outputs = Vec::with_capacity(stages);
        for k in 0..stages {
            let (u, y) = self.sample(start + k).ok_or_else(|| {
                Error::Precondition(format!("sample at t = {} no longer buffered", start + k))
            })?;
            inputs.push(u.clone());
            outputs.push(y.clone());
        }
        Window::new(start, steps, form, inputs, outputs)
    }
}

/// States `x̂_{start..start+steps|t}` and predicted outputs of every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl Rollout {
    pub fn endpoint(&self) -> &DVector<f64> {
        self.states.last().expect("a rollout always contains its initial state")
    }
}

/// Runs the observer through the window from `x_init`.
pub fn rollout(
    system: &dyn System,
    obs: &AuxObserver,
    x_init: &DVector<f64>,
    window: &Window,
) -> Result<Rollout> {
    if !obs.contains(x_init) {
        return Err(Error::Infeasible(format!(
            "window-initial state {:?} lies outside Z",
            x_init.as_slice()
        )));
    }
    let mut states = Vec::with_capacity(window.steps + 1);
    states.push(x_init.clone());
    for k in 0..window.steps {
        let next = obs.step(window.start + k, &states[k], &window.inputs[k], &window.outputs[k])?;
        states.push(next);
    }
    let outputs = (0..window.stages())
        .map(|k| system.nominal_measurement(&states[k], &window.inputs[k]))
        .collect();
    Ok(Rollout { states, outputs })
}

/// A least-squares objective `‖r(x)‖²` over a set with a projection.
pub trait LeastSquares {
    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn residual_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
    fn project(&self, x: &DVector<f64>) -> DVector<f64>;

    fn cost(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.residual(x)?.norm_squared())
    }
}

/// The window problem in residual form: prior rows `√2 W^½ (x − prior)`
/// followed by `√(c η^j) G^½ (ŷ − y)` per stage.
pub struct WindowProblem<'a> {
    pub system: &'a dyn System,
    pub obs: &'a AuxObserver,
    pub window: &'a Window,
    pub prior: &'a DVector<f64>,
    pub w_sqrt: &'a DMatrix<f64>,
    pub g_sqrt: &'a DMatrix<f64>,
    pub scale: f64,
    pub eta: f64,
}

impl WindowProblem<'_> {
    fn stage_weight(&self, k: usize) -> f64 {
        (self.scale * self.eta.powi(self.window.exponent(k))).sqrt()
    }

    fn measurement_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        if let Some(j) = self.system.measurement_jacobian(x, u) {
            return j;
        }
        let p = self.system.dims().output;
        let mut jac = DMatrix::zeros(p, x.len());
        for i in 0..x.len() {
            let h = 1e-6 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = (self.system.nominal_measurement(&xp, u) - self.system.nominal_measurement(&xm, u))
                / (2.0 * h);
            jac.set_column(i, &col);
        }
        jac
    }

    /// Cost evaluated term by term as written in the module docs.
    pub fn window_cost(&self, x: &DVector<f64>) -> Result<f64> {
        let roll = rollout(self.system, self.obs, x, self.window)?;
        let weight = self.w_sqrt * self.w_sqrt;
        let gw = self.g_sqrt * self.g_sqrt;
        let mut j = 2.0 * linalg::quad_form(&weight, &(x - self.prior));
        for k in 0..self.window.stages() {
            let e = &roll.outputs[k] - &self.window.outputs[k];
            j += self.scale * self.eta.powi(self.window.exponent(k)) * linalg::quad_form(&gw, &e);
        }
        Ok(j)
    }
}

impl LeastSquares for WindowProblem<'_> {
    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let roll = rollout(self.system, self.obs, x, self.window)?;
        let n = x.len();
        let p = self.g_sqrt.nrows();
        let mut r = DVector::zeros(n + p * self.window.stages());
        r.rows_mut(0, n)
            .copy_from(&(self.w_sqrt * (x - self.prior) * std::f64::consts::SQRT_2));
        for k in 0..self.window.stages() {
            let e = &roll.outputs[k] - &self.window.outputs[k];
            r.rows_mut(n + p * k, p)
                .copy_from(&(self.g_sqrt * e * self.stage_weight(k)));
        }
        Ok(r)
    }

    fn residual_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let jac = jacobian_rollout(self, x)?;
        Ok((self.residual(x)?, jac))
    }

    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.obs.project(x)
    }

    fn cost(&self, x: &DVector<f64>) -> Result<f64> {
        self.window_cost(x)
    }
}

/// Forward-sensitivity Jacobian of the window residuals w.r.t. `x_init`:
/// `S_{k+1} = ∂g/∂z · S_k`, `S_0 = I`.
pub fn jacobian_rollout(problem: &WindowProblem<'_>, x_init: &DVector<f64>) -> Result<DMatrix<f64>> {
    let window = problem.window;
    if !problem.obs.contains(x_init) {
        return Err(Error::Infeasible(format!(
            "window-initial state {:?} lies outside Z",
            x_init.as_slice()
        )));
    }
    let n = x_init.len();
    let p = problem.g_sqrt.nrows();
    let mut jac = DMatrix::zeros(n + p * window.stages(), n);
    jac.view_mut((0, 0), (n, n))
        .copy_from(&(problem.w_sqrt * std::f64::consts::SQRT_2));
    let mut x = x_init.clone();
    let mut sens = DMatrix::identity(n, n);
    for k in 0..window.stages() {
        let dh = problem.measurement_jacobian(&x, &window.inputs[k]);
        jac.view_mut((n + p * k, 0), (p, n))
            .copy_from(&(problem.g_sqrt * dh * &sens * problem.stage_weight(k)));
        if k < window.steps {
            let (next, dg) = problem.obs.step_with_jacobian(
                window.start + k,
                &x,
                &window.inputs[k],
                &window.outputs[k],
            )?;
            sens = dg * sens;
            x = next;
        }
    }
    Ok(jac)
}

/// One projected Levenberg–Marquardt step. Returns the projected point and
/// the decrease predicted by the linear model, or `None` when the damped
/// normal matrix is not positive definite.
pub fn optimizer_step(
    objective: &dyn LeastSquares,
    x: &DVector<f64>,
    damping: f64,
) -> Result<Option<(DVector<f64>, f64)>> {
    let (r, jac) = objective.residual_and_jacobian(x)?;
    let n = x.len();
    let normal = jac.transpose() * &jac + DMatrix::identity(n, n) * damping;
    let Some(chol) = normal.cholesky() else {
        return Ok(None);
    };
    let delta = chol.solve(&(-(jac.transpose() * &r)));
    if delta.iter().any(|d| !d.is_finite()) {
        return Ok(None);
    }
    let next = objective.project(&(x + delta));
    let predicted = r.norm_squared() - (&r + &jac * (&next - x)).norm_squared();
    Ok(Some((next, predicted)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmOutcome {
    pub x: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
}

const INITIAL_DAMPING: f64 = 1e-8;
const DAMPING_CEILING: f64 = 1e12;

/// Projected Levenberg–Marquardt from `start` for at most `max_iters`
/// iterations. Damping starts relative to the largest diagonal entry of `JᵀJ`,
/// grows by 10 after a rejected step and halves after an accepted one.
pub fn levenberg_marquardt(
    objective: &dyn LeastSquares,
    start: &DVector<f64>,
    max_iters: usize,
    settings: &OptimizerSettings,
) -> Result<LmOutcome> {
    let mut x = objective.project(start);
    let mut cost = objective.cost(&x)?;
    let mut out = LmOutcome {
        x: x.clone(),
        cost,
        iterations: 0,
        accepted_costs: vec![cost],
    };
    if max_iters == 0 {
        return Ok(out);
    }
    let (_, jac) = objective.residual_and_jacobian(&x)?;
    let diag_max = (jac.transpose() * &jac).diagonal().max().max(f64::MIN_POSITIVE);
    let mut damping = INITIAL_DAMPING * diag_max;
    let ceiling = DAMPING_CEILING * diag_max;
    'outer: for _ in 0..max_iters {
        let (r, jac) = objective.residual_and_jacobian(&x)?;
        out.iterations += 1;
        if (jac.transpose() * &r).norm() <= settings.grad_tol {
            break;
        }
        loop {
            if let Some((next, _)) = optimizer_step(objective, &x, damping)? {
                let c = objective.cost(&next)?;
                if c < cost {
                    let moved = (&next - &x).norm();
                    x = next;
                    cost = c;
                    damping *= 0.5;
                    out.accepted_costs.push(cost);
                    if moved <= settings.step_tol * (1.0 + x.norm()) {
                        break 'outer;
                    }
                    break;
                }
            }
            damping *= 10.0;
            if damping > ceiling {
                break 'outer;
            }
        }
    }
    out.x = x;
    out.cost = cost;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutcome {
    pub decision: DVector<f64>,
    pub cost: f64,
    pub candidate_cost: f64,
    pub iterations: usize,
    pub fallback: bool,
}

/// Runs at most `max_iters` optimizer iterations from `warm_start` and keeps
/// the result only if it is no worse than `candidate`.
pub fn solve_suboptimal(
    objective: &dyn LeastSquares,
    warm_start: &DVector<f64>,
    candidate: &DVector<f64>,
    max_iters: usize,
    settings: &OptimizerSettings,
) -> Result<SolveOutcome> {
    let candidate_cost = objective.cost(candidate)?;
    let fallback = |iterations| SolveOutcome {
        decision: candidate.clone(),
        cost: candidate_cost,
        candidate_cost,
        iterations,
        fallback: true,
    };
    if max_iters == 0 {
        return Ok(fallback(0));
    }
    let lm = levenberg_marquardt(objective, warm_start, max_iters, settings)?;
    if lm.cost <= candidate_cost {
        Ok(SolveOutcome {
            decision: lm.x,
            cost: lm.cost,
            candidate_cost,
            iterations: lm.iterations,
            fallback: false,
        })
    } else {
        Ok(fallback(lm.iterations))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRecord {
    pub t: usize,
    pub horizon: usize,
    /// Published estimate `x̂_t = x̂_{t|t}`.
    pub estimate: DVector<f64>,
    /// Decision variable `x̂_{t−M_t|t}`.
    pub window_start: DVector<f64>,
    pub candidate: DVector<f64>,
    pub cost: f64,
    pub candidate_cost: f64,
    pub iterations: usize,
    pub fallback: bool,
}

/// Sequential estimator; call [`estimate_step`](Self::estimate_step) once per
/// time step in order.
pub struct MovingHorizonEstimator {
    system: Arc<dyn System>,
    obs: AuxObserver,
    cfg: MheConfig,
    eta: f64,
    scale: f64,
    w_sqrt: DMatrix<f64>,
    g_sqrt: DMatrix<f64>,
    initial_guess: DVector<f64>,
    buffer: WindowBuffer,
    previous: Option<(usize, Vec<DVector<f64>>)>,
}

impl MovingHorizonEstimator {
    pub fn new(
        system: Arc<dyn System>,
        obs: AuxObserver,
        cert: &LyapunovCertificate,
        cfg: MheConfig,
        initial_guess: DVector<f64>,
    ) -> Result<Self> {
        let d = system.dims();
        cfg.validate(d.state, d.output)?;
        check_dim("observer state", d.state, obs.dim())?;
        check_dim("initial guess", d.state, initial_guess.len())?;
        check_dim("certificate", d.state, cert.p1().nrows())?;
        if !obs.contains(&initial_guess) {
            return Err(Error::Infeasible(format!(
                "initial guess {:?} lies outside Z",
                initial_guess.as_slice()
            )));
        }
        let scale = cfg.stage_scale(cert)?;
        Ok(Self {
            w_sqrt: linalg::sym_sqrt(&cfg.w)?,
            g_sqrt: linalg::sym_sqrt(&cfg.g)?,
            buffer: WindowBuffer::new(cfg.memory()),
            eta: cert.eta(),
            system,
            obs,
            cfg,
            scale,
            initial_guess,
            previous: None,
        })
    }

    pub fn config(&self) -> &MheConfig {
        &self.cfg
    }

    pub fn stage_scale(&self) -> f64 {
        self.scale
    }

    fn anchor(&self, t: usize, depth: usize) -> Result<DVector<f64>> {
        if t == 0 {
            return Ok(self.initial_guess.clone());
        }
        self.buffer
            .estimate(t - depth)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("estimate at t = {} not retained", t - depth)))
    }

    /// Candidate for the window starting at `t − M_t`; also the prior.
    fn candidate(&self, t: usize, m: usize) -> Result<DVector<f64>> {
        match self.cfg.candidate_mode {
            CandidateMode::Simple => self.anchor(t, m),
            CandidateMode::Reinit { depth } => {
                let depth = t.min(depth);
                let mut z = self.anchor(t, depth)?;
                for j in t - depth..t - m {
                    let (u, y) = self
                        .buffer
                        .sample(j)
                        .ok_or_else(|| Error::Precondition(format!("sample at t = {j} not retained")))?;
                    z = self.obs.step(j, &z, u, y)?;
                }
                Ok(z)
            }
        }
    }

    fn warm_start(&self, start: usize, candidate: &DVector<f64>) -> DVector<f64> {
        match &self.previous {
            Some((prev_start, states)) if *prev_start <= start && start - prev_start < states.len() => {
                self.obs.project(&states[start - prev_start])
            }
            _ => candidate.clone(),
        }
    }

    pub fn estimate_step(&mut self, u: DVector<f64>, y: DVector<f64>) -> Result<EstimateRecord> {
        let d = self.system.dims();
        check_dim("input", d.input, u.len())?;
        check_dim("measurement", d.output, y.len())?;
        self.buffer.push(u, y);
        let t = self.buffer.time().expect("just pushed");
        let m = t.min(self.cfg.horizon);
        let window = self.buffer.window(m, self.cfg.form)?;
        let candidate = self.candidate(t, m)?;
        let warm = self.warm_start(window.start, &candidate);
        let problem = WindowProblem {
            system: self.system.as_ref(),
            obs: &self.obs,
            window: &window,
            prior: &candidate,
            w_sqrt: &self.w_sqrt,
            g_sqrt: &self.g_sqrt,
            scale: self.scale,
            eta: self.eta,
        };
        let out = solve_suboptimal(
            &problem,
            &warm,
            &candidate,
            self.cfg.max_iterations(),
            &self.cfg.optimizer,
        )?;
        let roll = rollout(self.system.as_ref(), &self.obs, &out.decision, &window)?;
        let estimate = roll.endpoint().clone();
        self.buffer.publish(estimate.clone());
        self.previous = Some((window.start, roll.states));
        Ok(EstimateRecord {
            t,
            horizon: m,
            estimate,
            window_start: out.decision,
            candidate,
            cost: out.cost,
            candidate_cost: out.candidate_cost,
            iterations: out.iterations,
            fallback: out.fallback,
        })
    }
}
