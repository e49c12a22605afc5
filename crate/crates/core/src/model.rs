//! Perturbed nonlinear system, auxiliary observer and the reactor benchmark.
//!
//! The system is `x⁺ = f(x, u, w)`, `y = h(x, u, v)`; the observer is
//! `z⁺ = g_t(z, u, y)` restricted to an admissible box `Z`. Nominal maps are
//! the full maps evaluated at zero disturbance.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng::CounterRng;

/// Axis-aligned box; infinite bounds mark unconstrained coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Config(format!(
                "box bounds have different lengths ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::Config(format!(
                    "empty interval [{lo}, {hi}] in coordinate {}",
                    i + 1
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[-b_i, b_i]` per coordinate.
    pub fn symmetric(bounds: &[f64]) -> Result<Self> {
        Self::new(bounds.iter().map(|b| -b).collect(), bounds.to_vec())
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn is_finite(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        )
    }

    fn bounded_coords(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&i| self.lower[i].is_finite() || self.upper[i].is_finite())
            .collect()
    }
}

/// Dimensions `(n, m, q, r, p)` of state, input, process disturbance,
/// measurement noise and output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub state: usize,
    pub input: usize,
    pub disturbance: usize,
    pub noise: usize,
    pub output: usize,
}

/// A discrete-time perturbed system `x⁺ = f(x,u,w)`, `y = h(x,u,v)`.
///
/// Implementations must be deterministic. Jacobians of the nominal maps are
/// optional; without them the estimator falls back to finite differences.
pub trait System: Send + Sync {
    fn dims(&self) -> Dims;
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
    fn measurement(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    /// `∂f_n/∂x` at `(x, u)`.
    fn dynamics_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// `∂h_n/∂x` at `(x, u)`.
    fn measurement_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Domain `X` used when sampling states.
    fn state_box(&self) -> &BoxSet;
    fn input_box(&self) -> &BoxSet;
    fn disturbance_box(&self) -> &BoxSet;
    fn noise_box(&self) -> &BoxSet;

    /// Configured Lipschitz constant `L_h` of the output map.
    fn lipschitz_h(&self) -> f64;

    fn nominal_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.dynamics(x, u, &DVector::zeros(self.dims().disturbance))
    }

    fn nominal_measurement(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.measurement(x, u, &DVector::zeros(self.dims().noise))
    }
}

/// `f(x, u, w)` with dimension checks.
pub fn step_system(
    model: &dyn System,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = model.dims();
    check_dim("state", d.state, x.len())?;
    check_dim("input", d.input, u.len())?;
    check_dim("process disturbance", d.disturbance, w.len())?;
    Ok(model.dynamics(x, u, w))
}

/// `h(x, u, v)` with dimension checks.
pub fn output(
    model: &dyn System,
    x: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = model.dims();
    check_dim("state", d.state, x.len())?;
    check_dim("input", d.input, u.len())?;
    check_dim("measurement noise", d.noise, v.len())?;
    Ok(model.measurement(x, u, v))
}

/// Sampled lower bound on the Lipschitz constant of `h` w.r.t. the
/// `‖Δx‖ + ‖Δu‖ + ‖Δv‖` norm. Pairs with a zero denominator are skipped.
pub fn estimate_lipschitz(model: &dyn System, sample_count: usize, seed: u64) -> Result<f64> {
    if sample_count < 2 {
        return Err(Error::Sampling(format!(
            "need at least 2 samples, got {sample_count}"
        )));
    }
    for (name, b) in [
        ("state", model.state_box()),
        ("input", model.input_box()),
        ("noise", model.noise_box()),
    ] {
        if !b.is_finite() {
            return Err(Error::Sampling(format!("{name} sampling box is not finite")));
        }
    }
    let rng = CounterRng::new(seed);
    let d = model.dims();
    let stride = 2 * (d.state + d.input + d.noise) as u64;
    let draw = |k: u64, side: u64| {
        let base = k * stride + side * (stride / 2);
        let x = rng.sample_box(model.state_box(), 0, base);
        let u = rng.sample_box(model.input_box(), 0, base + d.state as u64);
        let v = rng.sample_box(model.noise_box(), 0, base + (d.state + d.input) as u64);
        (x, u, v)
    };
    let mut best: Option<f64> = None;
    for k in 0..sample_count as u64 {
        let (x, u, v) = draw(k, 0);
        let (xb, ub, vb) = draw(k, 1);
        let den = (&x - &xb).norm() + (&u - &ub).norm() + (&v - &vb).norm();
        if den == 0.0 {
            continue;
        }
        let num = (model.measurement(&x, &u, &v) - model.measurement(&xb, &ub, &vb)).norm();
        let ratio = num / den;
        best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
    }
    best.ok_or_else(|| Error::Sampling("every sampled pair was degenerate".into()))
}

/// The observer map `g_t(z, u, y)` before projection onto `Z`.
pub trait ObserverMap: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, t: usize, z: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>)
        -> DVector<f64>;

    /// `∂g_t/∂z`; `None` selects central finite differences.
    fn jacobian(
        &self,
        _t: usize,
        _z: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }
}

/// Luenberger observer `g(z, u, y) = f_n(z, u) + L (h_n(z, u) − y)`.
pub struct Luenberger {
    system: Arc<dyn System>,
    gain: DMatrix<f64>,
}

impl Luenberger {
    pub fn new(system: Arc<dyn System>, gain: DMatrix<f64>) -> Result<Self> {
        let d = system.dims();
        check_dim("observer gain rows", d.state, gain.nrows())?;
        check_dim("observer gain columns", d.output, gain.ncols())?;
        Ok(Self { system, gain })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
}

impl ObserverMap for Luenberger {
    fn state_dim(&self) -> usize {
        self.system.dims().state
    }

    fn input_dim(&self) -> usize {
        self.system.dims().input
    }

    fn output_dim(&self) -> usize {
        self.system.dims().output
    }

    fn apply(&self, _t: usize, z: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let innovation = self.system.nominal_measurement(z, u) - y;
        self.system.nominal_dynamics(z, u) + &self.gain * innovation
    }

    fn jacobian(
        &self,
        _t: usize,
        z: &DVector<f64>,
        u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        let df = self.system.dynamics_jacobian(z, u)?;
        let dh = self.system.measurement_jacobian(z, u)?;
        Some(df + &self.gain * dh)
    }
}

/// How points outside `Z` are mapped back into it.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    /// Coordinate-wise clamp (closest point in the Euclidean norm).
    Euclidean,
    /// Closest point in the norm `‖·‖_P` of a positive-definite matrix.
    Metric(DMatrix<f64>),
}

/// Largest number of bounded coordinates the exact metric projection handles.
const MAX_METRIC_BOUNDED: usize = 12;

/// Auxiliary observer: the map `g_t`, the admissible box `Z` and a projection.
#[derive(Clone)]
pub struct AuxObserver {
    map: Arc<dyn ObserverMap>,
    domain: BoxSet,
    projection: Projection,
}

impl std::fmt::Debug for AuxObserver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuxObserver")
            .field("domain", &self.domain)
            .field("projection", &self.projection)
            .finish_non_exhaustive()
    }
}

impl AuxObserver {
    pub fn new(map: Arc<dyn ObserverMap>, domain: BoxSet, projection: Projection) -> Result<Self> {
        check_dim("observer domain", map.state_dim(), domain.dim())?;
        if let Projection::Metric(p) = &projection {
            check_dim("projection metric", map.state_dim(), p.nrows())?;
            if !linalg::is_positive_definite(p) {
                return Err(Error::Matrix(
                    "projection metric must be symmetric positive definite".into(),
                ));
            }
            if domain.bounded_coords().len() > MAX_METRIC_BOUNDED {
                return Err(Error::Config(format!(
                    "metric projection supports at most {MAX_METRIC_BOUNDED} bounded coordinates"
                )));
            }
        }
        Ok(Self {
            map,
            domain,
            projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.map.state_dim()
    }

    pub fn domain(&self) -> &BoxSet {
        &self.domain
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn contains(&self, z: &DVector<f64>) -> bool {
        self.domain.contains(z)
    }

    fn check_io(&self, z: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        check_dim("observer state", self.map.state_dim(), z.len())?;
        check_dim("input", self.map.input_dim(), u.len())?;
        check_dim("measurement", self.map.output_dim(), y.len())
    }

    /// Raw map `g_t(z, u, y)` without projection.
    pub fn raw_step(&self, t: usize, z: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.map.apply(t, z, u, y)
    }

    /// `project(g_t(z, u, y))`; the result always lies in `Z`.
    pub fn step(&self, t: usize, z: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_io(z, u, y)?;
        if !self.contains(z) {
            return Err(Error::Precondition(format!(
                "observer state {:?} lies outside Z",
                z.as_slice()
            )));
        }
        Ok(self.project(&self.map.apply(t, z, u, y)))
    }

    /// Like [`step`](Self::step), also returning `∂ project(g_t)/∂z`.
    pub fn step_with_jacobian(
        &self,
        t: usize,
        z: &DVector<f64>,
        u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_io(z, u, y)?;
        if !self.contains(z) {
            return Err(Error::Precondition(format!(
                "observer state {:?} lies outside Z",
                z.as_slice()
            )));
        }
        let raw = self.map.apply(t, z, u, y);
        let dg = self
            .map
            .jacobian(t, z, u, y)
            .unwrap_or_else(|| self.fd_jacobian(t, z, u, y));
        let (next, dp) = self.project_with_jacobian(&raw);
        Ok((next, dp * dg))
    }

    fn fd_jacobian(&self, t: usize, z: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let n = z.len();
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-6 * z[k].abs().max(1.0);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let col = (self.map.apply(t, &zp, u, y) - self.map.apply(t, &zm, u, y)) / (2.0 * h);
            jac.set_column(k, &col);
        }
        jac
    }

    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        self.project_with_jacobian(z).0
    }

    /// Projection onto `Z` and its Jacobian (piecewise affine, evaluated on the
    /// active piece).
    pub fn project_with_jacobian(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = z.len();
        if self.domain.contains(z) {
            return (z.clone(), DMatrix::identity(n, n));
        }
        match &self.projection {
            Projection::Euclidean => {
                let p = self.domain.clamp(z);
                let mut jac = DMatrix::identity(n, n);
                for i in 0..n {
                    if p[i] != z[i] {
                        jac[(i, i)] = 0.0;
                    }
                }
                (p, jac)
            }
            Projection::Metric(metric) => metric_box_projection(metric, &self.domain, z),
        }
    }
}

/// Exact `argmin_{p ∈ box} ‖p − z‖²_P` by enumerating active sets of the
/// bounded coordinates. Each pattern fixes some coordinates at a bound and
/// solves the equality-constrained problem for the rest; the cheapest
/// feasible pattern is the optimum of the convex problem.
fn metric_box_projection(
    metric: &DMatrix<f64>,
    domain: &BoxSet,
    z: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = z.len();
    let bounded = domain.bounded_coords();
    // 0 = free, 1 = at lower, 2 = at upper
    let patterns = 3usize.pow(bounded.len() as u32);
    let mut best: Option<(f64, DVector<f64>, DMatrix<f64>)> = None;
    'pattern: for code in 0..patterns {
        let mut c = code;
        let mut fixed = Vec::new();
        let mut values = Vec::new();
        for &i in &bounded {
            let state = c % 3;
            c /= 3;
            let v = match state {
                0 => continue,
                1 => domain.lower()[i],
                _ => domain.upper()[i],
            };
            if !v.is_finite() {
                continue 'pattern;
            }
            fixed.push(i);
            values.push(v);
        }
        let free: Vec<usize> = (0..n).filter(|i| !fixed.contains(i)).collect();
        let mut p = z.clone();
        let mut jac = DMatrix::identity(n, n);
        for (&i, &v) in fixed.iter().zip(&values) {
            p[i] = v;
            jac[(i, i)] = 0.0;
        }
        if !fixed.is_empty() && !free.is_empty() {
            let pff = DMatrix::from_fn(free.len(), free.len(), |a, b| metric[(free[a], free[b])]);
            let pfb = DMatrix::from_fn(free.len(), fixed.len(), |a, b| metric[(free[a], fixed[b])]);
            let Some(pff_inv) = pff.try_inverse() else {
                continue;
            };
            let d_fixed = DVector::from_iterator(
                fixed.len(),
                fixed.iter().zip(&values).map(|(&i, &v)| v - z[i]),
            );
            let gain = &pff_inv * &pfb;
            let d_free = -(&gain * d_fixed);
            for (a, &i) in free.iter().enumerate() {
                p[i] = z[i] + d_free[a];
                // ∂p_F/∂z_B = P_FF⁻¹ P_FB
                for (b, &j) in fixed.iter().enumerate() {
                    jac[(i, j)] = gain[(a, b)];
                }
            }
        }
        if !domain.contains(&p) {
            continue;
        }
        let d = &p - z;
        let cost = linalg::quad_form(metric, &d);
        if best.as_ref().is_none_or(|(bc, _, _)| cost < *bc) {
            best = Some((cost, p, jac));
        }
    }
    match best {
        Some((_, p, jac)) => (p, jac),
        // every coordinate fixed at a bound is always feasible, so this is unreachable
        None => (domain.clamp(z), DMatrix::zeros(n, n)),
    }
}

/// The discretized chemical reactor `2A ⇌ B`:
///
/// ```text
/// x1⁺ = x1 + t_Δ(−2 k1 x1² + 2 k2 x2) + w1
/// x2⁺ = x2 + t_Δ(  k1 x1² −   k2 x2) + w2
/// y   = x1 + x2 + v
/// ```
#[derive(Clone, Debug)]
pub struct Reactor {
    pub k1: f64,
    pub k2: f64,
    pub t_delta: f64,
    state_box: BoxSet,
    input_box: BoxSet,
    disturbance_box: BoxSet,
    noise_box: BoxSet,
    lipschitz_h: f64,
}

impl Reactor {
    pub fn new(
        k1: f64,
        k2: f64,
        t_delta: f64,
        state_box: BoxSet,
        disturbance_box: BoxSet,
        noise_box: BoxSet,
        lipschitz_h: f64,
    ) -> Result<Self> {
        check_dim("reactor state box", 2, state_box.dim())?;
        check_dim("reactor disturbance box", 2, disturbance_box.dim())?;
        check_dim("reactor noise box", 1, noise_box.dim())?;
        if !(lipschitz_h > 0.0) {
            return Err(Error::Config("lipschitz_h must be positive".into()));
        }
        Ok(Self {
            k1,
            k2,
            t_delta,
            state_box,
            input_box: BoxSet::unbounded(0),
            disturbance_box,
            noise_box,
            lipschitz_h,
        })
    }
}

impl System for Reactor {
    fn dims(&self) -> Dims {
        Dims {
            state: 2,
            input: 0,
            disturbance: 2,
            noise: 1,
            output: 1,
        }
    }

    fn dynamics(&self, x: &DVector<f64>, _u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let (x1, x2) = (x[0], x[1]);
        let r = self.k1 * x1 * x1;
        DVector::from_vec(vec![
            x1 + self.t_delta * (-2.0 * r + 2.0 * self.k2 * x2) + w[0],
            x2 + self.t_delta * (r - self.k2 * x2) + w[1],
        ])
    }

    fn measurement(&self, x: &DVector<f64>, _u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0] + x[1] + v[0])
    }

    fn dynamics_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let td = self.t_delta;
        let dr = 2.0 * self.k1 * x[0];
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0 - 2.0 * td * dr,
                2.0 * td * self.k2,
                td * dr,
                1.0 - td * self.k2,
            ],
        ))
    }

    fn measurement_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]))
    }

    fn state_box(&self) -> &BoxSet {
        &self.state_box
    }

    fn input_box(&self) -> &BoxSet {
        &self.input_box
    }

    fn disturbance_box(&self) -> &BoxSet {
        &self.disturbance_box
    }

    fn noise_box(&self) -> &BoxSet {
        &self.noise_box
    }

    fn lipschitz_h(&self) -> f64 {
        self.lipschitz_h
    }
}

/// Published parameters of the reactor benchmark and its Luenberger observer.
#[derive(Clone, Debug, PartialEq)]
pub struct ReactorBenchmark {
    pub k1: f64,
    pub k2: f64,
    pub t_delta: f64,
    pub x0: [f64; 2],
    pub xhat0: [f64; 2],
    pub w_bound: [f64; 2],
    pub v_bound: f64,
    pub gain: [f64; 2],
    /// `z1` bounds of `Z`; `z2` is unconstrained.
    pub z1_bounds: (f64, f64),
    /// Finite box used as `X` when sampling states (and as the `z` sampling box).
    pub sample_box: [(f64, f64); 2],
    /// `√2`: tight for `y = x1 + x2 + v` under the `‖Δx‖ + ‖Δv‖` norm.
    pub lipschitz_h: f64,
}

impl Default for ReactorBenchmark {
    fn default() -> Self {
        Self {
            k1: 0.16,
            k2: 0.0064,
            t_delta: 0.1,
            x0: [3.0, 1.0],
            xhat0: [0.1, 4.5],
            w_bound: [2e-3, 2e-3],
            v_bound: 1e-2,
            gain: [7.999, -9.997],
            z1_bounds: (0.1, 6.0),
            sample_box: [(0.1, 6.0), (0.0, 5.0)],
            lipschitz_h: std::f64::consts::SQRT_2,
        }
    }
}

impl ReactorBenchmark {
    pub fn system(&self) -> Result<Reactor> {
        Reactor::new(
            self.k1,
            self.k2,
            self.t_delta,
            BoxSet::new(
                vec![self.sample_box[0].0, self.sample_box[1].0],
                vec![self.sample_box[0].1, self.sample_box[1].1],
            )?,
            BoxSet::symmetric(&self.w_bound)?,
            BoxSet::symmetric(&[self.v_bound])?,
            self.lipschitz_h,
        )
    }

    pub fn observer_domain(&self) -> Result<BoxSet> {
        BoxSet::new(
            vec![self.z1_bounds.0, f64::NEG_INFINITY],
            vec![self.z1_bounds.1, f64::INFINITY],
        )
    }

    pub fn observer(&self, system: Arc<dyn System>, projection: Projection) -> Result<AuxObserver> {
        let gain = DMatrix::from_column_slice(2, 1, &self.gain);
        let map = Luenberger::new(system, gain)?;
        AuxObserver::new(Arc::new(map), self.observer_domain()?, projection)
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.x0)
    }

    pub fn xhat0(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.xhat0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn bench() -> (Arc<Reactor>, ReactorBenchmark) {
        let b = ReactorBenchmark::default();
        (Arc::new(b.system().unwrap()), b)
    }

    fn benchmark_p() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.537, 1.380, 1.380, 1.254])
    }

    // f_n((3,1)) evaluated by hand: 3 + 0.1(−2·0.16·9 + 2·0.0064·1), 1 + 0.1(0.16·9 − 0.0064·1)
    const FN_3_1: [f64; 2] = [2.71328, 1.14336];

    #[test]
    fn reactor_step_matches_hand_arithmetic() {
        let (sys, _) = bench();
        let x = step_system(sys.as_ref(), &v(&[3.0, 1.0]), &v(&[]), &v(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(x[0], FN_3_1[0], epsilon = 1e-14);
        assert_relative_eq!(x[1], FN_3_1[1], epsilon = 1e-14);
    }

    #[test]
    fn origin_is_an_equilibrium() {
        let (sys, _) = bench();
        let x = step_system(sys.as_ref(), &v(&[0.0, 0.0]), &v(&[]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(x, v(&[0.0, 0.0]));
    }

    #[test]
    fn nonzero_fixed_point_is_kept() {
        // k1 x1² = k2 x2 makes both rates vanish
        let (sys, _) = bench();
        let x1: f64 = 0.2;
        let x2 = 0.16 * x1 * x1 / 0.0064;
        let x = v(&[x1, x2]);
        let next = sys.nominal_dynamics(&x, &v(&[]));
        assert_relative_eq!((next - x).amax(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn disturbance_enters_additively() {
        let (sys, _) = bench();
        let a = sys.dynamics(&v(&[3.0, 1.0]), &v(&[]), &v(&[1e-3, -2e-3]));
        assert_relative_eq!(a[0], FN_3_1[0] + 1e-3, epsilon = 1e-14);
        assert_relative_eq!(a[1], FN_3_1[1] - 2e-3, epsilon = 1e-14);
    }

    #[test]
    fn output_examples() {
        let (sys, _) = bench();
        let y = |x: &[f64], n: f64| output(sys.as_ref(), &v(x), &v(&[]), &v(&[n])).unwrap()[0];
        assert_eq!(y(&[3.0, 1.0], 0.0), 4.0);
        assert_relative_eq!(y(&[3.0, 1.0], 0.01), 4.01, epsilon = 1e-15);
        assert_relative_eq!(y(&[0.1, 4.5], 0.0), 4.6, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (sys, _) = bench();
        let err = step_system(sys.as_ref(), &v(&[3.0]), &v(&[]), &v(&[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Dimension { what: "state", .. }));
        let err = output(sys.as_ref(), &v(&[3.0, 1.0]), &v(&[]), &v(&[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn observer_examples() {
        let (sys, b) = bench();
        let obs = b.observer(sys.clone(), Projection::Euclidean).unwrap();
        let z = v(&[3.0, 1.0]);
        // exact estimate and exact output: innovation vanishes
        let next = obs.step(0, &z, &v(&[]), &v(&[4.0])).unwrap();
        assert_relative_eq!(next[0], FN_3_1[0], epsilon = 1e-14);
        assert_relative_eq!(next[1], FN_3_1[1], epsilon = 1e-14);
        let next = obs.step(0, &z, &v(&[]), &v(&[4.1])).unwrap();
        assert_relative_eq!(next[0], FN_3_1[0] - 0.7999, epsilon = 1e-12);
        assert_relative_eq!(next[1], FN_3_1[1] + 0.9997, epsilon = 1e-12);
    }

    #[test]
    fn observer_rejects_state_outside_domain() {
        let (sys, b) = bench();
        let obs = b.observer(sys, Projection::Euclidean).unwrap();
        let err = obs.step(0, &v(&[0.05, 1.0]), &v(&[]), &v(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn euclidean_projection_clamps_z1_only() {
        let (sys, b) = bench();
        let obs = b.observer(sys, Projection::Euclidean).unwrap();
        assert_eq!(obs.project(&v(&[-1.0, 7.0])), v(&[0.1, 7.0]));
        assert_eq!(obs.project(&v(&[9.0, -3.0])), v(&[6.0, -3.0]));
        let inside = v(&[2.0, -100.0]);
        assert_eq!(obs.project(&inside), inside);
    }

    #[test]
    fn metric_projection_moves_along_inverse_metric_direction() {
        let (sys, b) = bench();
        let p = benchmark_p();
        let obs = b.observer(sys, Projection::Metric(p.clone())).unwrap();
        let z = v(&[0.05, 2.0]);
        let proj = obs.project(&z);
        assert_eq!(proj[0], 0.1);
        // closed form for one active bound: z2' = z2 − (P21/P22)(0.1 − z1)
        assert_relative_eq!(proj[1], 2.0 - 1.380 / 1.254 * 0.05, epsilon = 1e-14);
        // no feasible point is closer in the P-norm
        let d0 = linalg::quad_form(&p, &(&proj - &z));
        for k in -50..=50 {
            let cand = v(&[0.1, proj[1] + k as f64 * 1e-3]);
            assert!(linalg::quad_form(&p, &(&cand - &z)) >= d0 - 1e-15);
        }
    }

    #[test]
    fn metric_projection_jacobian_matches_finite_differences() {
        let (sys, b) = bench();
        let obs = b.observer(sys, Projection::Metric(benchmark_p())).unwrap();
        let z = v(&[7.0, -1.0]);
        let (_, jac) = obs.project_with_jacobian(&z);
        for k in 0..2 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += 1e-6;
            zm[k] -= 1e-6;
            let col = (obs.project(&zp) - obs.project(&zm)) / 2e-6;
            for i in 0..2 {
                assert_relative_eq!(jac[(i, k)], col[i], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn zero_error_persists_without_disturbances() {
        let (sys, b) = bench();
        let obs = b.observer(sys.clone(), Projection::Metric(benchmark_p())).unwrap();
        let mut x = b.x0();
        let mut z = b.x0();
        for t in 0..300 {
            let y = sys.nominal_measurement(&x, &v(&[]));
            z = obs.step(t, &z, &v(&[]), &y).unwrap();
            x = sys.nominal_dynamics(&x, &v(&[]));
            assert_eq!((&z - &x).norm(), 0.0);
        }
    }

    #[test]
    fn lipschitz_estimate_approaches_sqrt2_from_below() {
        let (sys, _) = bench();
        let few = estimate_lipschitz(sys.as_ref(), 100, 3).unwrap();
        let many = estimate_lipschitz(sys.as_ref(), 200_000, 3).unwrap();
        assert!(many <= std::f64::consts::SQRT_2 + 1e-12);
        assert!(many >= few);
        assert!(many > 1.40, "estimate {many}");
    }

    struct Constant;
    impl System for Constant {
        fn dims(&self) -> Dims {
            Dims { state: 1, input: 0, disturbance: 1, noise: 1, output: 1 }
        }
        fn dynamics(&self, x: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
        fn measurement(&self, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, 5.0)
        }
        fn state_box(&self) -> &BoxSet {
            static B: std::sync::OnceLock<BoxSet> = std::sync::OnceLock::new();
            B.get_or_init(|| BoxSet::symmetric(&[1.0]).unwrap())
        }
        fn input_box(&self) -> &BoxSet {
            static B: std::sync::OnceLock<BoxSet> = std::sync::OnceLock::new();
            B.get_or_init(|| BoxSet::unbounded(0))
        }
        fn disturbance_box(&self) -> &BoxSet {
            self.state_box()
        }
        fn noise_box(&self) -> &BoxSet {
            self.state_box()
        }
        fn lipschitz_h(&self) -> f64 {
            1.0
        }
    }

    struct Degenerate;
    impl System for Degenerate {
        fn dims(&self) -> Dims {
            Constant.dims()
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
            Constant.dynamics(x, u, w)
        }
        fn measurement(&self, x: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
        fn state_box(&self) -> &BoxSet {
            static B: std::sync::OnceLock<BoxSet> = std::sync::OnceLock::new();
            B.get_or_init(|| BoxSet::new(vec![0.5], vec![0.5]).unwrap())
        }
        fn input_box(&self) -> &BoxSet {
            Constant.input_box()
        }
        fn disturbance_box(&self) -> &BoxSet {
            self.state_box()
        }
        fn noise_box(&self) -> &BoxSet {
            self.state_box()
        }
        fn lipschitz_h(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn lipschitz_of_constant_output_is_zero() {
        assert_eq!(estimate_lipschitz(&Constant, 50, 0).unwrap(), 0.0);
    }

    #[test]
    fn lipschitz_with_only_identical_pairs_fails() {
        assert!(matches!(
            estimate_lipschitz(&Degenerate, 50, 0),
            Err(Error::Sampling(_))
        ));
        assert!(matches!(estimate_lipschitz(&Constant, 1, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn empty_interval_is_a_config_error() {
        assert!(matches!(BoxSet::new(vec![1.0], vec![0.0]), Err(Error::Config(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projections_are_idempotent_and_land_in_z(z1 in -20.0..20.0f64, z2 in -20.0..20.0f64) {
                let (sys, b) = bench();
                for proj in [Projection::Euclidean, Projection::Metric(benchmark_p())] {
                    let obs = b.observer(sys.clone(), proj).unwrap();
                    let p = obs.project(&v(&[z1, z2]));
                    prop_assert!(obs.contains(&p));
                    prop_assert_eq!(obs.project(&p), p.clone());
                    if obs.contains(&v(&[z1, z2])) {
                        prop_assert_eq!(p, v(&[z1, z2]));
                    }
                }
            }

            #[test]
            fn metric_projection_is_nonexpansive_towards_points_of_z(
                z1 in -20.0..20.0f64, z2 in -20.0..20.0f64,
                x1 in 0.1..6.0f64, x2 in -5.0..5.0f64,
            ) {
                let (sys, b) = bench();
                let p = benchmark_p();
                let obs = b.observer(sys, Projection::Metric(p.clone())).unwrap();
                let z = v(&[z1, z2]);
                let x = v(&[x1, x2]);
                let before = linalg::quad_form(&p, &(&z - &x));
                let after = linalg::quad_form(&p, &(obs.project(&z) - &x));
                prop_assert!(after <= before * (1.0 + 1e-12) + 1e-12);
            }

            #[test]
            fn maps_are_deterministic(x1 in -5.0..5.0f64, x2 in -5.0..5.0f64, w in -1e-2..1e-2f64) {
                let (sys, _) = bench();
                let x = v(&[x1, x2]);
                let a = sys.dynamics(&x, &v(&[]), &v(&[w, -w]));
                let b = sys.dynamics(&x, &v(&[]), &v(&[w, -w]));
                prop_assert_eq!(a.as_slice(), b.as_slice());
            }
        }
    }
}
