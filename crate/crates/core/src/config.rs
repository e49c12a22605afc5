//! Strict JSON experiment configuration.
//!
//! Top-level sections are `model`, `observer`, `certificate`, `estimator`
//! and `scenario`. Unknown keys are rejected and every error message carries
//! the line it refers to. Infinite box bounds are written as `null`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Experiment, Scenario};
use crate::linalg;
use crate::lyapcert::{LyapunovCertificate, SampleDomains};
use crate::mhe::{CandidateMode, Form, IterationBudget, MheConfig, OptimizerSettings};
use crate::model::{BoxSet, Luenberger, Projection, Reactor, System};
use crate::model::AuxObserver;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

impl BoxSpec {
    fn to_box(&self) -> Result<BoxSet> {
        BoxSet::new(
            self.lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect(),
            self.upper.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub k1: f64,
    pub k2: f64,
    pub t_delta: f64,
    pub state_box: BoxSpec,
    pub w_bound: Vec<f64>,
    pub v_bound: Vec<f64>,
    pub lipschitz_h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Euclidean,
    /// Closest point in the norm of the certificate matrix `P`.
    Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSection {
    /// `n × p` gain `L`.
    pub gain: Vec<Vec<f64>>,
    pub domain: BoxSpec,
    /// Finite box used in place of `Z` when sampling observer states.
    pub sample_box: BoxSpec,
    pub projection: ProjectionKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSection {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub eta: f64,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Simple,
    Reinit,
}

/// Iteration budget: a count or the word `"converged"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Iterations {
    Count(usize),
    Word(String),
}

impl Iterations {
    pub fn budget(&self) -> Result<IterationBudget> {
        match self {
            Iterations::Count(i) => Ok(IterationBudget::Fixed(*i)),
            Iterations::Word(w) if w == "converged" => Ok(IterationBudget::Converged),
            Iterations::Word(w) => Err(Error::Config(format!(
                "iterations must be a nonnegative integer or \"converged\", got \"{w}\""
            ))),
        }
    }
}

impl std::str::FromStr for Iterations {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let it = match s.parse::<usize>() {
            Ok(i) => Iterations::Count(i),
            Err(_) => Iterations::Word(s.to_string()),
        };
        it.budget()?;
        Ok(it)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    /// `W = a·P2`.
    pub a: f64,
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    pub form: Form,
    pub candidate_mode: CandidateKind,
    pub iterations: Iterations,
    pub optimizer: OptimizerSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub t_sim: usize,
    pub x0: Vec<f64>,
    pub xhat0: Vec<f64>,
    pub seed: u64,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelSection,
    pub observer: ObserverSection,
    pub certificate: CertificateSection,
    pub estimator: EstimatorSection,
    pub scenario: ScenarioSection,
}

/// A parsed configuration together with its source text for error locations.
#[derive(Clone, Debug)]
pub struct Config {
    pub file: ConfigFile,
    source: String,
}

/// First line (1-based) mentioning `"key"` after the line mentioning `"section"`.
fn locate(source: &str, section: &str, key: &str) -> usize {
    let sec = format!("\"{section}\"");
    let k = format!("\"{key}\"");
    let lines: Vec<&str> = source.lines().collect();
    let start = lines.iter().position(|l| l.contains(&sec)).unwrap_or(0);
    lines
        .iter()
        .enumerate()
        .skip(start)
        .find(|(_, l)| l.contains(&k))
        .map(|(i, _)| i + 1)
        .unwrap_or(start + 1)
}

impl Config {
    pub fn parse(source: &str) -> Result<Self> {
        let file: ConfigFile = serde_json::from_str(source).map_err(|e| {
            Error::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        let cfg = Self {
            file,
            source: source.to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn fail(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
        Error::Config(format!("line {}: {section}.{key}: {msg}", locate(&self.source, section, key)))
    }

    /// Range checks; also run after command-line overrides.
    pub fn validate(&self) -> Result<()> {
        let f = &self.file;
        let m = &f.model;
        if m.kind != "reactor" {
            return Err(self.fail("model", "kind", format!("unknown model '{}', expected \"reactor\"", m.kind)));
        }
        for (key, v) in [("k1", m.k1), ("k2", m.k2), ("t_delta", m.t_delta)] {
            if !v.is_finite() {
                return Err(self.fail("model", key, "must be finite"));
            }
        }
        if !(m.lipschitz_h > 0.0 && m.lipschitz_h.is_finite()) {
            return Err(self.fail("model", "lipschitz_h", "must be positive"));
        }
        if m.state_box.lower.len() != 2 || m.state_box.upper.len() != 2 {
            return Err(self.fail("model", "state_box", "needs two bounds per side"));
        }
        m.state_box.to_box().map_err(|e| self.fail("model", "state_box", e))?;
        if m.w_bound.len() != 2 || m.w_bound.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(self.fail("model", "w_bound", "needs two finite nonnegative entries"));
        }
        if m.v_bound.len() != 1 || m.v_bound.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(self.fail("model", "v_bound", "needs one finite nonnegative entry"));
        }
        let o = &f.observer;
        if o.gain.len() != 2 || o.gain.iter().any(|r| r.len() != 1) {
            return Err(self.fail("observer", "gain", "must be a 2x1 matrix"));
        }
        for (key, b) in [("domain", &o.domain), ("sample_box", &o.sample_box)] {
            if b.lower.len() != 2 || b.upper.len() != 2 {
                return Err(self.fail("observer", key, "needs two bounds per side"));
            }
            b.to_box().map_err(|e| self.fail("observer", key, e))?;
        }
        if !o.sample_box.to_box()?.is_finite() {
            return Err(self.fail("observer", "sample_box", "must be finite"));
        }
        let c = &f.certificate;
        if !(0.0..1.0).contains(&c.eta) {
            return Err(self.fail("certificate", "eta", format!("must lie in [0, 1), got {}", c.eta)));
        }
        self.certificate().map_err(|e| self.fail("certificate", "P", e))?;
        let e = &f.estimator;
        if e.m < 1 {
            return Err(self.fail("estimator", "M", "must be at least 1"));
        }
        if !(e.a > 0.0 && e.a.is_finite()) {
            return Err(self.fail("estimator", "a", format!("must be positive, got {}", e.a)));
        }
        if e.candidate_mode == CandidateKind::Reinit {
            match e.t {
                Some(t) if t >= e.m => {}
                Some(t) => return Err(self.fail("estimator", "T", format!("T = {t} is below M = {}", e.m))),
                None => return Err(self.fail("estimator", "T", "required for candidate_mode \"reinit\"")),
            }
        }
        e.iterations.budget().map_err(|err| self.fail("estimator", "iterations", err))?;
        if !(e.optimizer.grad_tol >= 0.0 && e.optimizer.step_tol >= 0.0) {
            return Err(self.fail("estimator", "optimizer", "tolerances must be nonnegative"));
        }
        let s = &f.scenario;
        if s.x0.len() != 2 {
            return Err(self.fail("scenario", "x0", "needs two entries"));
        }
        if s.xhat0.len() != 2 {
            return Err(self.fail("scenario", "xhat0", "needs two entries"));
        }
        if s.replicates < 1 {
            return Err(self.fail("scenario", "replicates", "must be at least 1"));
        }
        self.estimator_config()
            .and_then(|cfg| cfg.validate(2, 1))
            .map_err(|err| self.fail("estimator", "G", err))?;
        Ok(())
    }

    pub fn system(&self) -> Result<Arc<Reactor>> {
        let m = &self.file.model;
        Ok(Arc::new(Reactor::new(
            m.k1,
            m.k2,
            m.t_delta,
            m.state_box.to_box()?,
            BoxSet::symmetric(&m.w_bound)?,
            BoxSet::symmetric(&m.v_bound)?,
            m.lipschitz_h,
        )?))
    }

    pub fn certificate(&self) -> Result<LyapunovCertificate> {
        let c = &self.file.certificate;
        LyapunovCertificate::quadratic(
            linalg::matrix_from_rows(&c.p, "certificate.P")?,
            c.eta,
            linalg::matrix_from_rows(&c.q, "certificate.Q")?,
            linalg::matrix_from_rows(&c.r, "certificate.R")?,
        )
    }

    pub fn observer(&self, system: Arc<dyn System>) -> Result<AuxObserver> {
        let o = &self.file.observer;
        let gain = linalg::matrix_from_rows(&o.gain, "observer.gain")?;
        let projection = match o.projection {
            ProjectionKind::Euclidean => Projection::Euclidean,
            ProjectionKind::Metric => Projection::Metric(linalg::matrix_from_rows(
                &self.file.certificate.p,
                "certificate.P",
            )?),
        };
        AuxObserver::new(Arc::new(Luenberger::new(system, gain)?), o.domain.to_box()?, projection)
    }

    pub fn estimator_config(&self) -> Result<MheConfig> {
        let e = &self.file.estimator;
        let p2 = linalg::matrix_from_rows(&self.file.certificate.p, "certificate.P")?;
        let mode = match e.candidate_mode {
            CandidateKind::Simple => CandidateMode::Simple,
            CandidateKind::Reinit => CandidateMode::Reinit {
                depth: e.t.ok_or_else(|| Error::Config("estimator.T missing".into()))?,
            },
        };
        Ok(MheConfig::new(
            e.m,
            p2 * e.a,
            linalg::matrix_from_rows(&e.g, "estimator.G")?,
            self.file.model.lipschitz_h,
            e.form,
        )
        .with_candidate(mode)
        .with_budget(e.iterations.budget()?)
        .with_optimizer(e.optimizer))
    }

    pub fn experiment(&self) -> Result<Experiment> {
        let system: Arc<dyn System> = self.system()?;
        Ok(Experiment {
            observer: self.observer(system.clone())?,
            certificate: self.certificate()?,
            estimator: self.estimator_config()?,
            system,
        })
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let s = &self.file.scenario;
        let m = &self.file.model;
        Ok(Scenario {
            t_sim: s.t_sim,
            x0: DVector::from_row_slice(&s.x0),
            xhat0: DVector::from_row_slice(&s.xhat0),
            w_box: BoxSet::symmetric(&m.w_bound)?,
            v_box: BoxSet::symmetric(&m.v_bound)?,
            seed: s.seed,
        })
    }

    pub fn sample_domains(&self) -> Result<SampleDomains> {
        let sys = self.system()?;
        Ok(SampleDomains {
            z: self.file.observer.sample_box.to_box()?,
            x: sys.state_box().clone(),
            u: sys.input_box().clone(),
            w: sys.disturbance_box().clone(),
            v: sys.noise_box().clone(),
        })
    }

    /// Prior weight `W = a·P2` for another `a`.
    pub fn prior_weight(&self, a: f64) -> Result<DMatrix<f64>> {
        Ok(linalg::matrix_from_rows(&self.file.certificate.p, "certificate.P")? * a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BUNDLED: &str = include_str!("../../../configs/reactor_benchmark.json");

    #[test]
    fn bundled_config_parses_to_benchmark_values() {
        let c = Config::parse(BUNDLED).unwrap();
        let f = &c.file;
        assert_eq!((f.model.k1, f.model.k2, f.model.t_delta), (0.16, 0.0064, 0.1));
        assert_eq!(f.observer.gain, vec![vec![7.999], vec![-9.997]]);
        assert_eq!(f.certificate.p, vec![vec![1.537, 1.380], vec![1.380, 1.254]]);
        assert_eq!(f.certificate.eta, 0.955);
        assert_eq!(f.scenario.x0, vec![3.0, 1.0]);
        assert_eq!(f.scenario.xhat0, vec![0.1, 4.5]);
        assert_eq!(f.model.w_bound, vec![2e-3, 2e-3]);
        assert_eq!(f.model.v_bound, vec![1e-2]);
        assert_eq!(f.estimator.form, Form::Filtering);
        let exp = c.experiment().unwrap();
        assert_eq!(exp.estimator.horizon, f.estimator.m);
        assert!(c.scenario().unwrap().w_box.is_finite());
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = BUNDLED.replacen("\"t_delta\"", "\"t_delta\": 0.1, \"tdelta\"", 1);
        let err = Config::parse(&text).unwrap_err().to_string();
        assert!(err.contains("unknown field"), "{err}");
        assert!(err.contains("line "), "{err}");
    }

    #[test]
    fn missing_key_is_rejected() {
        let text = BUNDLED.replacen("\"lipschitz_h\"", "\"lipschitz_hh\"", 1);
        assert!(Config::parse(&text).is_err());
    }

    #[test]
    fn range_errors_point_at_the_offending_line() {
        let text = BUNDLED.replacen("\"eta\": 0.955", "\"eta\": 1.5", 1);
        let err = Config::parse(&text).unwrap_err().to_string();
        let line = text.lines().position(|l| l.contains("\"eta\"")).unwrap() + 1;
        assert!(err.contains(&format!("line {line}:")), "{err}");
        assert!(err.contains("eta"), "{err}");

        let text = BUNDLED.replacen("\"a\": 0.001", "\"a\": -1", 1);
        assert!(Config::parse(&text).unwrap_err().to_string().contains("estimator.a"));
        let text = BUNDLED.replacen("\"M\": 128", "\"M\": 0", 1);
        assert!(Config::parse(&text).unwrap_err().to_string().contains("estimator.M"));
    }

    #[test]
    fn comments_are_not_json() {
        let text = format!("// benchmark\n{BUNDLED}");
        assert!(Config::parse(&text).unwrap_err().to_string().starts_with("configuration error: line 1"));
    }

    #[test]
    fn iterations_accept_count_or_converged() {
        assert_eq!("3".parse::<Iterations>().unwrap().budget().unwrap(), IterationBudget::Fixed(3));
        assert_eq!(
            "converged".parse::<Iterations>().unwrap().budget().unwrap(),
            IterationBudget::Converged
        );
        assert!("many".parse::<Iterations>().is_err());
    }
}
