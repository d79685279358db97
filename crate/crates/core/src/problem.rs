//! Problem definitions: drift, diffusion, and observable coefficients.
//!
//! A `Problem` bundles the scalar SDE coefficients `b(t,x)` and `sigma(t,x)`,
//! their first and second x-partials, an optional observable integrand
//! `f(t,x)` with its partials, the initial point, and the time horizon.
//! Partials are supplied analytically, either as native closures (built-ins)
//! or as parsed expressions (config documents); nothing is differentiated
//! automatically.

use crate::expr::{self, ParseError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

pub type Coef = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown builtin `{0}`; available: P0_pure_noise, P1_ou, P2_sine_drift, P3_cos_diffusion")]
    UnknownBuiltin(String),
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("coefficient `{coef}`: {err}")]
    Parse { coef: &'static str, err: ParseError },
    #[error("observable partial `{0}` is missing; f, f1, f2 must be supplied together")]
    MissingObservablePartial(&'static str),
    #[error("coefficient `{coef}` evaluates non-finite at (t={t}, x={x})")]
    NonFinite { coef: String, t: f64, x: f64 },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("initial point must be finite, got {0}")]
    BadInitial(f64),
    #[error("label must be nonempty")]
    EmptyLabel,
    #[error("validation grid density must be at least 8, got {0}")]
    GridDensity(usize),
}

/// JSON-compatible problem document. All coefficients are expressions in
/// `t` and `x`; the observable block (`f`, `f1`, `f2`) is optional but must
/// be complete when present.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub label: String,
    pub b: String,
    pub b1: String,
    pub b2: String,
    pub sigma: String,
    pub sigma1: String,
    pub sigma2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f2: Option<String>,
    pub x0: f64,
    pub horizon: f64,
}

/// Closed forms attached to a problem when they exist; used by tests and
/// diagnostics, never by the estimators themselves.
#[derive(Clone, Default)]
pub struct Oracle {
    /// Exact deterministic flow t -> x_t.
    pub skeleton: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    /// Exact limit variance t -> beta_t^2 of the rescaled fluctuation.
    pub beta2: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    /// Exact limit variance t -> gamma_t^2 of the rescaled observable.
    pub gamma2: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    /// The rescaled fluctuation is exactly Gaussian at every noise level.
    pub gaussian_limit: bool,
}

/// Structure flags detected from a probe grid; they gate cheap special-case
/// code paths (for example the reduced second-derivative field).
#[derive(Debug, Clone, Copy, Default)]
pub struct Shortcuts {
    /// sigma'(t,x) vanished on the whole probe grid.
    pub sigma_prime_zero: bool,
    /// sigma''(t,x) vanished on the whole probe grid.
    pub sigma_curvature_zero: bool,
    /// b''(t,x) vanished on the whole probe grid.
    pub drift_curvature_zero: bool,
    /// f''(t,x) vanished on the whole probe grid (None without observable).
    pub observable_curvature_zero: Option<bool>,
}

#[derive(Clone)]
struct Observable {
    f: Coef,
    f1: Coef,
    f2: Coef,
}

#[derive(Clone)]
pub struct Problem {
    label: String,
    x0: f64,
    horizon: f64,
    b: Coef,
    b1: Coef,
    b2: Coef,
    sigma: Coef,
    sigma1: Coef,
    sigma2: Coef,
    observable: Option<Observable>,
    config: ProblemConfig,
    pub shortcuts: Shortcuts,
    pub oracle: Oracle,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("label", &self.label)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("config", &self.config)
            .finish()
    }
}

impl Problem {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn b(&self, t: f64, x: f64) -> f64 {
        (self.b)(t, x)
    }

    #[inline]
    pub fn b1(&self, t: f64, x: f64) -> f64 {
        (self.b1)(t, x)
    }

    #[inline]
    pub fn b2(&self, t: f64, x: f64) -> f64 {
        (self.b2)(t, x)
    }

    #[inline]
    pub fn sigma(&self, t: f64, x: f64) -> f64 {
        (self.sigma)(t, x)
    }

    #[inline]
    pub fn sigma1(&self, t: f64, x: f64) -> f64 {
        (self.sigma1)(t, x)
    }

    #[inline]
    pub fn sigma2(&self, t: f64, x: f64) -> f64 {
        (self.sigma2)(t, x)
    }

    pub fn has_observable(&self) -> bool {
        self.observable.is_some()
    }

    #[inline]
    pub fn f(&self, t: f64, x: f64) -> Option<f64> {
        self.observable.as_ref().map(|o| (o.f)(t, x))
    }

    #[inline]
    pub fn f1(&self, t: f64, x: f64) -> Option<f64> {
        self.observable.as_ref().map(|o| (o.f1)(t, x))
    }

    #[inline]
    pub fn f2(&self, t: f64, x: f64) -> Option<f64> {
        self.observable.as_ref().map(|o| (o.f2)(t, x))
    }

    /// Serialize back to the config document form. Built-ins carry their
    /// expression sources, so this is total and round-trips through
    /// `load_problem` with bit-identical coefficient values.
    pub fn serialize(&self) -> ProblemConfig {
        self.config.clone()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.config).expect("config serializes")
    }

    /// Replace the observable integrand with expressions for `f`, `f'`, `f''`.
    pub fn with_observable(mut self, f: &str, f1: &str, f2: &str) -> Result<Problem, ProblemError> {
        let fe = parse_coef("f", f)?;
        let f1e = parse_coef("f1", f1)?;
        let f2e = parse_coef("f2", f2)?;
        self.config.f = Some(f.to_string());
        self.config.f1 = Some(f1.to_string());
        self.config.f2 = Some(f2.to_string());
        self.observable = Some(Observable { f: fe, f1: f1e, f2: f2e });
        self.oracle.gamma2 = None;
        probe_problem(&mut self)?;
        Ok(self)
    }

    /// Same problem on a different horizon, for horizon sweeps.
    pub fn with_horizon(mut self, horizon: f64) -> Result<Problem, ProblemError> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(ProblemError::BadHorizon(horizon));
        }
        self.horizon = horizon;
        self.config.horizon = horizon;
        Ok(self)
    }
}

fn parse_coef(name: &'static str, src: &str) -> Result<Coef, ProblemError> {
    let ast = expr::parse(src).map_err(|err| ProblemError::Parse { coef: name, err })?;
    Ok(Arc::new(move |t, x| ast.eval(t, x)))
}

/// Evaluate every coefficient over a fixed probe grid: rejects non-finite
/// values and records which structural shortcuts hold on the grid.
fn probe_problem(p: &mut Problem) -> Result<(), ProblemError> {
    let r = 10.0 * (1.0 + p.x0.abs());
    let named: Vec<(&str, &Coef)> = {
        let mut v: Vec<(&str, &Coef)> = vec![
            ("b", &p.b),
            ("b1", &p.b1),
            ("b2", &p.b2),
            ("sigma", &p.sigma),
            ("sigma1", &p.sigma1),
            ("sigma2", &p.sigma2),
        ];
        if let Some(o) = &p.observable {
            v.push(("f", &o.f));
            v.push(("f1", &o.f1));
            v.push(("f2", &o.f2));
        }
        v
    };
    let mut sups = vec![0.0f64; named.len()];
    for it in 0..9 {
        let t = p.horizon * it as f64 / 8.0;
        for ix in 0..33 {
            let x = -r + 2.0 * r * ix as f64 / 32.0;
            for (k, (name, c)) in named.iter().enumerate() {
                let v = c(t, x);
                if !v.is_finite() {
                    return Err(ProblemError::NonFinite { coef: name.to_string(), t, x });
                }
                sups[k] = sups[k].max(v.abs());
            }
        }
    }
    p.shortcuts.sigma_prime_zero = sups[4] == 0.0;
    p.shortcuts.sigma_curvature_zero = sups[5] == 0.0;
    p.shortcuts.drift_curvature_zero = sups[2] == 0.0;
    p.shortcuts.observable_curvature_zero =
        if p.observable.is_some() { Some(sups[8] == 0.0) } else { None };
    Ok(())
}

fn check_basics(label: &str, x0: f64, horizon: f64) -> Result<(), ProblemError> {
    if label.is_empty() {
        return Err(ProblemError::EmptyLabel);
    }
    if !x0.is_finite() {
        return Err(ProblemError::BadInitial(x0));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(ProblemError::BadHorizon(horizon));
    }
    Ok(())
}

/// Build a problem from a JSON config document.
pub fn load_problem(json: &str) -> Result<Problem, ProblemError> {
    let cfg: ProblemConfig = serde_json::from_str(json)?;
    problem_from_config(cfg)
}

pub fn problem_from_config(cfg: ProblemConfig) -> Result<Problem, ProblemError> {
    check_basics(&cfg.label, cfg.x0, cfg.horizon)?;
    let observable = match (&cfg.f, &cfg.f1, &cfg.f2) {
        (None, None, None) => None,
        (Some(f), Some(f1), Some(f2)) => Some(Observable {
            f: parse_coef("f", f)?,
            f1: parse_coef("f1", f1)?,
            f2: parse_coef("f2", f2)?,
        }),
        (f, f1, _) => {
            let missing = if f.is_none() {
                "f"
            } else if f1.is_none() {
                "f1"
            } else {
                "f2"
            };
            return Err(ProblemError::MissingObservablePartial(missing));
        }
    };
    let mut p = Problem {
        label: cfg.label.clone(),
        x0: cfg.x0,
        horizon: cfg.horizon,
        b: parse_coef("b", &cfg.b)?,
        b1: parse_coef("b1", &cfg.b1)?,
        b2: parse_coef("b2", &cfg.b2)?,
        sigma: parse_coef("sigma", &cfg.sigma)?,
        sigma1: parse_coef("sigma1", &cfg.sigma1)?,
        sigma2: parse_coef("sigma2", &cfg.sigma2)?,
        observable,
        config: cfg,
        shortcuts: Shortcuts::default(),
        oracle: Oracle::default(),
    };
    probe_problem(&mut p)?;
    Ok(p)
}

pub const BUILTIN_NAMES: [&str; 4] =
    ["P0_pure_noise", "P1_ou", "P2_sine_drift", "P3_cos_diffusion"];

/// Construct one of the built-in benchmark problems. Coefficients are native
/// closures written to evaluate bit-identically to their expression sources.
pub fn builtin(name: &str) -> Result<Problem, ProblemError> {
    let observable_srcs = (
        "2*x + sin(x)".to_string(),
        "2 + cos(x)".to_string(),
        "-sin(x)".to_string(),
    );
    let observable = || Observable {
        f: Arc::new(|_, x: f64| 2.0 * x + x.sin()),
        f1: Arc::new(|_, x: f64| 2.0 + x.cos()),
        f2: Arc::new(|_, x: f64| -x.sin()),
    };
    let one: Coef = Arc::new(|_, _| 1.0);
    let zero: Coef = Arc::new(|_, _| 0.0);
    let mut p = match name {
        "P0_pure_noise" => Problem {
            label: name.to_string(),
            x0: 0.0,
            horizon: 1.0,
            b: zero.clone(),
            b1: zero.clone(),
            b2: zero.clone(),
            sigma: one.clone(),
            sigma1: zero.clone(),
            sigma2: zero,
            observable: None,
            config: ProblemConfig {
                label: name.to_string(),
                b: "0".into(),
                b1: "0".into(),
                b2: "0".into(),
                sigma: "1".into(),
                sigma1: "0".into(),
                sigma2: "0".into(),
                f: None,
                f1: None,
                f2: None,
                x0: 0.0,
                horizon: 1.0,
            },
            shortcuts: Shortcuts::default(),
            oracle: Oracle {
                skeleton: Some(Arc::new(|_| 0.0)),
                beta2: Some(Arc::new(|t| t)),
                gamma2: None,
                gaussian_limit: true,
            },
        },
        "P1_ou" => Problem {
            label: name.to_string(),
            x0: 1.0,
            horizon: 1.0,
            b: Arc::new(|_, x: f64| -x),
            b1: Arc::new(|_, _| -1.0),
            b2: zero.clone(),
            sigma: one.clone(),
            sigma1: zero.clone(),
            sigma2: zero,
            observable: Some(observable()),
            config: ProblemConfig {
                label: name.to_string(),
                b: "-x".into(),
                b1: "-1".into(),
                b2: "0".into(),
                sigma: "1".into(),
                sigma1: "0".into(),
                sigma2: "0".into(),
                f: Some(observable_srcs.0.clone()),
                f1: Some(observable_srcs.1.clone()),
                f2: Some(observable_srcs.2.clone()),
                x0: 1.0,
                horizon: 1.0,
            },
            shortcuts: Shortcuts::default(),
            oracle: Oracle {
                skeleton: Some(Arc::new(|t: f64| (-t).exp())),
                beta2: Some(Arc::new(|t: f64| (1.0 - (-2.0 * t).exp()) / 2.0)),
                gamma2: None,
                gaussian_limit: true,
            },
        },
        "P2_sine_drift" => Problem {
            label: name.to_string(),
            x0: 0.5,
            horizon: 1.0,
            b: Arc::new(|_, x: f64| x.sin()),
            b1: Arc::new(|_, x: f64| x.cos()),
            b2: Arc::new(|_, x: f64| -x.sin()),
            sigma: one.clone(),
            sigma1: zero.clone(),
            sigma2: zero,
            observable: Some(observable()),
            config: ProblemConfig {
                label: name.to_string(),
                b: "sin(x)".into(),
                b1: "cos(x)".into(),
                b2: "-sin(x)".into(),
                sigma: "1".into(),
                sigma1: "0".into(),
                sigma2: "0".into(),
                f: Some(observable_srcs.0.clone()),
                f1: Some(observable_srcs.1.clone()),
                f2: Some(observable_srcs.2.clone()),
                x0: 0.5,
                horizon: 1.0,
            },
            shortcuts: Shortcuts::default(),
            oracle: Oracle::default(),
        },
        "P3_cos_diffusion" => Problem {
            label: name.to_string(),
            x0: 1.0,
            horizon: 1.0,
            b: Arc::new(|_, x: f64| -x),
            b1: Arc::new(|_, _| -1.0),
            b2: zero,
            sigma: Arc::new(|_, x: f64| 1.0 + 0.2 * x.cos()),
            sigma1: Arc::new(|_, x: f64| -0.2 * x.sin()),
            sigma2: Arc::new(|_, x: f64| -0.2 * x.cos()),
            observable: None,
            config: ProblemConfig {
                label: name.to_string(),
                b: "-x".into(),
                b1: "-1".into(),
                b2: "0".into(),
                sigma: "1 + 0.2*cos(x)".into(),
                sigma1: "-0.2*sin(x)".into(),
                sigma2: "-0.2*cos(x)".into(),
                f: None,
                f1: None,
                f2: None,
                x0: 1.0,
                horizon: 1.0,
            },
            shortcuts: Shortcuts::default(),
            oracle: Oracle {
                skeleton: Some(Arc::new(|t: f64| (-t).exp())),
                beta2: None,
                gamma2: None,
                gaussian_limit: false,
            },
        },
        other => return Err(ProblemError::UnknownBuiltin(other.to_string())),
    };
    probe_problem(&mut p).expect("builtin coefficients are finite");
    Ok(p)
}

/// Outcome of one assumption screen inside a validation report.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeBound {
    pub coef: String,
    pub sup: f64,
    pub inner_sup: f64,
    /// Sup over the full window exceeds the central window noticeably, which
    /// a bounded derivative cannot do; flags growth at the sampling boundary.
    pub growing: bool,
    pub witness_t: f64,
    pub witness_x: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub label: String,
    pub density: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub growth_ratio: f64,
    pub growth_witness: (f64, f64),
    pub derivative_bounds: Vec<DerivativeBound>,
    /// Max of the four derivative sups: the sampled stand-in for a global
    /// Lipschitz/smoothness constant. Never certified, only estimated.
    pub lipschitz_estimate: f64,
    pub f1_min: Option<f64>,
    pub f1_witness: Option<(f64, f64)>,
    pub linear_growth: Check,
    pub bounded_derivatives: Check,
    pub observable_monotone: Option<Check>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.linear_growth.pass
            && self.bounded_derivatives.pass
            && self.observable_monotone.as_ref().map_or(true, |c| c.pass)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "problem {}  (grid {}x{} on x in [{:.3}, {:.3}])",
            self.label, self.density, self.density, self.x_lo, self.x_hi)?;
        writeln!(f, "  growth ratio        {:<12.6} {}",
            self.growth_ratio, verdict(&self.linear_growth))?;
        for db in &self.derivative_bounds {
            writeln!(f, "  sup |{:<7}|       {:<12.6} {}",
                db.coef, db.sup,
                if db.growing { format!("growing at x={:.3}", db.witness_x) } else { String::new() })?;
        }
        writeln!(f, "  derivative bound L  {:<12.6} {}",
            self.lipschitz_estimate, verdict(&self.bounded_derivatives))?;
        match (&self.f1_min, &self.observable_monotone) {
            (Some(m), Some(c)) => writeln!(f, "  min |f1|            {m:<12.6} {}", verdict(c))?,
            _ => writeln!(f, "  observable          none")?,
        }
        Ok(())
    }
}

fn verdict(c: &Check) -> String {
    if c.pass { format!("[pass] {}", c.detail) } else { format!("[FAIL] {}", c.detail) }
}

/// Sample the standing assumptions over a `(t, x)` grid. The screen is
/// sampling-based and non-exhaustive: growth beyond the window cannot be
/// seen, so the report compares the full window against a central window to
/// catch coefficients that are still growing at the boundary.
pub fn validate(p: &Problem, density: usize) -> Result<ValidationReport, ProblemError> {
    if density < 8 {
        return Err(ProblemError::GridDensity(density));
    }
    let half = 5.0 * (1.0 + p.x0.abs());
    let (x_lo, x_hi) = (p.x0 - half, p.x0 + half);
    let inner = |x: f64| (x - p.x0).abs() <= 0.5 * half;
    let ts: Vec<f64> =
        (0..density).map(|i| p.horizon * i as f64 / (density - 1) as f64).collect();
    let xs: Vec<f64> =
        (0..density).map(|i| x_lo + (x_hi - x_lo) * i as f64 / (density - 1) as f64).collect();

    let mut growth = (0.0f64, 0.0f64, (0.0, 0.0));
    for &t in &ts {
        for &x in &xs {
            let g = (p.b(t, x).abs() + p.sigma(t, x).abs()) / (1.0 + x.abs());
            if !g.is_finite() || g > growth.0 {
                growth.0 = g;
                growth.2 = (t, x);
            }
            if inner(x) {
                growth.1 = growth.1.max(g);
            }
        }
    }

    let coefs: [(&str, &Coef); 4] =
        [("b1", &p.b1), ("b2", &p.b2), ("sigma1", &p.sigma1), ("sigma2", &p.sigma2)];
    let mut bounds = Vec::new();
    for (name, c) in coefs {
        let mut sup = 0.0f64;
        let mut inner_sup = 0.0f64;
        let mut witness = (0.0, 0.0);
        let mut finite = true;
        for &t in &ts {
            for &x in &xs {
                let v = c(t, x).abs();
                finite &= v.is_finite();
                if !v.is_finite() || v > sup {
                    sup = v;
                    witness = (t, x);
                }
                if inner(x) {
                    inner_sup = inner_sup.max(v);
                }
            }
        }
        let growing = !finite || sup > 1.02 * inner_sup + 1e-9;
        bounds.push(DerivativeBound {
            coef: name.to_string(),
            sup,
            inner_sup,
            growing,
            witness_t: witness.0,
            witness_x: witness.1,
        });
    }

    let lipschitz_estimate = bounds.iter().fold(0.0f64, |m, b| m.max(b.sup));
    let growth_growing = !growth.0.is_finite() || growth.0 > 1.02 * growth.1 + 1e-9;
    let linear_growth = Check {
        pass: !growth_growing,
        detail: if growth_growing {
            format!("ratio grows toward the window edge (witness x={:.3})", growth.2 .1)
        } else {
            format!("max (|b|+|sigma|)/(1+|x|) = {:.6}", growth.0)
        },
    };
    let failing: Vec<&str> =
        bounds.iter().filter(|b| b.growing).map(|b| b.coef.as_str()).collect();
    let bounded_derivatives = Check {
        pass: failing.is_empty(),
        detail: if failing.is_empty() {
            format!("sampled L = {lipschitz_estimate:.6}")
        } else {
            format!("unbounded on window: {}", failing.join(", "))
        },
    };

    let mut f1_min = None;
    let mut f1_witness = None;
    let observable_monotone = if p.has_observable() {
        let mut min = f64::INFINITY;
        let mut wit = (0.0, 0.0);
        for &t in &ts {
            for &x in &xs {
                let v = p.f1(t, x).unwrap().abs();
                if v < min {
                    min = v;
                    wit = (t, x);
                }
            }
        }
        f1_min = Some(min);
        f1_witness = Some(wit);
        Some(Check {
            pass: min > 0.0 && min.is_finite(),
            detail: format!("min |f1| = {min:.6} at (t={:.3}, x={:.3})", wit.0, wit.1),
        })
    } else {
        None
    };

    Ok(ValidationReport {
        label: p.label.clone(),
        density,
        x_lo,
        x_hi,
        growth_ratio: growth.0,
        growth_witness: growth.2,
        derivative_bounds: bounds,
        lipschitz_estimate,
        f1_min,
        f1_witness,
        linear_growth,
        bounded_derivatives,
        observable_monotone,
    })
}
