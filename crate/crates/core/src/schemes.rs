//! Classic and truncated Euler-Maruyama steppers.
//!
//! The truncated scheme evaluates the coefficients at the state radially
//! clamped to `omega^{-1}(h(s))`. The stored iterate is never clamped.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde_core::{coupled_increments, IncrementMatrix, LevelGrid, RandomStream, SdeProblem};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

const INVERSE_REL_TOL: f64 = 1e-12;
// s^{1/4} h(s) <= 1 is compared with this much rounding slack.
const QUARTER_POWER_SLACK: f64 = 1e-12;

/// The truncation design `(omega, omega^{-1}, h, s*)`.
#[derive(Clone)]
pub struct TruncationConfig {
    omega: ScalarFn,
    omega_inv: ScalarFn,
    h: ScalarFn,
    s_star: f64,
    label: String,
}

impl fmt::Debug for TruncationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TruncationConfig")
            .field("label", &self.label)
            .field("s_star", &self.s_star)
            .finish()
    }
}

/// A non-fatal finding about a truncation design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TruncationWarning {
    /// `h(s*) < omega(2)`.
    HeightBelowOmegaTwo { h_s_star: f64, omega_two: f64 },
    /// A step larger than `s*` was requested.
    StepAboveSStar { step: f64, s_star: f64 },
}

impl fmt::Display for TruncationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruncationWarning::HeightBelowOmegaTwo { h_s_star, omega_two } => {
                write!(f, "h(s*) = {h_s_star} is below omega(2) = {omega_two}")
            }
            TruncationWarning::StepAboveSStar { step, s_star } => {
                write!(f, "step {step} exceeds s* = {s_star}; truncation radius computed anyway")
            }
        }
    }
}

impl TruncationConfig {
    pub fn new(
        omega: ScalarFn,
        omega_inv: ScalarFn,
        h: ScalarFn,
        s_star: f64,
        label: impl Into<String>,
    ) -> Result<Self> {
        if !(s_star > 0.0 && s_star <= 1.0) {
            return Err(Error::invalid("s_star", format!("must lie in (0, 1], got {s_star}")));
        }
        let config = Self {
            omega,
            omega_inv,
            h,
            s_star,
            label: label.into(),
        };
        config.check_shape()?;
        Ok(config)
    }

    /// `omega(u) = a u^p` and `h(s) = b s^{-q}`.
    pub fn power_law(omega_coef: f64, omega_power: f64, h_coef: f64, h_power: f64, s_star: f64) -> Result<Self> {
        if !(omega_coef > 0.0 && omega_power > 0.0) {
            return Err(Error::invalid("omega", "coefficient and power must be positive"));
        }
        if !(h_coef > 0.0 && h_power > 0.0) {
            return Err(Error::invalid("h", "coefficient and power must be positive"));
        }
        Self::new(
            Arc::new(move |u| omega_coef * u.powf(omega_power)),
            Arc::new(move |r| (r / omega_coef).powf(1.0 / omega_power)),
            Arc::new(move |s| h_coef * s.powf(-h_power)),
            s_star,
            format!("omega(u)={omega_coef}*u^{omega_power}; h(s)={h_coef}*s^-{h_power}; s*={s_star}"),
        )
    }

    /// `omega(u) = 2u^3`, `h(s) = s^{-1/4}`, `s* = 1`: the default design for `lewis`.
    pub fn lewis_default() -> Self {
        Self::power_law(2.0, 3.0, 1.0, 0.25, 1.0).expect("default design is valid")
    }

    pub fn omega(&self, u: f64) -> f64 {
        (self.omega)(u)
    }

    pub fn omega_inv(&self, r: f64) -> f64 {
        (self.omega_inv)(r)
    }

    pub fn h(&self, s: f64) -> f64 {
        (self.h)(s)
    }

    pub fn s_star(&self) -> f64 {
        self.s_star
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Sampled checks of the invariants that must hold for the design to be usable.
    fn check_shape(&self) -> Result<()> {
        let us: Vec<f64> = (0..=64).map(|k| 0.05 * f64::from(k) * f64::from(k)).collect();
        for w in us.windows(2) {
            if !(self.omega(w[1]) > self.omega(w[0])) {
                return Err(Error::invalid(
                    "omega",
                    format!("not strictly increasing between {} and {}", w[0], w[1]),
                ));
            }
        }
        for &u in us.iter().filter(|&&u| u > 0.0) {
            let back = self.omega_inv(self.omega(u));
            if !((back - u).abs() <= INVERSE_REL_TOL * u) {
                return Err(Error::invalid(
                    "omega_inv",
                    format!("omega_inv(omega({u})) = {back}, not an inverse"),
                ));
            }
        }
        let ss: Vec<f64> = (0..=60).map(|k| self.s_star * 0.5f64.powf(f64::from(k) / 3.0)).collect();
        for w in ss.windows(2) {
            // w[1] < w[0], so h must increase
            if !(self.h(w[1]) > self.h(w[0])) {
                return Err(Error::invalid("h", format!("not strictly decreasing at s = {}", w[1])));
            }
        }
        for &s in &ss {
            if s.powf(0.25) * self.h(s) > 1.0 + QUARTER_POWER_SLACK {
                return Err(Error::invalid("h", format!("s^(1/4) h(s) > 1 at s = {s}")));
            }
        }
        Ok(())
    }

    /// Checks `h(s*) >= omega(2)`, which is reported but not enforced.
    pub fn warnings(&self) -> Vec<TruncationWarning> {
        let h_s_star = self.h(self.s_star);
        let omega_two = self.omega(2.0);
        if h_s_star < omega_two {
            vec![TruncationWarning::HeightBelowOmegaTwo { h_s_star, omega_two }]
        } else {
            Vec::new()
        }
    }

    pub fn step_warning(&self, step: f64) -> Option<TruncationWarning> {
        (step > self.s_star).then_some(TruncationWarning::StepAboveSStar {
            step,
            s_star: self.s_star,
        })
    }
}

/// `omega^{-1}(h(step))`.
pub fn truncation_radius(config: &TruncationConfig, step: f64) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("step", format!("must be positive, got {step}")));
    }
    let height = config.h(step);
    let omega_zero = config.omega(0.0);
    if !(height >= omega_zero) {
        return Err(Error::InvalidTruncation {
            step,
            height,
            omega_zero,
        });
    }
    Ok(config.omega_inv(height))
}

/// Serializable tag for the two schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    ClassicEm,
    TruncatedEm,
}

/// A stepping scheme; the truncated variant carries its design.
#[derive(Debug, Clone)]
pub enum Scheme {
    ClassicEm,
    TruncatedEm(TruncationConfig),
}

impl Scheme {
    pub fn kind(&self) -> SchemeKind {
        match self {
            Scheme::ClassicEm => SchemeKind::ClassicEm,
            Scheme::TruncatedEm(_) => SchemeKind::TruncatedEm,
        }
    }

    /// Builds a scheme from its tag; `truncated_em` requires a design.
    pub fn from_kind(kind: SchemeKind, config: Option<TruncationConfig>) -> Result<Self> {
        match (kind, config) {
            (SchemeKind::ClassicEm, _) => Ok(Scheme::ClassicEm),
            (SchemeKind::TruncatedEm, Some(c)) => Ok(Scheme::TruncatedEm(c)),
            (SchemeKind::TruncatedEm, None) => Err(Error::invalid("truncation", "truncated_em requires a truncation design")),
        }
    }

    /// Radius used at `step`, or `None` for the classic scheme.
    pub fn radius(&self, step: f64) -> Result<Option<f64>> {
        match self {
            Scheme::ClassicEm => Ok(None),
            Scheme::TruncatedEm(c) => truncation_radius(c, step).map(Some),
        }
    }
}

/// Overflow-safe Euclidean norm.
fn norm(x: &[f64]) -> f64 {
    if let [v] = x {
        return v.abs();
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return if x.iter().any(|v| v.is_nan()) { f64::NAN } else { scale };
    }
    scale * x.iter().map(|v| (v / scale).powi(2)).sum::<f64>().sqrt()
}

fn truncate_into(x: &[f64], radius: f64, out: &mut [f64]) {
    let n = norm(x);
    if n <= radius {
        out.copy_from_slice(x);
    } else {
        let scale = radius / n;
        for (o, v) in out.iter_mut().zip(x) {
            *o = v * scale;
        }
    }
}

/// `(|x| min radius) x/|x|`, with `0 -> 0`.
pub fn truncate_state(x: &[f64], radius: f64) -> Result<Vec<f64>> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius", format!("must be positive, got {radius}")));
    }
    let mut out = vec![0.0; x.len()];
    truncate_into(x, radius, &mut out);
    Ok(out)
}

/// Terminal state of one simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub terminal_state: Vec<f64>,
    pub finite: bool,
    pub steps_taken: usize,
    /// 1-based index of the step that produced the first non-finite iterate.
    pub blowup_step: Option<usize>,
}

/// Reusable scratch space for stepping one path.
struct Stepper<'a> {
    problem: &'a SdeProblem,
    step: f64,
    radius: Option<f64>,
    arg: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(problem: &'a SdeProblem, step: f64, radius: Option<f64>) -> Self {
        let d = problem.state_dim();
        let m = problem.noise_dim();
        Self {
            problem,
            step,
            radius,
            arg: vec![0.0; d],
            mu: vec![0.0; d],
            sigma: vec![0.0; d * m],
        }
    }

    /// Advances `x` in place by one step with increment `db`.
    fn advance(&mut self, x: &mut [f64], db: &[f64]) {
        let m = db.len();
        match self.radius {
            Some(r) => truncate_into(x, r, &mut self.arg),
            None => self.arg.copy_from_slice(x),
        }
        self.problem.drift(&self.arg, &mut self.mu);
        self.problem.diffusion(&self.arg, &mut self.sigma);
        for (i, xi) in x.iter_mut().enumerate() {
            let mut next = *xi + self.mu[i] * self.step;
            for (j, dbj) in db.iter().enumerate() {
                next += self.sigma[i * m + j] * dbj;
            }
            *xi = next;
        }
    }

    fn run(&mut self, increments: &IncrementMatrix) -> PathOutcome {
        let mut x = self.problem.initial_value().to_vec();
        for k in 0..increments.rows() {
            self.advance(&mut x, increments.row(k));
            if x.iter().any(|v| !v.is_finite()) {
                return PathOutcome {
                    terminal_state: x,
                    finite: false,
                    steps_taken: k + 1,
                    blowup_step: Some(k + 1),
                };
            }
        }
        PathOutcome {
            terminal_state: x,
            finite: true,
            steps_taken: increments.rows(),
            blowup_step: None,
        }
    }
}

/// One step of the chosen scheme from `x` with increment `db`.
pub fn em_step(problem: &SdeProblem, scheme: &Scheme, step: f64, x: &[f64], db: &[f64]) -> Result<Vec<f64>> {
    if x.len() != problem.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: problem.state_dim(),
            actual: x.len(),
        });
    }
    if db.len() != problem.noise_dim() {
        return Err(Error::DimensionMismatch {
            what: "Brownian increment",
            expected: problem.noise_dim(),
            actual: db.len(),
        });
    }
    let mut stepper = Stepper::new(problem, step, scheme.radius(step)?);
    let mut next = x.to_vec();
    stepper.advance(&mut next, db);
    Ok(next)
}

/// Iterates the scheme from `X0` over every row of `increments`.
pub fn simulate_terminal(problem: &SdeProblem, scheme: &Scheme, step: f64, increments: &IncrementMatrix) -> Result<PathOutcome> {
    let n = increments.rows();
    let horizon = problem.horizon();
    if !((n as f64 * step - horizon).abs() <= 1e-12 * horizon) {
        return Err(Error::GridMismatch {
            n_steps: n,
            step,
            horizon,
        });
    }
    if increments.cols() != problem.noise_dim() {
        return Err(Error::DimensionMismatch {
            what: "increment columns",
            expected: problem.noise_dim(),
            actual: increments.cols(),
        });
    }
    Ok(Stepper::new(problem, step, scheme.radius(step)?).run(increments))
}

/// Fine (`s_l`) and coarse (`s_{l-1}`) paths driven by one Brownian path.
/// Each path uses the truncation radius of its own step.
pub fn simulate_coupled_pair(
    problem: &SdeProblem,
    scheme: &Scheme,
    grid: &LevelGrid,
    level: usize,
    stream: &RandomStream,
) -> Result<(PathOutcome, PathOutcome)> {
    let inc = coupled_increments(stream, grid, level, problem.noise_dim())?;
    let fine = simulate_terminal(problem, scheme, grid.step(level), &inc.fine)?;
    let coarse = simulate_terminal(problem, scheme, grid.step(level - 1), &inc.coarse)?;
    Ok((fine, coarse))
}
