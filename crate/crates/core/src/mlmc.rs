//! A-priori multi-level Monte Carlo: level selection, sample allocation,
//! complexity bounds, level estimators and the single-level baseline.
//!
//! All logarithms are natural and `M^x` is evaluated as `exp(x ln M)`.

use std::f64::consts::{E, SQRT_2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schemes::{simulate_coupled_pair, simulate_terminal, Scheme};
use crate::sde_core::{brownian_increments, derive_seed, LevelGrid, Payoff, RandomStream, SdeProblem, StreamRole};

/// Seed salt for pilot runs.
pub const PILOT_SALT: u64 = 0x0070_696c_6f74;
/// Seed salt for the single-level baseline.
pub const BASELINE_SALT: u64 = 0x6261_7365;
/// Level means beyond this magnitude mark a run as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e10;

fn pow_m(m: u32, x: f64) -> f64 {
    (x * f64::from(m).ln()).exp()
}

/// The constants of the MLMC complexity theorem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    /// Weak-error order.
    pub alpha: f64,
    /// Level-variance decay order.
    pub beta: f64,
    /// Weak-error constant.
    pub c1: f64,
    /// Level-variance constant.
    pub c2: f64,
    /// Cost-per-step constant.
    pub c3: f64,
}

impl RateConstants {
    pub fn new(alpha: f64, beta: f64, c1: f64, c2: f64, c3: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("c1", c1), ("c2", c2), ("c3", c3)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument {
                    name,
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        Ok(Self { alpha, beta, c1, c2, c3 })
    }

    /// Orders proved for the truncated EM scheme: `alpha = 1/4`, `beta = 1/2`.
    pub fn truncated_em(c1: f64, c2: f64, c3: f64) -> Result<Self> {
        Self::new(0.25, 0.5, c1, c2, c3)
    }

    pub fn regime(&self) -> Regime {
        Regime::of(self.beta)
    }
}

/// Which branch of the allocation and complexity formulas applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BetaBelowOne,
    BetaEqualOne,
    BetaAboveOne,
}

impl Regime {
    /// `beta == 1` selects the middle branch only at exact equality.
    pub fn of(beta: f64) -> Self {
        if beta == 1.0 {
            Regime::BetaEqualOne
        } else if beta > 1.0 {
            Regime::BetaAboveOne
        } else {
            Regime::BetaBelowOne
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon", format!("must be positive, got {epsilon}")));
    }
    Ok(())
}

/// True when `epsilon < 1/e`, the range where the complexity theorem applies.
pub fn epsilon_in_theorem_range(epsilon: f64) -> bool {
    epsilon < E.recip()
}

/// `s_L = M^{-L} T` for any integer `L`, including negative ones.
pub fn level_step(refinement: u32, horizon: f64, level: i64) -> f64 {
    let m = f64::from(refinement);
    if level >= 0 {
        horizon / m.powi(level as i32)
    } else {
        horizon * m.powi((-level) as i32)
    }
}

/// `c1 s_L^alpha`, the weak-error bound at level `L`.
pub fn bias_bound(consts: &RateConstants, refinement: u32, horizon: f64, level: i64) -> f64 {
    consts.c1 * level_step(refinement, horizon, level).powf(consts.alpha)
}

fn bracket_holds(consts: &RateConstants, refinement: u32, horizon: f64, level: i64, epsilon: f64) -> bool {
    let b = bias_bound(consts, refinement, horizon, level);
    let lower = epsilon * f64::from(refinement).powf(-consts.alpha) / SQRT_2;
    lower < b && b <= epsilon / SQRT_2
}

/// `L = ceil(log(sqrt(2) c1 T^alpha / epsilon) / (alpha log M))`.
///
/// The result may be negative when `c1 T^alpha` already meets the bias budget
/// with room to spare; [`plan`] clamps it to level 0. The returned value
/// satisfies `M^{-alpha} eps / sqrt(2) < c1 s_L^alpha <= eps / sqrt(2)` as
/// evaluated in floating point.
pub fn choose_level(consts: &RateConstants, grid: &LevelGrid, epsilon: f64) -> Result<i64> {
    check_epsilon(epsilon)?;
    let (m, t) = (grid.refinement(), grid.horizon());
    let x = (SQRT_2 * consts.c1 * t.powf(consts.alpha) / epsilon).ln() / (consts.alpha * f64::from(m).ln());
    if !x.is_finite() {
        return Err(Error::Planning(format!("level formula is not finite ({x})")));
    }
    // ceil maps integers to themselves, so x <= L < x + 1
    let level = x.ceil() as i64;
    // Rounding in the logarithm can move the boundary by an ulp; prefer the
    // smallest neighbour for which the bracket holds exactly.
    Ok((level - 1..=level + 1)
        .find(|&l| bracket_holds(consts, m, t, l, epsilon))
        .unwrap_or(level))
}

/// `sum_l c2 s_l^beta / N_l`, the variance bound the allocation must keep below `eps^2 / 2`.
pub fn variance_budget<N: Copy + Into<u128>>(consts: &RateConstants, grid: &LevelGrid, samples: &[N]) -> f64 {
    samples
        .iter()
        .enumerate()
        .map(|(l, &n)| consts.c2 * level_step(grid.refinement(), grid.horizon(), l as i64).powf(consts.beta) / n.into() as f64)
        .sum()
}

/// Sample counts `N_0..N_L` for the regime selected by `beta`.
///
/// `L` may exceed `grid.max_level()`: planning only needs the step sizes.
/// Counts are `u128` because extreme targets need more than `2^64` samples.
pub fn allocate_samples(consts: &RateConstants, grid: &LevelGrid, level: usize, epsilon: f64) -> Result<(Vec<u128>, Regime)> {
    check_epsilon(epsilon)?;
    if !(consts.beta > 0.0) {
        return Err(Error::invalid("beta", format!("must be positive, got {}", consts.beta)));
    }
    let (m, t, beta, c2) = (grid.refinement(), grid.horizon(), consts.beta, consts.c2);
    let step = |l: usize| level_step(m, t, l as i64);
    let scale = 2.0 * epsilon.powi(-2) * c2;
    let regime = Regime::of(beta);
    let raw: Vec<f64> = match regime {
        Regime::BetaEqualOne => (0..=level).map(|l| scale * (level + 1) as f64 * step(l)).collect(),
        Regime::BetaAboveOne => {
            let half = (beta - 1.0) / 2.0;
            let factor = scale * t.powf(half) / (1.0 - pow_m(m, -half));
            (0..=level).map(|l| factor * step(l).powf((beta + 1.0) / 2.0)).collect()
        }
        Regime::BetaBelowOne => {
            let half = (1.0 - beta) / 2.0;
            let factor = scale * step(level).powf(-half) / (1.0 - pow_m(m, -half));
            (0..=level).map(|l| factor * step(l).powf((beta + 1.0) / 2.0)).collect()
        }
    };
    let mut samples = Vec::with_capacity(raw.len());
    for v in raw {
        if !(v.is_finite() && v < 2f64.powi(126)) {
            return Err(Error::Planning(format!("sample count {v} is not representable")));
        }
        samples.push((v.ceil() as u128).max(1));
    }
    // Exact arithmetic guarantees the budget; repair ulp-level overshoot by
    // adding samples where they buy the most variance.
    let target = epsilon * epsilon / 2.0;
    while variance_budget(consts, grid, &samples) > target {
        let worst = (0..samples.len())
            .max_by(|&a, &b| {
                let va = step(a).powf(beta) / samples[a] as f64;
                let vb = step(b).powf(beta) / samples[b] as f64;
                va.total_cmp(&vb)
            })
            .expect("at least one level");
        samples[worst] += (samples[worst] >> 50).max(1);
    }
    Ok((samples, regime))
}

/// `c5 = 1/(alpha log M) + max(0, log(sqrt(2) c1 T^alpha)/(alpha log M)) + 2`.
pub fn c5(consts: &RateConstants, refinement: u32, horizon: f64) -> f64 {
    let denom = consts.alpha * f64::from(refinement).ln();
    1.0 / denom + ((SQRT_2 * consts.c1 * horizon.powf(consts.alpha)).ln() / denom).max(0.0) + 2.0
}

/// Upper bound on the cost of the multi-level estimator for accuracy `epsilon`.
pub fn complexity_bound(consts: &RateConstants, refinement: u32, epsilon: f64, horizon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    if refinement < 2 {
        return Err(Error::invalid("refinement", "must be at least 2"));
    }
    let RateConstants { alpha, beta, c1, c2, c3 } = *consts;
    if !(beta > 0.0) {
        return Err(Error::invalid("beta", format!("must be positive, got {beta}")));
    }
    let mf = f64::from(refinement);
    let fine_term = mf * mf / (mf - 1.0) * (SQRT_2 * c1).powf(1.0 / alpha);
    let bound = match Regime::of(beta) {
        Regime::BetaEqualOne => {
            let c5 = c5(consts, refinement, horizon);
            let coef = c3 * (2.0 * c5 * c5 * c2 + fine_term);
            let le = epsilon.ln();
            let threshold = -le / ((le / epsilon).powi(2)).ln();
            if alpha <= threshold {
                coef * epsilon.powf(-1.0 / alpha)
            } else {
                coef * epsilon.powi(-2) * le * le
            }
        }
        Regime::BetaAboveOne => {
            let geo = 1.0 - pow_m(refinement, -(beta - 1.0) / 2.0);
            let coef = c3 * (2.0 * c2 * horizon.powf(beta - 1.0) / (geo * geo) + fine_term);
            if alpha >= 0.5 {
                coef * epsilon.powi(-2)
            } else {
                coef * epsilon.powf(-1.0 / alpha)
            }
        }
        Regime::BetaBelowOne => {
            let geo = 1.0 - pow_m(refinement, -(1.0 - beta) / 2.0);
            let variance_term = 2.0 * c2 * (SQRT_2 * c1).powf((1.0 - beta) / alpha) * pow_m(refinement, 1.0 - beta) / (geo * geo);
            let coef = c3 * (variance_term + fine_term);
            if beta <= 2.0 * alpha {
                coef * epsilon.powf(-2.0 - (1.0 - beta) / alpha)
            } else {
                coef * epsilon.powf(-1.0 / alpha)
            }
        }
    };
    Ok(bound)
}

/// Closed-form `epsilon^{-4}` bound for `alpha = 1/4`, `beta = 1/2`:
/// `[4 c1^2 c2 c3 sqrt(M) (1 - M^{-1/4})^{-2} + 4 M^2/(M-1) c1^4 c3] eps^{-4}`.
pub fn truncated_em_complexity(c1: f64, c2: f64, c3: f64, refinement: u32, epsilon: f64) -> f64 {
    let mf = f64::from(refinement);
    let geo = 1.0 - mf.powf(-0.25);
    (4.0 * c1 * c1 * c2 * c3 * mf.sqrt() / (geo * geo) + 4.0 * mf * mf / (mf - 1.0) * c1.powi(4) * c3) * epsilon.powi(-4)
}

/// Finest level, per-level sample counts and the predicted cost bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlmcPlan {
    pub epsilon: f64,
    /// Level selected by the formula before clamping to 0.
    pub formula_level: i64,
    pub finest_level: usize,
    pub samples: Vec<u64>,
    pub regime: Regime,
    pub predicted_cost_bound: f64,
    pub variance_budget: f64,
    pub refinement: u32,
    pub horizon: f64,
}

impl MlmcPlan {
    pub fn grid(&self) -> LevelGrid {
        LevelGrid::new(self.refinement, self.horizon, self.finest_level).expect("plan grid was validated")
    }
}

/// Runs the level selection and allocation. `grid.max_level()` caps `L`.
pub fn plan(consts: &RateConstants, grid: &LevelGrid, epsilon: f64) -> Result<MlmcPlan> {
    let formula_level = choose_level(consts, grid, epsilon)?;
    let finest_level = formula_level.max(0) as usize;
    if finest_level > grid.max_level() {
        return Err(Error::Planning(format!(
            "epsilon {epsilon} needs level {finest_level}, beyond the grid's maximum level {}",
            grid.max_level()
        )));
    }
    let (wide, regime) = allocate_samples(consts, grid, finest_level, epsilon)?;
    let samples = wide
        .into_iter()
        .map(|n| u64::try_from(n).map_err(|_| Error::Planning(format!("sample count {n} exceeds u64"))))
        .collect::<Result<Vec<u64>>>()?;
    let predicted_cost_bound = complexity_bound(consts, grid.refinement(), epsilon, grid.horizon())?;
    Ok(MlmcPlan {
        epsilon,
        formula_level,
        finest_level,
        variance_budget: variance_budget(consts, grid, &samples),
        samples,
        regime,
        predicted_cost_bound,
        refinement: grid.refinement(),
        horizon: grid.horizon(),
    })
}

/// One level's estimate `Y_l` and its sample statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelEstimate {
    pub level: usize,
    pub n_samples: u64,
    /// Mean over finite samples; a non-finite marker when every sample diverged.
    pub mean: f64,
    pub sample_variance: f64,
    /// Fine plus coarse steps simulated.
    pub cost: f64,
    pub n_nonfinite: u64,
}

impl LevelEstimate {
    pub fn all_nonfinite(&self) -> bool {
        self.n_nonfinite == self.n_samples
    }
}

/// Mean/variance of the finite values; `(marker, 0, n_nonfinite)` if none are finite.
fn moments(values: &[(f64, bool)]) -> (f64, f64, u64) {
    let mut count = 0u64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut first_bad = None;
    for &(v, ok) in values {
        if ok {
            count += 1;
            let delta = v - mean;
            mean += delta / count as f64;
            m2 += delta * (v - mean);
        } else if first_bad.is_none() {
            first_bad = Some(v);
        }
    }
    let n_bad = values.len() as u64 - count;
    if count == 0 {
        let marker = match first_bad {
            Some(v) if v.is_infinite() => v,
            _ => f64::NAN,
        };
        return (marker, 0.0, n_bad);
    }
    let var = if count > 1 { (m2 / (count - 1) as f64).max(0.0) } else { 0.0 };
    (mean, var, n_bad)
}

fn payoff_sample(payoff: &Payoff, path_ok: bool, state: &[f64]) -> (f64, bool) {
    let v = payoff.eval(state);
    (v, path_ok && v.is_finite())
}

/// Per-sample payoff (level 0) or payoff difference (level >= 1), in sample order.
pub fn level_samples(
    problem: &SdeProblem,
    payoff: &Payoff,
    scheme: &Scheme,
    grid: &LevelGrid,
    level: usize,
    n_samples: u64,
    seed: u64,
) -> Result<Vec<(f64, bool)>> {
    grid.check_level(level)?;
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            if level == 0 {
                let stream = RandomStream::with_role(seed, 0, i, StreamRole::Standalone);
                let inc = brownian_increments(&stream, grid.n_steps(0), grid.step(0), problem.noise_dim())?;
                let out = simulate_terminal(problem, scheme, grid.step(0), &inc)?;
                Ok(payoff_sample(payoff, out.finite, &out.terminal_state))
            } else {
                let stream = RandomStream::with_role(seed, level, i, StreamRole::MlmcPair);
                let (fine, coarse) = simulate_coupled_pair(problem, scheme, grid, level, &stream)?;
                let (pf, okf) = payoff_sample(payoff, fine.finite, &fine.terminal_state);
                let (pc, okc) = payoff_sample(payoff, coarse.finite, &coarse.terminal_state);
                let d = pf - pc;
                Ok((d, okf && okc && d.is_finite()))
            }
        })
        .collect()
}

/// `Y_l` from `n_samples` independent (pairs of) paths.
pub fn run_level(
    problem: &SdeProblem,
    payoff: &Payoff,
    scheme: &Scheme,
    grid: &LevelGrid,
    level: usize,
    n_samples: u64,
    seed: u64,
) -> Result<LevelEstimate> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    let values = level_samples(problem, payoff, scheme, grid, level, n_samples, seed)?;
    let (mean, sample_variance, n_nonfinite) = moments(&values);
    let steps = if level == 0 {
        grid.n_steps(0)
    } else {
        grid.n_steps(level) + grid.n_steps(level - 1)
    };
    Ok(LevelEstimate {
        level,
        n_samples,
        mean,
        sample_variance,
        cost: n_samples as f64 * steps as f64,
        n_nonfinite,
    })
}

/// Combined estimator `Y = sum_l Y_l` with its plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlmcResult {
    pub estimate: f64,
    pub levels: Vec<LevelEstimate>,
    pub total_cost: f64,
    pub plan: MlmcPlan,
    /// Set when any sample is non-finite or any `|Y_l|` exceeds [`DIVERGENCE_THRESHOLD`].
    pub divergent: bool,
}

/// Sums level means in order `l = 0..L`.
pub fn combine(levels: &[LevelEstimate]) -> f64 {
    levels.iter().fold(0.0, |acc, lv| acc + lv.mean)
}

/// Executes an existing plan.
pub fn execute_plan(
    problem: &SdeProblem,
    payoff: &Payoff,
    scheme: &Scheme,
    plan: &MlmcPlan,
    seed: u64,
) -> Result<MlmcResult> {
    let grid = plan.grid();
    let levels = plan
        .samples
        .iter()
        .enumerate()
        .map(|(l, &n)| run_level(problem, payoff, scheme, &grid, l, n, seed))
        .collect::<Result<Vec<_>>>()?;
    let total_cost = levels.iter().fold(0.0, |acc, lv| acc + lv.cost);
    let divergent = levels
        .iter()
        .any(|lv| lv.n_nonfinite > 0 || !(lv.mean.abs() <= DIVERGENCE_THRESHOLD));
    Ok(MlmcResult {
        estimate: combine(&levels),
        levels,
        total_cost,
        plan: plan.clone(),
        divergent,
    })
}

/// Plans and runs the multi-level estimator for target accuracy `epsilon`.
pub fn run_mlmc(
    problem: &SdeProblem,
    payoff: &Payoff,
    scheme: &Scheme,
    consts: &RateConstants,
    grid: &LevelGrid,
    epsilon: f64,
    seed: u64,
) -> Result<MlmcResult> {
    if (problem.horizon() - grid.horizon()).abs() > 1e-12 * problem.horizon() {
        return Err(Error::invalid("grid", "grid horizon differs from the problem horizon"));
    }
    let plan = plan(consts, grid, epsilon)?;
    execute_plan(problem, payoff, scheme, &plan, seed)
}

/// Plain Monte Carlo estimate at a single step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StandardMcResult {
    pub estimate: f64,
    pub variance: f64,
    pub cost: f64,
    pub n_samples: u64,
    pub n_nonfinite: u64,
}

/// Averages `f(X_step(T))` over `n_samples` standalone paths. Streams are
/// keyed by the step count `T/step`.
pub fn run_standard_mc(
    problem: &SdeProblem,
    payoff: &Payoff,
    scheme: &Scheme,
    step: f64,
    n_samples: u64,
    seed: u64,
) -> Result<StandardMcResult> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("step", format!("must be positive, got {step}")));
    }
    let horizon = problem.horizon();
    let n_steps = (horizon / step).round();
    if !(n_steps >= 1.0 && (n_steps * step - horizon).abs() <= 1e-12 * horizon) {
        return Err(Error::GridMismatch {
            n_steps: n_steps as usize,
            step,
            horizon,
        });
    }
    let n_steps = n_steps as usize;
    let values: Vec<(f64, bool)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let stream = RandomStream::with_role(seed, n_steps, i, StreamRole::Standalone);
            let inc = brownian_increments(&stream, n_steps, step, problem.noise_dim())?;
            let out = simulate_terminal(problem, scheme, step, &inc)?;
            Ok(payoff_sample(payoff, out.finite, &out.terminal_state))
        })
        .collect::<Result<_>>()?;
    let (estimate, variance, n_nonfinite) = moments(&values);
    Ok(StandardMcResult {
        estimate,
        variance,
        cost: n_samples as f64 * n_steps as f64,
        n_samples,
        n_nonfinite,
    })
}

/// Step and sample count for plain Monte Carlo at accuracy `epsilon`:
/// the coarsest grid step with `c1 step^alpha <= eps/sqrt(2)` and
/// `n = ceil(2 var / eps^2)`.
pub fn standard_mc_budget(consts: &RateConstants, grid: &LevelGrid, epsilon: f64, payoff_variance: f64) -> Result<(usize, f64, u64)> {
    check_epsilon(epsilon)?;
    if !(payoff_variance >= 0.0 && payoff_variance.is_finite()) {
        return Err(Error::invalid("payoff_variance", format!("must be finite and nonnegative, got {payoff_variance}")));
    }
    let level = choose_level(consts, grid, epsilon)?.max(0) as usize;
    if level > grid.max_level() {
        return Err(Error::Planning(format!(
            "baseline needs level {level}, beyond the grid's maximum level {}",
            grid.max_level()
        )));
    }
    let n = (2.0 * payoff_variance / (epsilon * epsilon)).ceil().max(1.0);
    if n >= 2f64.powi(62) {
        return Err(Error::Planning(format!("baseline sample count {n} is not representable")));
    }
    Ok((level, grid.step(level), n as u64))
}

/// Which constants the user fixed; the rest come from a pilot run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialConstants {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
}

impl PartialConstants {
    pub fn complete(&self) -> Option<RateConstants> {
        match *self {
            PartialConstants {
                alpha: Some(a),
                beta: Some(b),
                c1: Some(c1),
                c2: Some(c2),
                c3: Some(c3),
            } => RateConstants::new(a, b, c1, c2, c3).ok(),
            _ => None,
        }
    }
}

impl From<RateConstants> for PartialConstants {
    fn from(c: RateConstants) -> Self {
        Self {
            alpha: Some(c.alpha),
            beta: Some(c.beta),
            c1: Some(c.c1),
            c2: Some(c.c2),
            c3: Some(c.c3),
        }
    }
}

/// Pilot-run sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PilotSettings {
    pub paths: u64,
    pub levels: usize,
    pub variance_fit: VarianceFit,
}

impl Default for PilotSettings {
    fn default() -> Self {
        Self {
            paths: 100,
            levels: 4,
            variance_fit: VarianceFit::FirstCorrection,
        }
    }
}

/// Which pilot levels determine `c2`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceFit {
    /// `Var_1 / s_1^beta`.
    #[default]
    FirstCorrection,
    /// `max_l Var_l / s_l^beta` over pilot levels `0..=K`, so the bound also
    /// covers the coarsest level.
    AllLevels,
}

/// `(alpha, beta)` known for each scheme: `(1/4, 1/2)` for truncated EM and
/// the globally Lipschitz `(1, 1)` for classic EM.
pub fn preset_orders(scheme: &Scheme) -> (f64, f64) {
    match scheme {
        Scheme::TruncatedEm(_) => (0.25, 0.5),
        Scheme::ClassicEm => (1.0, 1.0),
    }
}

/// What the pilot observed and which constants it produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PilotReport {
    pub levels: Vec<LevelEstimate>,
    pub constants: RateConstants,
    pub fitted: Vec<&'static str>,
    pub cost: f64,
}

const CONSTANT_FLOOR: f64 = 1e-12;

/// Fills in missing constants from a short multi-level pilot run.
///
/// Missing orders fall back to [`preset_orders`]. `c1` is the least-squares
/// fit of `|Y_l| ~ c1 s_l^alpha` over pilot levels `1..=K`, `c2` is
/// `Var_1 / s_1^beta` and `c3 = T (1 + 1/M)`, the steps simulated per
/// coupled sample in units of `1/s_l`. Results are floored at a tiny positive
/// value so degenerate problems still plan.
pub fn pilot_constants(
    problem: &SdeProblem,
    payoff: &Payoff,
    scheme: &Scheme,
    grid: &LevelGrid,
    given: &PartialConstants,
    settings: &PilotSettings,
    seed: u64,
) -> Result<PilotReport> {
    if settings.levels < 2 {
        return Err(Error::invalid("pilot.levels", "need at least 2 pilot levels"));
    }
    if settings.paths < 2 {
        return Err(Error::invalid("pilot.paths", "need at least 2 pilot paths"));
    }
    let pilot_grid = grid.with_max_level(settings.levels)?;
    let pilot_seed = derive_seed(seed, PILOT_SALT);
    let levels = (0..=settings.levels)
        .map(|l| run_level(problem, payoff, scheme, &pilot_grid, l, settings.paths, pilot_seed))
        .collect::<Result<Vec<_>>>()?;
    let mut fitted = Vec::new();
    let fine_levels = &levels[1..];
    let steps: Vec<f64> = fine_levels.iter().map(|lv| pilot_grid.step(lv.level)).collect();

    let (preset_alpha, preset_beta) = preset_orders(scheme);
    let alpha = given.alpha.unwrap_or(preset_alpha);
    let beta = given.beta.unwrap_or(preset_beta);
    let c1 = match given.c1 {
        Some(c) => c,
        None => {
            fitted.push("c1");
            let (num, den) = steps.iter().zip(fine_levels).filter(|(_, lv)| lv.mean.is_finite()).fold((0.0, 0.0), |(n, d), (&s, lv)| {
                let basis = s.powf(alpha);
                (n + lv.mean.abs() * basis, d + basis * basis)
            });
            (num / den).max(CONSTANT_FLOOR)
        }
    };
    let c2 = match given.c2 {
        Some(c) => c,
        None => {
            fitted.push("c2");
            let scaled = |lv: &LevelEstimate| lv.sample_variance / pilot_grid.step(lv.level).powf(beta);
            let c2 = match settings.variance_fit {
                VarianceFit::FirstCorrection => scaled(&levels[1]),
                VarianceFit::AllLevels => levels.iter().map(scaled).filter(|v| v.is_finite()).fold(0.0, f64::max),
            };
            c2.max(CONSTANT_FLOOR)
        }
    };
    let c3 = match given.c3 {
        Some(c) => c,
        None => {
            fitted.push("c3");
            grid.horizon() * (1.0 + 1.0 / f64::from(grid.refinement()))
        }
    };
    let constants = RateConstants::new(alpha, beta, c1, c2, c3)
        .map_err(|e| Error::Planning(format!("pilot produced unusable constants: {e}")))?;
    let cost = levels.iter().map(|lv| lv.cost).sum();
    Ok(PilotReport {
        levels,
        constants,
        fitted,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schemes::TruncationConfig;

    fn grid(m: u32) -> LevelGrid {
        LevelGrid::new(m, 1.0, 40).unwrap()
    }

    fn unit(alpha: f64, beta: f64) -> RateConstants {
        RateConstants::new(alpha, beta, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn choose_level_example() {
        let c = unit(0.25, 0.5);
        let l = choose_level(&c, &grid(2), 0.1).unwrap();
        // log(sqrt(2) / 0.1) / (0.25 log 2) = 15.27 -> 16
        assert_eq!(l, 16);
        let b = 2f64.powi(-16).powf(0.25);
        assert_eq!(b, 0.0625);
        assert!(0.1 * 2f64.powf(-0.25) / SQRT_2 < b && b <= 0.1 / SQRT_2);
    }

    #[test]
    fn choose_level_boundary_is_zero() {
        let eps = 0.1;
        let c = RateConstants::new(0.25, 0.5, eps / SQRT_2, 1.0, 1.0).unwrap();
        assert_eq!(choose_level(&c, &grid(2), eps).unwrap(), 0);
    }

    #[test]
    fn choose_level_is_monotone_in_epsilon() {
        let c = unit(0.5, 1.0);
        let mut eps = 0.3;
        let mut prev = choose_level(&c, &grid(2), eps).unwrap();
        for _ in 0..12 {
            eps /= 2.0;
            let l = choose_level(&c, &grid(2), eps).unwrap();
            assert!(l >= prev);
            prev = l;
        }
        assert!(choose_level(&c, &grid(2), 0.0).is_err());
        assert!(choose_level(&c, &grid(2), -1.0).is_err());
    }

    #[test]
    fn choose_level_may_be_negative() {
        let c = RateConstants::new(1.0, 1.0, 0.1, 1.0, 1.0).unwrap();
        let l = choose_level(&c, &grid(2), 0.3).unwrap();
        assert!(l < 0);
        assert!(bracket_holds(&c, 2, 1.0, l, 0.3));
        let p = plan(&c, &grid(2), 0.3).unwrap();
        assert_eq!(p.finest_level, 0);
        assert_eq!(p.formula_level, l);
    }

    #[test]
    fn allocation_beta_one() {
        let (n, regime) = allocate_samples(&unit(0.5, 1.0), &grid(2), 2, 0.1).unwrap();
        assert_eq!(n, vec![600, 300, 150]);
        assert_eq!(regime, Regime::BetaEqualOne);
    }

    #[test]
    fn allocation_beta_half() {
        let (n, regime) = allocate_samples(&unit(0.25, 0.5), &grid(2), 2, 0.1).unwrap();
        // 200 * 2^(1/2) / (1 - 2^(-1/4)) * s_l^(3/4), evaluated independently
        let factor = 200.0 * 2f64.sqrt() / (1.0 - 2f64.powf(-0.25));
        let expected: Vec<u128> = (0..3).map(|l| (factor * 2f64.powi(-l).powf(0.75)).ceil() as u128).collect();
        assert_eq!(n, expected);
        assert_eq!(n, vec![1778, 1058, 629]);
        assert_eq!(regime, Regime::BetaBelowOne);
    }

    #[test]
    fn allocation_beyond_grid_and_u64() {
        let c = RateConstants::new(0.1, 0.5, 10.0, 10.0, 1.0).unwrap();
        let g = grid(2);
        let level = choose_level(&c, &g, 1e-4).unwrap();
        assert!(level as usize > g.max_level());
        let (n, _) = allocate_samples(&c, &g, level as usize, 1e-4).unwrap();
        assert!(n[0] > u128::from(u64::MAX));
        assert!(variance_budget(&c, &g, &n) <= 1e-8 / 2.0);
        assert!(matches!(plan(&c, &g, 1e-4), Err(Error::Planning(_))));
    }

    #[test]
    fn allocation_beta_above_one() {
        let c = unit(1.0, 2.0);
        let (n, regime) = allocate_samples(&c, &grid(2), 3, 0.05).unwrap();
        assert_eq!(regime, Regime::BetaAboveOne);
        let factor = 2.0 / 0.0025 / (1.0 - 2f64.powf(-0.5));
        for (l, &nl) in n.iter().enumerate() {
            assert_eq!(nl, (factor * 2f64.powi(-(l as i32)).powf(1.5)).ceil() as u128);
        }
        assert!(variance_budget(&c, &grid(2), &n) <= 0.05 * 0.05 / 2.0);
    }

    #[test]
    fn regime_dispatch_is_exact() {
        assert_eq!(Regime::of(1.0), Regime::BetaEqualOne);
        assert_eq!(Regime::of(1.0 + 1e-12), Regime::BetaAboveOne);
        assert_eq!(Regime::of(1.0 - 1e-12), Regime::BetaBelowOne);
        for beta in [1.0 - 1e-12, 1.0, 1.0 + 1e-12] {
            let c = unit(0.5, beta);
            let (n, _) = allocate_samples(&c, &grid(2), 5, 0.01).unwrap();
            assert!(variance_budget(&c, &grid(2), &n) <= 0.01 * 0.01 / 2.0);
        }
        let mut c = unit(0.5, 1.0);
        c.beta = 0.0;
        assert!(allocate_samples(&c, &grid(2), 2, 0.1).is_err());
        assert!(complexity_bound(&c, 2, 0.1, 1.0).is_err());
    }

    #[test]
    fn complexity_matches_closed_form() {
        for (c1, c2, c3, m) in [(1.0, 1.0, 1.0, 2u32), (0.3, 2.5, 1.5, 2), (2.0, 0.1, 1.0, 4), (0.7, 0.7, 3.0, 3)] {
            let consts = RateConstants::truncated_em(c1, c2, c3).unwrap();
            for eps in [0.1, 0.01, 0.001] {
                let general = complexity_bound(&consts, m, eps, 1.0).unwrap();
                let closed = truncated_em_complexity(c1, c2, c3, m, eps);
                assert!((general / closed - 1.0).abs() < 1e-12, "{general} vs {closed}");
            }
        }
    }

    #[test]
    fn complexity_scaling() {
        let consts = RateConstants::truncated_em(1.0, 1.0, 1.0).unwrap();
        for eps in [1e-1, 1e-2, 1e-3] {
            let r = complexity_bound(&consts, 2, eps / 2.0, 1.0).unwrap() / complexity_bound(&consts, 2, eps, 1.0).unwrap();
            assert!((r / 16.0 - 1.0).abs() < 1e-12);
        }
        let b2 = RateConstants::new(1.0, 2.0, 1.0, 1.0, 1.0).unwrap();
        let r = complexity_bound(&b2, 2, 0.005, 1.0).unwrap() / complexity_bound(&b2, 2, 0.01, 1.0).unwrap();
        assert!((r - 4.0).abs() < 1e-12);
        // beta > 1, alpha < 1/2: eps^{-1/alpha}
        let b3 = RateConstants::new(0.25, 2.0, 1.0, 1.0, 1.0).unwrap();
        let r = complexity_bound(&b3, 2, 0.005, 1.0).unwrap() / complexity_bound(&b3, 2, 0.01, 1.0).unwrap();
        assert!((r - 16.0).abs() < 1e-9);
        // 0 < beta < 1 with beta > 2 alpha: eps^{-1/alpha}
        let b4 = RateConstants::new(0.2, 0.5, 1.0, 1.0, 1.0).unwrap();
        let r = complexity_bound(&b4, 2, 0.005, 1.0).unwrap() / complexity_bound(&b4, 2, 0.01, 1.0).unwrap();
        assert!((r - 32.0).abs() < 1e-9);
    }

    #[test]
    fn complexity_beta_one_branches() {
        let eps: f64 = 0.01;
        let le = eps.ln();
        let threshold = -le / ((le / eps).powi(2)).ln();
        let slow = RateConstants::new(threshold * 0.9, 1.0, 1.0, 1.0, 1.0).unwrap();
        let fast = RateConstants::new(threshold * 1.1, 1.0, 1.0, 1.0, 1.0).unwrap();
        let c5s = 1.0 / (slow.alpha * 2f64.ln()) + (SQRT_2.ln() / (slow.alpha * 2f64.ln())) + 2.0;
        let want = 2.0 * c5s * c5s + 4.0 * SQRT_2.powf(1.0 / slow.alpha);
        let got = complexity_bound(&slow, 2, eps, 1.0).unwrap();
        assert!((got / (want * eps.powf(-1.0 / slow.alpha)) - 1.0).abs() < 1e-12);
        let c5f = 1.0 / (fast.alpha * 2f64.ln()) + (SQRT_2.ln() / (fast.alpha * 2f64.ln())) + 2.0;
        let want = (2.0 * c5f * c5f + 4.0 * SQRT_2.powf(1.0 / fast.alpha)) * eps.powi(-2) * le * le;
        let got = complexity_bound(&fast, 2, eps, 1.0).unwrap();
        assert!((got / want - 1.0).abs() < 1e-12);
    }

    #[test]
    fn c5_drops_negative_log_term() {
        let c = RateConstants::new(0.5, 1.0, 0.01, 1.0, 1.0).unwrap();
        assert!((c5(&c, 2, 1.0) - (1.0 / (0.5 * 2f64.ln()) + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_sde_levels() {
        let p = SdeProblem::zero(vec![2.5], 1.0).unwrap();
        let f = Payoff::identity(1.0).unwrap();
        let g = grid(2);
        let l0 = run_level(&p, &f, &Scheme::ClassicEm, &g, 0, 50, 1).unwrap();
        assert_eq!((l0.mean, l0.sample_variance, l0.cost), (2.5, 0.0, 50.0));
        let l3 = run_level(&p, &f, &Scheme::ClassicEm, &g, 3, 50, 1).unwrap();
        assert_eq!((l3.mean, l3.sample_variance, l3.cost), (0.0, 0.0, 50.0 * 12.0));
        assert!(run_level(&p, &f, &Scheme::ClassicEm, &g, 3, 0, 1).is_err());
    }

    #[test]
    fn all_nonfinite_level_gets_marker() {
        let (m, v, bad) = moments(&[(f64::INFINITY, false), (f64::NAN, false)]);
        assert_eq!(m, f64::INFINITY);
        assert_eq!((v, bad), (0.0, 2));
        let (m, _, _) = moments(&[(f64::NAN, false)]);
        assert!(m.is_nan());
        let (m, v, bad) = moments(&[(1.0, true), (f64::NAN, false), (3.0, true)]);
        assert_eq!((m, v, bad), (2.0, 2.0, 1));
    }

    #[test]
    fn zero_sde_mlmc_is_exact() {
        let p = SdeProblem::zero(vec![0.75], 1.0).unwrap();
        let f = Payoff::identity(1.0).unwrap();
        let c = unit(0.5, 1.0);
        let r = run_mlmc(&p, &f, &Scheme::ClassicEm, &c, &grid(2), 0.05, 3).unwrap();
        assert_eq!(r.estimate, 0.75);
        assert!(r.levels.iter().all(|lv| lv.sample_variance == 0.0));
        let expected: f64 = r
            .plan
            .samples
            .iter()
            .enumerate()
            .map(|(l, &n)| n as f64 * (2f64.powi(l as i32) + if l > 0 { 2f64.powi(l as i32 - 1) } else { 0.0 }))
            .sum();
        assert_eq!(r.total_cost, expected);
        assert!(!r.divergent);
    }

    #[test]
    fn level_order_does_not_matter() {
        let p = SdeProblem::lewis(1.0, 1.0).unwrap();
        let f = Payoff::identity(1.0).unwrap();
        let s = Scheme::TruncatedEm(TruncationConfig::lewis_default());
        let g = grid(2);
        let forward: Vec<_> = (0..4).map(|l| run_level(&p, &f, &s, &g, l, 64, 9).unwrap()).collect();
        let mut backward: Vec<_> = (0..4).rev().map(|l| run_level(&p, &f, &s, &g, l, 64, 9).unwrap()).collect();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn standard_mc_zero_and_cost() {
        let p = SdeProblem::zero(vec![1.25], 1.0).unwrap();
        let f = Payoff::identity(1.0).unwrap();
        let r = run_standard_mc(&p, &f, &Scheme::ClassicEm, 0.125, 40, 1).unwrap();
        assert_eq!((r.estimate, r.variance, r.cost), (1.25, 0.0, 320.0));
        assert!(run_standard_mc(&p, &f, &Scheme::ClassicEm, 0.3, 40, 1).is_err());
        assert!(run_standard_mc(&p, &f, &Scheme::ClassicEm, 0.125, 0, 1).is_err());
    }

    #[test]
    fn baseline_budget() {
        let c = unit(0.25, 0.5);
        let g = grid(2);
        let (level, step, n) = standard_mc_budget(&c, &g, 0.1, 0.5).unwrap();
        assert!(step <= (0.1 / SQRT_2).powi(4));
        assert!(2.0 * step > (0.1 / SQRT_2).powi(4));
        assert_eq!(step, g.step(level));
        assert_eq!(n, 100);
        let (level2, step2, n2) = standard_mc_budget(&c, &g, 0.05, 0.5).unwrap();
        assert_eq!(n2, 4 * n);
        assert_eq!(level2, level + 4);
        assert_eq!(step / step2, 16.0);
    }

    #[test]
    fn pilot_fills_only_missing_constants() {
        let p = SdeProblem::gbm(0.05, 0.2, 1.0, 1.0).unwrap();
        let f = Payoff::identity(1.0).unwrap();
        let given = PartialConstants {
            alpha: Some(1.0),
            beta: Some(1.0),
            c3: Some(2.0),
            ..Default::default()
        };
        let rep = pilot_constants(&p, &f, &Scheme::ClassicEm, &grid(2), &given, &PilotSettings::default(), 4).unwrap();
        assert_eq!(rep.fitted, vec!["c1", "c2"]);
        assert_eq!((rep.constants.alpha, rep.constants.beta, rep.constants.c3), (1.0, 1.0, 2.0));
        assert!(rep.constants.c1 > 0.0 && rep.constants.c2 > 0.0);
        assert_eq!(rep.constants.c2, rep.levels[1].sample_variance / 0.5);
        assert_eq!(rep.levels.len(), 5);

        let all = PilotSettings {
            variance_fit: VarianceFit::AllLevels,
            ..Default::default()
        };
        let wide = pilot_constants(&p, &f, &Scheme::ClassicEm, &grid(2), &given, &all, 4).unwrap();
        let expect = (0..5).map(|l| rep.levels[l].sample_variance / 0.5f64.powi(l as i32)).fold(0.0, f64::max);
        assert_eq!(wide.constants.c2, expect);
        assert_eq!(wide.constants.c2, rep.levels[0].sample_variance);

        let z = SdeProblem::zero(vec![1.0], 1.0).unwrap();
        let rep = pilot_constants(&z, &f, &Scheme::ClassicEm, &grid(2), &PartialConstants::default(), &PilotSettings::default(), 4).unwrap();
        assert_eq!((rep.constants.alpha, rep.constants.beta), (1.0, 1.0));
        assert_eq!(rep.constants.c1, CONSTANT_FLOOR);
        assert_eq!(rep.constants.c2, CONSTANT_FLOOR);
    }
}
