//! Empirical rates and the MLMC-versus-Monte-Carlo cost sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlmc::{run_level, run_mlmc, run_standard_mc, standard_mc_budget, RateConstants, BASELINE_SALT};
use crate::schemes::{simulate_terminal, Scheme};
use crate::sde_core::{brownian_increments, derive_seed, LevelGrid, Payoff, RandomStream, SdeProblem, StreamRole};

/// Least-squares line through `(ln step, ln value)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// The fitted `(ln step, ln value)` pairs.
    pub points: Vec<(f64, f64)>,
}

/// Ordinary least squares of `ln(value)` on `ln(step)`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::invalid("points", format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(&(s, v)) = points.iter().find(|(s, v)| !(*s > 0.0 && *v > 0.0 && s.is_finite() && v.is_finite())) {
        return Err(Error::invalid("points", format!("steps and values must be positive and finite, got ({s}, {v})")));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(s, v)| (s.ln(), v.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("points", "steps are all equal"));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        points: logs,
    })
}

/// Where the strong-error curve gets its "true" terminal values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Closed-form solution driven by the same Brownian path.
    Exact,
    /// The same scheme on a grid `refinement^extra_levels` times finer.
    Reference { level: usize },
}

/// Strong error of one level against the oracle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrongErrorPoint {
    pub level: usize,
    pub step: f64,
    /// `sqrt(E|X_s(T) - X(T)|^2)`.
    pub rms: f64,
    /// `E|X_s(T) - X(T)|`.
    pub mean_abs: f64,
    pub n_nonfinite: u64,
}

/// Reference level for problems without a closed form: at least 64 times
/// finer than the finest requested level.
pub fn reference_level(grid: &LevelGrid, finest: usize) -> usize {
    let mut extra = 0;
    while (grid.refinement() as usize).pow(extra as u32) < 64 {
        extra += 1;
    }
    finest + extra
}

fn check_levels(levels: &[usize]) -> Result<usize> {
    if levels.is_empty() {
        return Err(Error::invalid("levels", "no levels requested"));
    }
    Ok(*levels.iter().max().expect("nonempty"))
}

/// RMS and mean absolute terminal error per level, every level driven by
/// sums of one fine Brownian path per sample.
pub fn strong_error_curve(
    problem: &SdeProblem,
    scheme: &Scheme,
    grid: &LevelGrid,
    levels: &[usize],
    n_paths: u64,
    seed: u64,
) -> Result<(OracleKind, Vec<StrongErrorPoint>)> {
    let finest = check_levels(levels)?;
    if n_paths == 0 {
        return Err(Error::invalid("n_paths", "must be at least 1"));
    }
    let oracle = if problem.has_exact_terminal() {
        OracleKind::Exact
    } else {
        OracleKind::Reference {
            level: reference_level(grid, finest),
        }
    };
    let driver_level = match oracle {
        OracleKind::Exact => finest,
        OracleKind::Reference { level } => level,
    };
    let drive_grid = grid.with_max_level(driver_level.max(grid.max_level()))?;
    let m = grid.refinement() as usize;

    let per_path: Vec<Vec<Option<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<Vec<Option<f64>>> {
            let stream = RandomStream::with_role(seed, driver_level, i, StreamRole::Standalone);
            let inc = brownian_increments(&stream, drive_grid.n_steps(driver_level), drive_grid.step(driver_level), problem.noise_dim())?;
            let truth = match oracle {
                OracleKind::Exact => Some(problem.exact_terminal(&inc.column_sums()).expect("exact oracle present")),
                OracleKind::Reference { level } => {
                    let out = simulate_terminal(problem, scheme, drive_grid.step(level), &inc)?;
                    out.finite.then_some(out.terminal_state)
                }
            };
            levels
                .iter()
                .map(|&l| {
                    let coarse = inc.coarsen(m.pow((driver_level - l) as u32))?;
                    let out = simulate_terminal(problem, scheme, drive_grid.step(l), &coarse)?;
                    Ok(match (&truth, out.finite) {
                        (Some(x), true) => {
                            let err = x.iter().zip(&out.terminal_state).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                            err.is_finite().then_some(err)
                        }
                        _ => None,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let points = levels
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let (mut sq, mut abs, mut count, mut bad) = (0.0, 0.0, 0u64, 0u64);
            for row in &per_path {
                match row[k] {
                    Some(e) => {
                        sq += e * e;
                        abs += e;
                        count += 1;
                    }
                    None => bad += 1,
                }
            }
            let n = count.max(1) as f64;
            StrongErrorPoint {
                level: l,
                step: drive_grid.step(l),
                rms: (sq / n).sqrt(),
                mean_abs: abs / n,
                n_nonfinite: bad,
            }
        })
        .collect();
    Ok((oracle, points))
}

/// Sample variance of `f(fine) - f(coarse)` at one level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariancePoint {
    pub level: usize,
    pub step: f64,
    pub variance: f64,
    pub mean: f64,
    pub n_nonfinite: u64,
}

pub fn variance_decay_curve(
    problem: &SdeProblem,
    payoff: &Payoff,
    scheme: &Scheme,
    grid: &LevelGrid,
    levels: &[usize],
    n_paths: u64,
    seed: u64,
) -> Result<Vec<VariancePoint>> {
    let finest = check_levels(levels)?;
    if levels.contains(&0) {
        return Err(Error::invalid("levels", "variance decay needs levels >= 1"));
    }
    let grid = grid.with_max_level(finest.max(grid.max_level()))?;
    levels
        .iter()
        .map(|&l| {
            let est = run_level(problem, payoff, scheme, &grid, l, n_paths, seed)?;
            Ok(VariancePoint {
                level: l,
                step: grid.step(l),
                variance: est.sample_variance,
                mean: est.mean,
                n_nonfinite: est.n_nonfinite,
            })
        })
        .collect()
}

/// One accuracy target of the cost sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub epsilon: f64,
    pub mlmc_cost: f64,
    pub mc_cost: f64,
    pub mlmc_estimate: f64,
    pub mc_estimate: f64,
    pub finest_level: usize,
    pub mc_samples: u64,
}

impl CostRow {
    pub fn ratio(&self) -> f64 {
        self.mc_cost / self.mlmc_cost
    }
}

/// Costs of both estimators over a list of accuracy targets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostCurve {
    pub rows: Vec<CostRow>,
    /// Payoff variance used to size the baseline.
    pub baseline_variance: f64,
}

impl CostCurve {
    pub fn epsilons(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.epsilon).collect()
    }

    pub fn mlmc_costs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mlmc_cost).collect()
    }

    pub fn mc_costs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mc_cost).collect()
    }
}

/// Baseline variance pilot: standalone paths at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinePilot {
    pub level: usize,
    pub paths: u64,
}

impl Default for BaselinePilot {
    fn default() -> Self {
        Self { level: 4, paths: 1000 }
    }
}

/// For each `epsilon` (strictly decreasing), runs the multi-level estimator
/// and plain Monte Carlo sized by [`standard_mc_budget`], recording both costs.
#[allow(clippy::too_many_arguments)]
pub fn cost_curve(
    problem: &SdeProblem,
    payoff: &Payoff,
    scheme: &Scheme,
    consts: &RateConstants,
    grid: &LevelGrid,
    epsilons: &[f64],
    baseline_pilot: BaselinePilot,
    seed: u64,
) -> Result<CostCurve> {
    if epsilons.is_empty() {
        return Err(Error::invalid("epsilons", "empty list"));
    }
    if epsilons.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("epsilons", "must be strictly decreasing"));
    }
    let baseline_seed = derive_seed(seed, BASELINE_SALT);
    let pilot_grid = grid.with_max_level(baseline_pilot.level.max(grid.max_level()))?;
    let pilot = run_standard_mc(
        problem,
        payoff,
        scheme,
        pilot_grid.step(baseline_pilot.level),
        baseline_pilot.paths,
        derive_seed(baseline_seed, 1),
    )?;
    let baseline_variance = pilot.variance;
    let rows = epsilons
        .iter()
        .map(|&eps| {
            let ml = run_mlmc(problem, payoff, scheme, consts, grid, eps, seed)?;
            let (_, step, n) = standard_mc_budget(consts, grid, eps, baseline_variance)?;
            let mc = run_standard_mc(problem, payoff, scheme, step, n, baseline_seed)?;
            Ok(CostRow {
                epsilon: eps,
                mlmc_cost: ml.total_cost,
                mc_cost: mc.cost,
                mlmc_estimate: ml.estimate,
                mc_estimate: mc.estimate,
                finest_level: ml.plan.finest_level,
                mc_samples: n,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CostCurve { rows, baseline_variance })
}
