//! Command-line front end: JSON experiment configs, the four subcommands and
//! their CSV/JSON outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, BaselinePilot, CostCurve, CostRow, OracleKind, RateFit, StrongErrorPoint, VariancePoint};
use crate::error::Error;
use crate::mlmc::{self, LevelEstimate, MlmcPlan, PartialConstants, PilotSettings, RateConstants};
use crate::schemes::{Scheme, SchemeKind, TruncationConfig};
use crate::sde_core::{LevelGrid, Payoff, SdeProblem, RNG_DESCRIPTION};

/// Exit code for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for planning errors.
pub const EXIT_PLANNING: i32 = 3;

/// CSV divergence marker.
pub const DIV: &str = "DIV";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Planning,
}

/// Machine-readable failure: a stable `code`, the offending field path and a message.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub code: &'static str,
    pub field: String,
    pub message: String,
}

impl CliError {
    fn config(code: &'static str, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            code,
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => EXIT_CONFIG,
            ErrorKind::Planning => EXIT_PLANNING,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.field, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Planning(msg) => CliError {
                kind: ErrorKind::Planning,
                code: "planning_failed",
                field: "epsilon".into(),
                message: msg,
            },
            Error::InvalidArgument { name, reason } => CliError::config("invalid_value", name, reason),
            Error::InvalidTruncation { .. } => CliError::config("invalid_truncation", "truncation", e.to_string()),
            Error::LevelOutOfRange { .. } => CliError::config("level_out_of_range", "levels", e.to_string()),
            other => CliError::config("invalid_value", "", other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// A named function with numeric parameters, e.g. `{"name": "power", "params": {"coef": 2, "power": 3}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedFn {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub name: String,
    pub x0: f64,
    pub horizon: f64,
    pub params: BTreeMap<String, f64>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            name: "lewis".into(),
            x0: 1.7,
            horizon: 1.0,
            params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PayoffConfig {
    pub name: String,
    pub strike: Option<f64>,
    pub growth_constant: f64,
}

impl Default for PayoffConfig {
    fn default() -> Self {
        Self {
            name: "identity".into(),
            strike: None,
            growth_constant: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationSpec {
    pub omega: NamedFn,
    pub h: NamedFn,
    pub s_star: f64,
}

impl Default for TruncationSpec {
    fn default() -> Self {
        let params = |a: f64, b: f64| BTreeMap::from([("coef".to_string(), a), ("power".to_string(), b)]);
        Self {
            omega: NamedFn {
                name: "power".into(),
                params: params(2.0, 3.0),
            },
            h: NamedFn {
                name: "power".into(),
                params: params(1.0, 0.25),
            },
            s_star: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub refinement: i64,
    pub max_level: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            refinement: 2,
            max_level: 20,
        }
    }
}

/// `"pilot"` or a (possibly partial) set of constants; missing entries come from the pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConstantsSpec {
    Mode(String),
    Values(ConstantValues),
}

impl Default for ConstantsSpec {
    fn default() -> Self {
        ConstantsSpec::Mode("pilot".into())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantValues {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
}

/// The JSON experiment description. Every field has a default, so `{}`
/// describes the truncated scheme on `lewis` with the default design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub payoff: PayoffConfig,
    pub scheme: String,
    pub truncation: TruncationSpec,
    pub grid: GridConfig,
    pub constants: ConstantsSpec,
    pub pilot: PilotSettings,
    pub baseline_pilot: BaselinePilot,
    pub seed: u64,
    pub n_paths: u64,
    pub levels: Vec<usize>,
    pub epsilon: Option<f64>,
    pub epsilons: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            payoff: PayoffConfig::default(),
            scheme: "truncated_em".into(),
            truncation: TruncationSpec::default(),
            grid: GridConfig::default(),
            constants: ConstantsSpec::default(),
            pilot: PilotSettings::default(),
            baseline_pilot: BaselinePilot::default(),
            seed: 1,
            n_paths: 1000,
            levels: vec![1, 2, 3, 4, 5],
            epsilon: None,
            epsilons: vec![0.1, 0.05, 0.02, 0.01],
        }
    }
}

/// Parses a JSON config; unknown keys are rejected with their path.
pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let message = e.inner().to_string();
        let code = if message.starts_with("unknown field") {
            "unknown_field"
        } else if message.starts_with("missing field") {
            "missing_field"
        } else {
            "parse_error"
        };
        CliError::config(code, field, message)
    })
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config("io_error", path.display().to_string(), e.to_string()))?;
    parse_config(&text)
}

fn take_params(field: &str, params: &BTreeMap<String, f64>, names: &[&str]) -> CliResult<Vec<f64>> {
    if let Some(extra) = params.keys().find(|k| !names.contains(&k.as_str())) {
        return Err(CliError::config("unknown_name", format!("{field}.params.{extra}"), format!("unknown parameter `{extra}`")));
    }
    names
        .iter()
        .map(|n| {
            params
                .get(*n)
                .copied()
                .ok_or_else(|| CliError::config("missing_field", format!("{field}.params.{n}"), format!("parameter `{n}` is required")))
        })
        .collect()
}

fn finite(field: &str, v: f64) -> CliResult<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::config("invalid_value", field, format!("must be finite, got {v}")))
    }
}

/// How the run obtained its rate constants.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstantsSource {
    Theorem(RateConstants),
    Pilot(PartialConstants),
}

/// A validated config with every name resolved.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub problem: SdeProblem,
    pub payoff: Payoff,
    pub scheme: Scheme,
    pub grid: LevelGrid,
    pub constants: ConstantsSource,
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    /// Checks and resolves every field before any simulation runs.
    pub fn resolve(&self) -> CliResult<Resolved> {
        let mut warnings = Vec::new();
        let horizon = finite("problem.horizon", self.problem.horizon)?;
        if horizon <= 0.0 {
            return Err(CliError::config("nonpositive_horizon", "problem.horizon", format!("must be positive, got {horizon}")));
        }
        if self.grid.refinement < 2 {
            return Err(CliError::config(
                "refinement_below_two",
                "grid.refinement",
                format!("must be at least 2, got {}", self.grid.refinement),
            ));
        }
        let refinement = u32::try_from(self.grid.refinement)
            .map_err(|_| CliError::config("invalid_value", "grid.refinement", "too large"))?;
        let grid = LevelGrid::new(refinement, horizon, self.grid.max_level)
            .map_err(|e| CliError::config("invalid_value", "grid.max_level", e.to_string()))?;

        let x0 = finite("problem.x0", self.problem.x0)?;
        let problem = match self.problem.name.as_str() {
            "lewis" => {
                take_params("problem", &self.problem.params, &[])?;
                SdeProblem::lewis(x0, horizon)
            }
            "gbm" => {
                let p = take_params("problem", &self.problem.params, &["mu", "sigma"])?;
                SdeProblem::gbm(finite("problem.params.mu", p[0])?, finite("problem.params.sigma", p[1])?, x0, horizon)
            }
            "zero" => {
                take_params("problem", &self.problem.params, &[])?;
                SdeProblem::zero(vec![x0], horizon)
            }
            other => return Err(CliError::config("unknown_name", "problem.name", format!("unknown problem `{other}`"))),
        }?;

        let growth = self.payoff.growth_constant;
        let payoff = match (self.payoff.name.as_str(), self.payoff.strike) {
            ("identity", None) => Payoff::identity(growth),
            ("square", None) => Payoff::square(growth),
            ("call", Some(k)) => Payoff::call(finite("payoff.strike", k)?, growth),
            ("call", None) => return Err(CliError::config("missing_field", "payoff.strike", "call payoff needs a strike")),
            ("identity" | "square", Some(_)) => {
                return Err(CliError::config("invalid_value", "payoff.strike", "strike only applies to `call`"))
            }
            (other, _) => return Err(CliError::config("unknown_name", "payoff.name", format!("unknown payoff `{other}`"))),
        }
        .map_err(|e| CliError::config("invalid_value", "payoff.growth_constant", e.to_string()))?;

        let kind = match self.scheme.as_str() {
            "classic_em" => SchemeKind::ClassicEm,
            "truncated_em" => SchemeKind::TruncatedEm,
            other => return Err(CliError::config("unknown_name", "scheme", format!("unknown scheme `{other}`"))),
        };
        let t = &self.truncation;
        if !(t.s_star > 0.0 && t.s_star <= 1.0) {
            return Err(CliError::config("s_star_out_of_range", "truncation.s_star", format!("must lie in (0, 1], got {}", t.s_star)));
        }
        let scheme = match kind {
            SchemeKind::ClassicEm => Scheme::ClassicEm,
            SchemeKind::TruncatedEm => {
                let design = self.truncation_design()?;
                warnings.extend(design.warnings().iter().map(|w| w.to_string()));
                if let Some(w) = design.step_warning(grid.step(0)) {
                    warnings.push(w.to_string());
                }
                Scheme::TruncatedEm(design)
            }
        };

        let constants = match &self.constants {
            ConstantsSpec::Mode(m) if m == "pilot" => ConstantsSource::Pilot(PartialConstants::default()),
            ConstantsSpec::Mode(m) => return Err(CliError::config("unknown_name", "constants", format!("unknown constants mode `{m}`"))),
            ConstantsSpec::Values(v) => {
                let partial = PartialConstants {
                    alpha: v.alpha,
                    beta: v.beta,
                    c1: v.c1,
                    c2: v.c2,
                    c3: v.c3,
                };
                match partial.complete() {
                    Some(c) => ConstantsSource::Theorem(c),
                    None if [v.alpha, v.beta, v.c1, v.c2, v.c3].iter().all(|x| x.is_some()) => {
                        let e = RateConstants::new(v.alpha.unwrap(), v.beta.unwrap(), v.c1.unwrap(), v.c2.unwrap(), v.c3.unwrap())
                            .expect_err("complete() rejected these constants");
                        return Err(CliError::config("invalid_value", "constants", e.to_string()));
                    }
                    None => ConstantsSource::Pilot(partial),
                }
            }
        };

        if self.n_paths == 0 {
            return Err(CliError::config("invalid_value", "n_paths", "must be at least 1"));
        }
        if let Some(&l) = self.levels.iter().find(|&&l| l == 0) {
            return Err(CliError::config("invalid_value", "levels", format!("levels start at 1, got {l}")));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(CliError::config("invalid_value", "epsilon", format!("must be positive, got {eps}")));
            }
        }
        if let Some(eps) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(CliError::config("invalid_value", "epsilons", format!("must be positive, got {eps}")));
        }

        Ok(Resolved {
            config: self.clone(),
            problem,
            payoff,
            scheme,
            grid,
            constants,
            warnings,
        })
    }

    fn truncation_design(&self) -> CliResult<TruncationConfig> {
        let t = &self.truncation;
        if t.omega.name != "power" {
            return Err(CliError::config("unknown_name", "truncation.omega.name", format!("unknown omega `{}`", t.omega.name)));
        }
        if t.h.name != "power" {
            return Err(CliError::config("unknown_name", "truncation.h.name", format!("unknown h `{}`", t.h.name)));
        }
        let w = take_params("truncation.omega", &t.omega.params, &["coef", "power"])?;
        let h = take_params("truncation.h", &t.h.params, &["coef", "power"])?;
        TruncationConfig::power_law(w[0], w[1], h[0], h[1], t.s_star).map_err(|e| CliError::config("invalid_truncation", "truncation", e.to_string()))
    }
}

/// Metadata attached to every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub seed: u64,
    pub rng: &'static str,
    pub problem: String,
    pub payoff: String,
    pub scheme: SchemeKind,
    pub truncation: Option<String>,
    pub constants_mode: &'static str,
    pub constants: Option<RateConstants>,
    pub pilot: Option<PilotSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PilotSummary {
    /// Pilot constants are estimates; the theorem's guarantee assumes exact ones.
    pub heuristic: bool,
    pub fitted: Vec<&'static str>,
    pub paths: u64,
    pub levels: usize,
    pub cost: f64,
}

impl Resolved {
    fn metadata(&self, constants: Option<RateConstants>, pilot: Option<PilotSummary>) -> Metadata {
        Metadata {
            seed: self.config.seed,
            rng: RNG_DESCRIPTION,
            problem: self.problem.name().to_string(),
            payoff: self.payoff.name().to_string(),
            scheme: self.scheme.kind(),
            truncation: match &self.scheme {
                Scheme::TruncatedEm(c) => Some(c.label().to_string()),
                Scheme::ClassicEm => None,
            },
            constants_mode: match &self.constants {
                ConstantsSource::Theorem(_) => "theorem",
                ConstantsSource::Pilot(_) => "pilot",
            },
            constants,
            pilot,
        }
    }

    /// Theorem constants as given, or the pilot's completion of the partial set.
    pub fn rate_constants(&self) -> CliResult<(RateConstants, Option<PilotSummary>)> {
        match &self.constants {
            ConstantsSource::Theorem(c) => Ok((*c, None)),
            ConstantsSource::Pilot(partial) => {
                let rep = mlmc::pilot_constants(
                    &self.problem,
                    &self.payoff,
                    &self.scheme,
                    &self.grid,
                    partial,
                    &self.config.pilot,
                    self.config.seed,
                )?;
                Ok((
                    rep.constants,
                    Some(PilotSummary {
                        heuristic: true,
                        fitted: rep.fitted,
                        paths: self.config.pilot.paths,
                        levels: self.config.pilot.levels,
                        cost: rep.cost,
                    }),
                ))
            }
        }
    }
}

/// Formats a real with 17 significant digits so it parses back exactly.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_real(s: &str) -> Option<f64> {
    s.parse().ok()
}

fn write_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

fn read_csv(text: &str, header: &[&str]) -> Option<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let got = r.headers().ok()?;
    if got.iter().ne(header.iter().copied()) {
        return None;
    }
    r.records().collect::<std::result::Result<_, _>>().ok()
}

/// One level of a table run. `y_hat` is `None` when every sample diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub level: usize,
    pub y_hat: Option<f64>,
    pub n_samples: u64,
    pub variance: f64,
    pub n_nonfinite: u64,
}

impl From<&LevelEstimate> for TableRow {
    fn from(e: &LevelEstimate) -> Self {
        Self {
            level: e.level,
            y_hat: (!e.all_nonfinite()).then_some(e.mean),
            n_samples: e.n_samples,
            variance: e.sample_variance,
            n_nonfinite: e.n_nonfinite,
        }
    }
}

const TABLE_HEADER: [&str; 5] = ["level", "y_hat", "n_samples", "variance", "n_nonfinite"];

pub fn table_csv(rows: &[TableRow]) -> String {
    write_csv(
        &TABLE_HEADER,
        rows.iter().map(|r| {
            vec![
                r.level.to_string(),
                r.y_hat.map_or_else(|| DIV.to_string(), fmt_real),
                r.n_samples.to_string(),
                fmt_real(r.variance),
                r.n_nonfinite.to_string(),
            ]
        }),
    )
}

pub fn parse_table_csv(text: &str) -> Option<Vec<TableRow>> {
    read_csv(text, &TABLE_HEADER)?
        .iter()
        .map(|r| {
            Some(TableRow {
                level: r.get(0)?.parse().ok()?,
                y_hat: match r.get(1)? {
                    DIV => None,
                    s => Some(parse_real(s)?),
                },
                n_samples: r.get(2)?.parse().ok()?,
                variance: parse_real(r.get(3)?)?,
                n_nonfinite: r.get(4)?.parse().ok()?,
            })
        })
        .collect()
}

/// `Y_l` at each configured level with `n_paths` samples.
pub fn cmd_table(run: &Resolved) -> CliResult<Vec<TableRow>> {
    let max = run.config.levels.iter().copied().max().unwrap_or(0);
    let grid = run.grid.with_max_level(max.max(run.grid.max_level()))?;
    run.config
        .levels
        .iter()
        .map(|&l| {
            let est = mlmc::run_level(&run.problem, &run.payoff, &run.scheme, &grid, l, run.config.n_paths, run.config.seed)?;
            Ok(TableRow::from(&est))
        })
        .collect()
}

/// Full report of one multi-level run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlmcReport {
    pub estimate: f64,
    pub total_cost: f64,
    pub complexity_bound: f64,
    pub divergent: bool,
    pub plan: MlmcPlan,
    pub levels: Vec<LevelEstimate>,
    pub warnings: Vec<String>,
    pub metadata: Metadata,
}

pub fn cmd_mlmc(run: &Resolved) -> CliResult<MlmcReport> {
    let epsilon = run
        .config
        .epsilon
        .ok_or_else(|| CliError::config("missing_field", "epsilon", "the mlmc subcommand needs `epsilon`"))?;
    let mut warnings = run.warnings.clone();
    if !mlmc::epsilon_in_theorem_range(epsilon) {
        warnings.push(format!("epsilon {epsilon} is not below 1/e; the complexity bound assumes it is"));
    }
    let (constants, pilot) = run.rate_constants()?;
    let result = mlmc::run_mlmc(&run.problem, &run.payoff, &run.scheme, &constants, &run.grid, epsilon, run.config.seed)?;
    if let Scheme::TruncatedEm(c) = &run.scheme {
        if let Some(w) = c.step_warning(run.grid.step(0)) {
            warnings.push(w.to_string());
        }
    }
    warnings.dedup();
    Ok(MlmcReport {
        estimate: result.estimate,
        total_cost: result.total_cost,
        complexity_bound: result.plan.predicted_cost_bound,
        divergent: result.divergent,
        plan: result.plan,
        levels: result.levels,
        warnings,
        metadata: run.metadata(Some(constants), pilot),
    })
}

const COST_HEADER: [&str; 4] = ["epsilon", "mlmc_cost", "mc_cost", "ratio"];

/// The cost sweep over `epsilons`, returned with the constants it used.
pub fn cmd_cost_curve(run: &Resolved) -> CliResult<(CostCurve, Metadata)> {
    let (constants, pilot) = run.rate_constants()?;
    let curve = analysis::cost_curve(
        &run.problem,
        &run.payoff,
        &run.scheme,
        &constants,
        &run.grid,
        &run.config.epsilons,
        run.config.baseline_pilot,
        run.config.seed,
    )?;
    Ok((curve, run.metadata(Some(constants), pilot)))
}

/// A parsed cost-curve CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostCsvRow {
    pub epsilon: f64,
    pub mlmc_cost: f64,
    pub mc_cost: f64,
    pub ratio: f64,
}

impl From<&CostRow> for CostCsvRow {
    fn from(r: &CostRow) -> Self {
        Self {
            epsilon: r.epsilon,
            mlmc_cost: r.mlmc_cost,
            mc_cost: r.mc_cost,
            ratio: r.ratio(),
        }
    }
}

pub fn cost_curve_csv(rows: &[CostCsvRow]) -> String {
    write_csv(
        &COST_HEADER,
        rows.iter()
            .map(|r| vec![fmt_real(r.epsilon), fmt_real(r.mlmc_cost), fmt_real(r.mc_cost), fmt_real(r.ratio)]),
    )
}

pub fn parse_cost_curve_csv(text: &str) -> Option<Vec<CostCsvRow>> {
    read_csv(text, &COST_HEADER)?
        .iter()
        .map(|r| {
            Some(CostCsvRow {
                epsilon: parse_real(r.get(0)?)?,
                mlmc_cost: parse_real(r.get(1)?)?,
                mc_cost: parse_real(r.get(2)?)?,
                ratio: parse_real(r.get(3)?)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
}

impl FitSummary {
    fn of(points: &[(f64, f64)]) -> Self {
        match analysis::fit_rate(points) {
            Ok(fit) => Self { fit: Some(fit), fit_error: None },
            Err(e) => Self {
                fit: None,
                fit_error: Some(e.to_string()),
            },
        }
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.slope)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatesSummary {
    pub oracle: OracleKind,
    pub strong: FitSummary,
    pub variance: FitSummary,
    pub warnings: Vec<String>,
    pub metadata: Metadata,
}

/// Strong-error and variance-decay curves with their fitted slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct RatesReport {
    pub strong: Vec<StrongErrorPoint>,
    pub variance: Vec<VariancePoint>,
    pub summary: RatesSummary,
}

pub fn cmd_rates(run: &Resolved) -> CliResult<RatesReport> {
    let c = &run.config;
    let (oracle, strong) = analysis::strong_error_curve(&run.problem, &run.scheme, &run.grid, &c.levels, c.n_paths, c.seed)?;
    let variance = analysis::variance_decay_curve(&run.problem, &run.payoff, &run.scheme, &run.grid, &c.levels, c.n_paths, c.seed)?;
    let strong_fit = FitSummary::of(&strong.iter().map(|p| (p.step, p.rms)).collect::<Vec<_>>());
    let variance_fit = FitSummary::of(&variance.iter().map(|p| (p.step, p.variance)).collect::<Vec<_>>());
    Ok(RatesReport {
        strong,
        variance,
        summary: RatesSummary {
            oracle,
            strong: strong_fit,
            variance: variance_fit,
            warnings: run.warnings.clone(),
            metadata: run.metadata(None, None),
        },
    })
}

pub fn strong_csv(points: &[StrongErrorPoint]) -> String {
    write_csv(
        &["level", "step", "rms", "mean_abs", "n_nonfinite"],
        points.iter().map(|p| {
            vec![
                p.level.to_string(),
                fmt_real(p.step),
                fmt_real(p.rms),
                fmt_real(p.mean_abs),
                p.n_nonfinite.to_string(),
            ]
        }),
    )
}

pub fn variance_csv(points: &[VariancePoint]) -> String {
    write_csv(
        &["level", "step", "variance", "mean", "n_nonfinite"],
        points.iter().map(|p| {
            vec![
                p.level.to_string(),
                fmt_real(p.step),
                fmt_real(p.variance),
                fmt_real(p.mean),
                p.n_nonfinite.to_string(),
            ]
        }),
    )
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

#[derive(Debug, Parser)]
#[command(name = "tem-mlmc", version, about = "Multi-level Monte Carlo with the truncated Euler-Maruyama scheme")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files; stdout otherwise.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Per-level estimates for levels 1..5.
    Table,
    /// One multi-level run at the configured epsilon, as JSON.
    Mlmc,
    /// Multi-level and plain Monte Carlo costs over the epsilon list.
    CostCurve,
    /// Strong-error and variance-decay curves with fitted slopes.
    Rates,
}

/// Files produced by a subcommand, in write order.
pub fn execute(command: Command, run: &Resolved) -> CliResult<Vec<(&'static str, String)>> {
    Ok(match command {
        Command::Table => vec![("table.csv", table_csv(&cmd_table(run)?))],
        Command::Mlmc => vec![("mlmc.json", pretty_json(&cmd_mlmc(run)?))],
        Command::CostCurve => {
            let (curve, metadata) = cmd_cost_curve(run)?;
            let rows: Vec<CostCsvRow> = curve.rows.iter().map(CostCsvRow::from).collect();
            let detail = serde_json::json!({ "curve": curve, "warnings": run.warnings, "metadata": metadata });
            vec![("cost_curve.csv", cost_curve_csv(&rows)), ("cost_curve.json", pretty_json(&detail))]
        }
        Command::Rates => {
            let rep = cmd_rates(run)?;
            vec![
                ("strong.csv", strong_csv(&rep.strong)),
                ("variance.csv", variance_csv(&rep.variance)),
                ("rates.json", pretty_json(&rep.summary)),
            ]
        }
    })
}

fn run_cli(cli: &Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let run = config.resolve()?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let files = execute(cli.command, &run)?;
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::config("io_error", "out", e.to_string()))?;
            for (name, body) in files {
                fs::write(dir.join(name), body).map_err(|e| CliError::config("io_error", "out", e.to_string()))?;
            }
        }
        None => {
            // Only the primary output goes to stdout.
            print!("{}", files[0].1);
        }
    }
    Ok(())
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("{}", CliError::config("invalid_value", "threads", "must be at least 1").to_json());
            return EXIT_CONFIG;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", CliError::config("invalid_value", "threads", e.to_string()).to_json());
            return EXIT_CONFIG;
        }
    }
    match run_cli(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
