//! SDE problems, payoffs, level grids and reproducible Brownian increments.
//!
//! Every Brownian path is drawn from a [`RandomStream`] addressed by
//! `(seed, level, sample_index, role)`. The mapping from key to stream is
//! stateless, so a sample's increments do not depend on which worker thread
//! produced it or in which order samples were scheduled.

use std::fmt;
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Name of the generator/sampler pair, surfaced in report metadata.
pub const RNG_DESCRIPTION: &str = "ChaCha8 keyed streams; Gaussian via ziggurat (rand_distr StandardNormal)";

/// Drift `mu(x)`: writes `d` components into `out`.
pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Diffusion `sigma(x)`: writes a row-major `d x m` matrix into `out`.
pub type DiffusionFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Exact terminal state as a function of the terminal Brownian value `B(T)`.
pub type ExactTerminalFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// Payoff `f` of the terminal state.
pub type PayoffFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// An autonomous SDE `dX = mu(X) dt + sigma(X) dB` on `[0, T]`.
#[derive(Clone)]
pub struct SdeProblem {
    name: String,
    drift: DriftFn,
    diffusion: DiffusionFn,
    state_dim: usize,
    noise_dim: usize,
    initial_value: Vec<f64>,
    horizon: f64,
    exact_terminal: Option<ExactTerminalFn>,
}

impl fmt::Debug for SdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeProblem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("initial_value", &self.initial_value)
            .field("horizon", &self.horizon)
            .field("has_exact_terminal", &self.exact_terminal.is_some())
            .finish()
    }
}

impl SdeProblem {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        noise_dim: usize,
        initial_value: Vec<f64>,
        horizon: f64,
        drift: DriftFn,
        diffusion: DiffusionFn,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::invalid("state_dim", "must be at least 1"));
        }
        if noise_dim == 0 {
            return Err(Error::invalid("noise_dim", "must be at least 1"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon", format!("must be positive and finite, got {horizon}")));
        }
        if initial_value.len() != state_dim {
            return Err(Error::DimensionMismatch {
                what: "initial value",
                expected: state_dim,
                actual: initial_value.len(),
            });
        }
        if initial_value.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("initial_value", "components must be finite"));
        }
        Ok(Self {
            name: name.into(),
            drift,
            diffusion,
            state_dim,
            noise_dim,
            initial_value,
            horizon,
            exact_terminal: None,
        })
    }

    /// Attaches a closed-form terminal value `X(T) = g(B(T))`.
    pub fn with_exact_terminal(mut self, exact: ExactTerminalFn) -> Self {
        self.exact_terminal = Some(exact);
        self
    }

    /// The Lewis-type stochastic volatility model
    /// `dx = (x - x^3) dt + |x|^{3/2} dB`.
    pub fn lewis(x0: f64, horizon: f64) -> Result<Self> {
        Self::new(
            "lewis",
            1,
            1,
            vec![x0],
            horizon,
            Arc::new(|x, out| out[0] = x[0] - x[0] * x[0] * x[0]),
            Arc::new(|x, out| out[0] = x[0].abs().powf(1.5)),
        )
    }

    /// Geometric Brownian motion `dx = mu x dt + sigma x dB` with its exact solution.
    pub fn gbm(mu: f64, sigma: f64, x0: f64, horizon: f64) -> Result<Self> {
        let problem = Self::new(
            "gbm",
            1,
            1,
            vec![x0],
            horizon,
            Arc::new(move |x, out| out[0] = mu * x[0]),
            Arc::new(move |x, out| out[0] = sigma * x[0]),
        )?;
        let drift_term = (mu - 0.5 * sigma * sigma) * horizon;
        Ok(problem.with_exact_terminal(Arc::new(move |b| vec![x0 * (drift_term + sigma * b[0]).exp()])))
    }

    /// `dX = 0`: every scheme returns `x0` exactly.
    pub fn zero(x0: Vec<f64>, horizon: f64) -> Result<Self> {
        let d = x0.len();
        let start = x0.clone();
        let problem = Self::new(
            "zero",
            d,
            1,
            x0,
            horizon,
            Arc::new(|_, out| out.fill(0.0)),
            Arc::new(|_, out| out.fill(0.0)),
        )?;
        Ok(problem.with_exact_terminal(Arc::new(move |_| start.clone())))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn initial_value(&self) -> &[f64] {
        &self.initial_value
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn exact_terminal(&self, brownian_terminal: &[f64]) -> Option<Vec<f64>> {
        self.exact_terminal.as_ref().map(|g| g(brownian_terminal))
    }

    pub fn has_exact_terminal(&self) -> bool {
        self.exact_terminal.is_some()
    }
}

/// A payoff `f: R^d -> R` with its user-asserted polynomial growth constant.
#[derive(Clone)]
pub struct Payoff {
    name: String,
    eval: PayoffFn,
    growth_constant: f64,
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Payoff")
            .field("name", &self.name)
            .field("growth_constant", &self.growth_constant)
            .finish()
    }
}

impl Payoff {
    pub fn new(
        name: impl Into<String>,
        growth_constant: f64,
        eval: PayoffFn,
    ) -> Result<Self> {
        if !(growth_constant > 0.0 && growth_constant.is_finite()) {
            return Err(Error::invalid("growth_constant", format!("must be positive, got {growth_constant}")));
        }
        Ok(Self {
            name: name.into(),
            eval,
            growth_constant,
        })
    }

    /// First component of the state.
    pub fn identity(growth_constant: f64) -> Result<Self> {
        Self::new("identity", growth_constant, Arc::new(|x| x[0]))
    }

    /// Squared Euclidean norm of the state.
    pub fn square(growth_constant: f64) -> Result<Self> {
        Self::new("square", growth_constant, Arc::new(|x| x.iter().map(|v| v * v).sum()))
    }

    /// `max(x_0 - strike, 0)`.
    pub fn call(strike: f64, growth_constant: f64) -> Result<Self> {
        if !strike.is_finite() {
            return Err(Error::invalid("strike", "must be finite"));
        }
        Self::new(format!("call({strike})"), growth_constant, Arc::new(move |x| (x[0] - strike).max(0.0)))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn growth_constant(&self) -> f64 {
        self.growth_constant
    }
}

/// Geometric hierarchy of step sizes `s_l = M^{-l} T` for `0 <= l <= max_level`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGrid {
    refinement: u32,
    horizon: f64,
    max_level: usize,
}

impl LevelGrid {
    pub fn new(refinement: u32, horizon: f64, max_level: usize) -> Result<Self> {
        if refinement < 2 {
            return Err(Error::invalid("refinement", format!("must be at least 2, got {refinement}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon", format!("must be positive and finite, got {horizon}")));
        }
        // M^max_level steps must fit in usize and stay exact in f64.
        let limit = (53.0 / f64::from(refinement).log2()).floor() as usize;
        if max_level > limit {
            return Err(Error::invalid(
                "max_level",
                format!("M^{max_level} steps is not representable; limit for M={refinement} is {limit}"),
            ));
        }
        Ok(Self {
            refinement,
            horizon,
            max_level,
        })
    }

    pub fn refinement(&self) -> u32 {
        self.refinement
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    /// Returns a copy with a different maximum level.
    pub fn with_max_level(&self, max_level: usize) -> Result<Self> {
        Self::new(self.refinement, self.horizon, max_level)
    }

    /// Number of steps `T / s_l = M^l`.
    pub fn n_steps(&self, level: usize) -> usize {
        (self.refinement as usize).pow(level as u32)
    }

    /// Step size `s_l = T / M^l`.
    pub fn step(&self, level: usize) -> f64 {
        self.horizon / self.n_steps(level) as f64
    }

    pub(crate) fn check_level(&self, level: usize) -> Result<()> {
        if level > self.max_level {
            return Err(Error::LevelOutOfRange {
                level,
                max_level: self.max_level,
            });
        }
        Ok(())
    }
}

/// Which estimator a stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamRole {
    /// One Brownian path shared by a fine/coarse pair at level `l >= 1`.
    MlmcPair,
    /// A single path, as used by level 0 and plain Monte Carlo.
    Standalone,
}

impl StreamRole {
    fn tag(self) -> u64 {
        match self {
            StreamRole::MlmcPair => 0x01,
            StreamRole::Standalone => 0x02,
        }
    }
}

/// Address of one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomStream {
    pub seed: u64,
    pub level: u64,
    pub sample_index: u64,
    pub role: StreamRole,
}

impl RandomStream {
    /// Stream for sample `sample_index` at `level`, role inferred from the level.
    pub fn new(seed: u64, level: usize, sample_index: u64) -> Self {
        let role = if level == 0 {
            StreamRole::Standalone
        } else {
            StreamRole::MlmcPair
        };
        Self::with_role(seed, level, sample_index, role)
    }

    pub fn with_role(seed: u64, level: usize, sample_index: u64, role: StreamRole) -> Self {
        Self {
            seed,
            level: level as u64,
            sample_index,
            role,
        }
    }

    /// ChaCha key = (seed, level, role), ChaCha stream id = sample index.
    fn generator(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.level.to_le_bytes());
        key[16..24].copy_from_slice(&self.role.tag().to_le_bytes());
        key[24..32].copy_from_slice(b"tem-mlmc");
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.sample_index);
        rng
    }

    /// Iterator of independent standard normal draws from this stream.
    pub fn normals(&self) -> impl Iterator<Item = f64> {
        let mut rng = self.generator();
        std::iter::repeat_with(move || StandardNormal.sample(&mut rng))
    }
}

/// `make_stream(seed, level, sample_index)`.
pub fn make_stream(seed: u64, level: usize, sample_index: u64) -> RandomStream {
    RandomStream::new(seed, level, sample_index)
}

/// Derives an unrelated seed for an auxiliary run (pilot, baseline, reference)
/// so its streams never coincide with the main estimator's.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    // splitmix64 finaliser over the combined word
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Row-major `rows x cols` matrix of Brownian increments; row `k` is `dB_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl IncrementMatrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "increment matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Sums consecutive groups of `factor` rows, left to right.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.rows.is_multiple_of(factor) {
            return Err(Error::invalid(
                "factor",
                format!("{} rows are not divisible into groups of {factor}", self.rows),
            ));
        }
        let rows = self.rows / factor;
        let mut data = Vec::with_capacity(rows * self.cols);
        for group in 0..rows {
            let first = group * factor;
            for j in 0..self.cols {
                let mut acc = self.data[first * self.cols + j];
                for k in first + 1..first + factor {
                    acc += self.data[k * self.cols + j];
                }
                data.push(acc);
            }
        }
        Ok(Self {
            rows,
            cols: self.cols,
            data,
        })
    }

    /// Column sums in row order: the terminal Brownian value `B(T) - B(0)`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for k in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(k)) {
                *s += v;
            }
        }
        sums
    }
}

/// `n_steps x noise_dim` i.i.d. `N(0, dt)` draws from `stream`.
pub fn brownian_increments(stream: &RandomStream, n_steps: usize, dt: f64, noise_dim: usize) -> Result<IncrementMatrix> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps", "must be at least 1"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", format!("must be positive and finite, got {dt}")));
    }
    if noise_dim == 0 {
        return Err(Error::invalid("noise_dim", "must be at least 1"));
    }
    let scale = dt.sqrt();
    let data = stream.normals().take(n_steps * noise_dim).map(|z| z * scale).collect();
    IncrementMatrix::from_rows(n_steps, noise_dim, data)
}

/// Fine increments at `s_l` and the coarse increments at `s_{l-1}` obtained by
/// summing each group of `M` fine increments.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledIncrements {
    pub fine: IncrementMatrix,
    pub coarse: IncrementMatrix,
}

pub fn coupled_increments(stream: &RandomStream, grid: &LevelGrid, level: usize, noise_dim: usize) -> Result<CoupledIncrements> {
    if level == 0 {
        return Err(Error::NoCoarseLevel(0));
    }
    grid.check_level(level)?;
    let fine = brownian_increments(stream, grid.n_steps(level), grid.step(level), noise_dim)?;
    let coarse = fine.coarsen(grid.refinement() as usize)?;
    Ok(CoupledIncrements { fine, coarse })
}
