//! Gaussian-process Bayesian optimization with expected improvement.
//!
//! The surrogate works in the unit cube: every dimension of a
//! [`SearchSpace`] is mapped linearly onto `[0, 1]`. The kernel is
//! squared-exponential,
//!
//! ```text
//! k(x, x') = σ² · exp(−Σ_d (x_d − x'_d)² / (2 ℓ_d²))
//! ```
//!
//! with fixed `σ² = 1`, `ℓ_d = 0.2` and no observation noise beyond a jitter
//! that escalates from `1e-10` to `1e-6` until the Cholesky factorization
//! succeeds. Inside [`bo_loop`] the observed values are standardized to
//! zero mean and unit variance before fitting.
//!
//! Integer dimensions are optimized continuously and rounded whenever a
//! point is evaluated or reported.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionBlockConfig, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimKind {
    Integer,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub kind: DimKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self> {
        let s = SearchSpace { dims };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidArgument("search space has no dimensions".into()));
        }
        for d in &self.dims {
            if !(d.lower.is_finite() && d.upper.is_finite()) || d.lower > d.upper {
                return Err(Error::InvalidArgument(format!(
                    "dimension {:?}: bounds [{}, {}] are invalid",
                    d.name, d.lower, d.upper
                )));
            }
            if d.kind == DimKind::Integer && (d.lower.fract() != 0.0 || d.upper.fract() != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "integer dimension {:?} needs integral bounds",
                    d.name
                )));
            }
        }
        Ok(())
    }

    /// One integer dimension `filters_<i>` in `[lower, upper]` per layer.
    pub fn filters(layers: usize, lower: usize, upper: usize) -> Result<Self> {
        SearchSpace::new(
            (1..=layers)
                .map(|i| Dim {
                    name: format!("filters_{}", i),
                    lower: lower as f64,
                    upper: upper as f64,
                    kind: DimKind::Integer,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.dims)
            .map(|(&v, d)| if d.upper > d.lower { (v - d.lower) / (d.upper - d.lower) } else { 0.5 })
            .collect()
    }

    /// Maps a unit-cube point back, clamping and rounding integer dimensions.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.dims)
            .map(|(&v, d)| {
                let x = d.lower + v.clamp(0.0, 1.0) * (d.upper - d.lower);
                match d.kind {
                    DimKind::Integer => x.round().clamp(d.lower, d.upper),
                    DimKind::Continuous => x,
                }
            })
            .collect()
    }

    /// Rounds `u` onto the representable grid (integer dimensions only).
    pub fn snap_unit(&self, u: &[f64]) -> Vec<f64> {
        self.to_unit(&self.from_unit(u))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims.len()
            && x.iter().zip(&self.dims).all(|(&v, d)| {
                v >= d.lower && v <= d.upper && (d.kind == DimKind::Continuous || v.fract() == 0.0)
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub jitter: f64,
    pub max_jitter: f64,
}

impl GpHyper {
    pub fn default_for(dims: usize) -> Self {
        GpHyper {
            signal_variance: 1.0,
            length_scales: vec![0.2; dims],
            jitter: 1e-10,
            max_jitter: 1e-6,
        }
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let s: f64 = a
            .iter()
            .zip(b)
            .zip(&self.length_scales)
            .map(|((x, y), l)| (x - y) * (x - y) / (2.0 * l * l))
            .sum();
        self.signal_variance * (-s).exp()
    }
}

/// Fitted surrogate: merged observations, the Cholesky factor `L` of
/// `K + jitter·I` (row-major, lower) and `α = (K + jitter·I)⁻¹ y`.
#[derive(Clone, Debug, PartialEq)]
pub struct GpState {
    pub hyper: GpHyper,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub jitter: f64,
    pub chol: Vec<f64>,
    alpha: Vec<f64>,
}

impl GpState {
    /// No observations: the posterior is the prior `(0, σ²)`.
    pub fn prior(hyper: GpHyper) -> Self {
        GpState {
            jitter: hyper.jitter,
            hyper,
            xs: Vec::new(),
            ys: Vec::new(),
            chol: Vec::new(),
            alpha: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    fn forward_sub(&self, b: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.chol[i * n + j] * y[j]).sum();
            y[i] = (b[i] - s) / self.chol[i * n + i];
        }
        y
    }

    fn backward_sub(&self, y: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.chol[j * n + i] * x[j]).sum();
            x[i] = (y[i] - s) / self.chol[i * n + i];
        }
        x
    }
}

/// Lower Cholesky factor of a symmetric `n×n` matrix, or `None` if a pivot
/// is not positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[i * n + j] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Fits the GP. Observations sharing an identical `x` are merged into one
/// whose `y` is their mean.
pub fn gp_fit(observations: &[Observation], hyper: &GpHyper) -> Result<GpState> {
    if observations.is_empty() {
        return Err(Error::InvalidArgument("gp_fit needs at least one observation".into()));
    }
    let d = hyper.length_scales.len();
    if let Some(o) = observations.iter().find(|o| o.x.len() != d || !o.y.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "observation {:?} does not match the {}-dimensional kernel or is not finite",
            o, d
        )));
    }
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for o in observations {
        match xs.iter().position(|x| *x == o.x) {
            Some(i) => {
                sums[i].0 += o.y;
                sums[i].1 += 1;
            }
            None => {
                xs.push(o.x.clone());
                sums.push((o.y, 1));
            }
        }
    }
    let ys: Vec<f64> = sums.iter().map(|(s, c)| s / *c as f64).collect();
    let n = xs.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = hyper.kernel(&xs[i], &xs[j]);
        }
    }
    let mut jitter = hyper.jitter;
    loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[i * n + i] += jitter;
        }
        if let Some(chol) = cholesky(&kj, n) {
            let mut state = GpState {
                hyper: hyper.clone(),
                xs,
                ys,
                jitter,
                chol,
                alpha: Vec::new(),
            };
            let y = state.forward_sub(&state.ys);
            state.alpha = state.backward_sub(&y);
            return Ok(state);
        }
        if jitter >= hyper.max_jitter {
            return Err(Error::Numeric(format!(
                "kernel matrix of {} points is not positive definite even with jitter {:e}",
                n, jitter
            )));
        }
        jitter = (jitter * 10.0).min(hyper.max_jitter);
    }
}

/// Posterior mean and variance at `x`; small negative variances from
/// rounding are clamped to 0.
pub fn gp_posterior(state: &GpState, x: &[f64]) -> (f64, f64) {
    let prior = state.hyper.kernel(x, x);
    if state.is_empty() {
        return (0.0, prior);
    }
    let ks: Vec<f64> = state.xs.iter().map(|xi| state.hyper.kernel(xi, x)).collect();
    let mean = ks.iter().zip(&state.alpha).map(|(a, b)| a * b).sum();
    let v = state.forward_sub(&ks);
    let var = prior - v.iter().map(|a| a * a).sum::<f64>();
    (mean, var.max(0.0))
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `EI = (μ − y*)·Φ(z) + σ·φ(z)` with `z = (μ − y*)/σ`; `max(μ − y*, 0)`
/// when `σ = 0`.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let gain = mean - best;
    if variance <= 0.0 {
        return gain.max(0.0);
    }
    let sd = variance.sqrt();
    let z = gain / sd;
    (gain * norm_cdf(z) + sd * norm_pdf(z)).max(0.0)
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// `count` points of the Halton sequence in `dims` dimensions, shifted by a
/// seeded random offset modulo 1.
pub fn halton_points(count: usize, dims: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dims > PRIMES.len() {
        return Err(Error::InvalidArgument(format!("at most {} dimensions supported", PRIMES.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dims).map(|_| rng.gen::<f64>()).collect();
    Ok((1..=count as u64)
        .map(|i| {
            (0..dims)
                .map(|d| (radical_inverse(i, PRIMES[d] as u64) + shift[d]).fract())
                .collect()
        })
        .collect())
}

pub const CANDIDATES: usize = 2048;

/// Maximizes EI over [`CANDIDATES`] shifted Halton points (snapped to the
/// grid of integer dimensions), then refines the winner by coordinate
/// search with halving steps. Returns the point in natural units.
pub fn propose_next(state: &GpState, space: &SearchSpace, best: f64, seed: u64) -> Result<Vec<f64>> {
    space.validate()?;
    let score = |u: &[f64]| {
        let (m, v) = gp_posterior(state, u);
        expected_improvement(m, v, best)
    };
    let mut top: Option<(f64, Vec<f64>)> = None;
    for c in halton_points(CANDIDATES, space.len(), seed)? {
        let u = space.snap_unit(&c);
        let s = score(&u);
        if top.as_ref().is_none_or(|(b, _)| s > *b) {
            top = Some((s, u));
        }
    }
    let (mut best_s, mut u) = top.expect("candidate set is nonempty");
    for (d, dim) in space.dims.iter().enumerate() {
        let grid = match dim.kind {
            DimKind::Integer if dim.upper > dim.lower => 1.0 / (dim.upper - dim.lower),
            DimKind::Integer => continue,
            DimKind::Continuous => 0.0,
        };
        let mut step = if grid > 0.0 { grid } else { 1.0 / 64.0 };
        while step >= grid.max(1e-7) {
            let mut moved = true;
            while moved {
                moved = false;
                for dir in [-1.0, 1.0] {
                    let mut cand = u.clone();
                    cand[d] = (cand[d] + dir * step).clamp(0.0, 1.0);
                    let cand = space.snap_unit(&cand);
                    let s = score(&cand);
                    if s > best_s {
                        best_s = s;
                        u = cand;
                        moved = true;
                    }
                }
            }
            if grid > 0.0 {
                break;
            }
            step /= 2.0;
        }
    }
    Ok(space.from_unit(&u))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoRecord {
    pub iteration: usize,
    pub x: Vec<f64>,
    /// `None` when the objective failed.
    pub y: Option<f64>,
    pub best_so_far: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoResult {
    pub best_x: Vec<f64>,
    pub best_y: f64,
    pub history: Vec<BoRecord>,
}

impl BoResult {
    /// Tuning log. `seconds` is left blank when `with_timing` is false.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut s = String::from("iteration,candidate,accuracy,best_so_far,seconds\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{:.6}", v));
        for r in &self.history {
            let cand: Vec<String> = r.x.iter().map(|v| format!("{}", v)).collect();
            let secs = if with_timing { format!("{:.3}", r.seconds) } else { String::new() };
            writeln!(s, "{},{},{},{},{}", r.iteration, cand.join(";"), opt(r.y), opt(r.best_so_far), secs).unwrap();
        }
        s
    }
}

/// Sequential optimization of `objective` over `space`: `n0` uniformly
/// random points, then one EI proposal per step until `budget` evaluations.
/// Failed evaluations are logged and left out of the surrogate. Returns the
/// first point attaining the largest observed value.
pub fn bo_loop<F>(mut objective: F, space: &SearchSpace, n0: usize, budget: usize, seed: u64) -> Result<BoResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    space.validate()?;
    if n0 == 0 || budget < n0 {
        return Err(Error::InvalidArgument(format!(
            "need budget >= n0 >= 1, got n0={} budget={}",
            n0, budget
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hyper = GpHyper::default_for(space.len());
    let mut observed: Vec<Observation> = Vec::new();
    let mut history: Vec<BoRecord> = Vec::with_capacity(budget);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for it in 0..budget {
        let x = if it < n0 || observed.is_empty() {
            let u: Vec<f64> = (0..space.len()).map(|_| rng.gen::<f64>()).collect();
            space.from_unit(&u)
        } else {
            let ys: Vec<f64> = observed.iter().map(|o| o.y).collect();
            let (mean, sd) = crate::train::mean_sd(&ys);
            let sd = if sd > 0.0 { sd } else { 1.0 };
            let std_obs: Vec<Observation> = observed
                .iter()
                .map(|o| Observation {
                    x: space.to_unit(&o.x),
                    y: (o.y - mean) / sd,
                })
                .collect();
            let state = gp_fit(&std_obs, &hyper)?;
            let incumbent = (best.as_ref().expect("observations exist").0 - mean) / sd;
            propose_next(&state, space, incumbent, seed.wrapping_mul(1_000_003).wrapping_add(it as u64))?
        };
        let start = Instant::now();
        let result = objective(&x);
        let seconds = start.elapsed().as_secs_f64();
        let (y, error) = match result {
            Ok(y) if y.is_finite() => (Some(y), None),
            Ok(y) => (None, Some(format!("objective returned {}", y))),
            Err(e) => (None, Some(e.to_string())),
        };
        if let Some(e) = &error {
            log::warn!("evaluation {} at {:?} failed: {}", it + 1, x, e);
        }
        if let Some(y) = y {
            observed.push(Observation { x: x.clone(), y });
            if best.as_ref().is_none_or(|(b, _)| y > *b) {
                best = Some((y, x.clone()));
            }
        }
        history.push(BoRecord {
            iteration: it + 1,
            x,
            y,
            best_so_far: best.as_ref().map(|b| b.0),
            error,
            seconds,
        });
    }
    let (best_y, best_x) = best.ok_or_else(|| Error::Numeric("every objective evaluation failed".into()))?;
    Ok(BoResult { best_x, best_y, history })
}

/// `base` with attention block `i` resized to `filters[i]` total output
/// channels (attention depth from [`AttentionBlockConfig::split`]).
pub fn config_with_filters(base: &ModelConfig, filters: &[f64]) -> Result<ModelConfig> {
    if filters.len() != base.attention_blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} filter counts for {} attention blocks",
            filters.len(),
            base.attention_blocks.len()
        )));
    }
    let mut cfg = base.clone();
    for (b, &f) in cfg.attention_blocks.iter_mut().zip(filters) {
        *b = AttentionBlockConfig::split(f as usize)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct TuneResult {
    pub best_config: ModelConfig,
    pub result: BoResult,
}

/// Tunes the total filter count of every attention block of `base`. The
/// objective receives each candidate configuration; its errors are logged
/// per candidate and do not stop the search.
pub fn tune_attention_filters<F>(
    base: &ModelConfig,
    space: &SearchSpace,
    n0: usize,
    budget: usize,
    seed: u64,
    mut objective: F,
) -> Result<TuneResult>
where
    F: FnMut(&ModelConfig) -> Result<f64>,
{
    if space.len() != base.attention_blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "search space has {} dimensions but the model has {} attention blocks",
            space.len(),
            base.attention_blocks.len()
        )));
    }
    let result = bo_loop(
        |x| {
            let cfg = config_with_filters(base, x)?;
            objective(&cfg)
        },
        space,
        n0.min(budget).max(1),
        budget,
        seed,
    )?;
    let best_config = config_with_filters(base, &result.best_x)?;
    Ok(TuneResult { best_config, result })
}

/// `max(5, 2·dims)`.
pub fn default_initial_points(dims: usize) -> usize {
    (2 * dims).max(5)
}
