//! Statistical checks and convergence benches tying the quantizer and the
//! federated loop back to their analytical guarantees.
//!
//! Four entry points:
//!
//! * [`check_unbiasedness`] — Monte-Carlo means of the stochastic rounder
//!   against its two-point law, plus a demonstration that nearest rounding
//!   fails the same test.
//! * [`check_error_bounds`] — exact residual-energy inequalities for single
//!   quantization, re-quantization after an offset, and the worst-case
//!   residual norm.
//! * [`bench_qat_convergence`] — centralized quantized training on a convex
//!   quadratic: the 1/sqrt(T) rate without quantization, the precision
//!   floor between mantissa widths, and the plug-in gap bound.
//! * [`bench_fedavg_uq`] — the full federated loop on a heterogeneous
//!   quadratic: client-drift traces against their plug-in bound, monotone
//!   gap decrease, unbiased vs. biased transport, and bit-exact degeneracy
//!   to the centralized loop.
//!
//! Every bound is evaluated with constants measured from the same run
//! (maximum step actually used, maximum gradient norm actually seen);
//! nothing numeric is baked in. All checks are one-sided and deterministic
//! for a fixed seed.

use crate::codec::{ClipParam, CodecError, Fp8Format, Fp8Grid};
use crate::data::{synth_quadratic, DataError, QuadProblem};
use crate::fed::{
    clients_from_quadratic, run_round, Aggregation, CommMode, FedConfig, FedError, GlobalState,
};
use crate::qat::{
    local_update, LayerParams, LocalUpdateConfig, ModelSpec, ParamSet, QatError, QuantMode,
};
use crate::rng::{purpose, substream};
use ndarray::{Array1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Relative slack absorbing floating-point rounding when comparing a
/// measured quantity against a bound that holds exactly in real arithmetic.
const FP_GUARD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench configuration invalid: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Qat(#[from] QatError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One verified inequality or property, with the worst observed pairing of
/// measured value and bound.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    /// Number of instances examined.
    pub cases: usize,
    /// Instances where the measured quantity exceeded its bound.
    pub violations: usize,
    /// The worst measured value (the one closest to, or furthest past, its
    /// bound).
    pub measured: f64,
    /// The bound the worst case was held to.
    pub bound: f64,
    pub pass: bool,
    pub note: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        let mut s = format!(
            "[{tag}] {}: measured={:.6e} bound={:.6e} cases={} violations={}",
            self.name, self.measured, self.bound, self.cases, self.violations
        );
        if !self.note.is_empty() {
            s.push_str(" (");
            s.push_str(&self.note);
            s.push(')');
        }
        s
    }
}

/// A raw numeric trace recorded during a bench, exportable as CSV.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub rows: Vec<(f64, f64)>,
}

impl Series {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}\n", self.x_label, self.y_label);
        for (x, y) in &self.rows {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }
}

/// The result of one bench entry point: its checks plus the raw series they
/// were computed from.
#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub checks: Vec<CheckOutcome>,
    pub series: Vec<Series>,
}

impl BenchReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn merge(&mut self, other: BenchReport) {
        self.checks.extend(other.checks);
        self.series.extend(other.series);
    }

    pub fn summary_lines(&self) -> Vec<String> {
        self.checks.iter().map(CheckOutcome::line).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Exact expected squared residual of the stochastic rounder at `x`, plus
/// the local step, both straight from the two-point law.
fn exact_sq_residual(grid: &Fp8Grid, x: f64) -> Result<(f64, f64), CodecError> {
    let (lo, hi, p_up) = grid.two_point_law(x)?;
    let e = (1.0 - p_up) * (x - lo) * (x - lo) + p_up * (hi - x) * (hi - x);
    Ok((e, (hi - lo).abs()))
}

fn draw_alpha<R: Rng + ?Sized>(rng: &mut R) -> Result<ClipParam, CodecError> {
    ClipParam::new(rng.gen_range(-4.0f64..10.0).exp2())
}

// ---------------------------------------------------------------------------
// Unbiasedness
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct UnbiasednessConfig {
    /// Random in-range (clip, x) pairs to test.
    pub cases: usize,
    /// Monte-Carlo draws per pair.
    pub draws: usize,
    pub seed: u64,
    /// Fraction of random off-grid cases the nearest rounder must fail on.
    pub det_fail_fraction: f64,
}

impl Default for UnbiasednessConfig {
    fn default() -> Self {
        Self { cases: 50, draws: 100_000, seed: 7, det_fail_fraction: 0.9 }
    }
}

/// Empirical-mean deviation of the stochastic rounder over `draws` samples,
/// held to the binomial 4-sigma envelope `4 * (s/2) / sqrt(draws)`.
///
/// Three sub-checks: random in-range points must stay inside the envelope;
/// exact grid points must come back with zero deviation; and the nearest
/// rounder must *exceed* the same envelope on most off-grid points, which
/// is what makes the envelope a real test.
pub fn check_unbiasedness(
    fmt: Fp8Format,
    cfg: &UnbiasednessConfig,
) -> Result<BenchReport, BenchError> {
    if cfg.cases == 0 || cfg.draws == 0 {
        return Err(BenchError::BadConfig("cases and draws must be positive".into()));
    }
    let mut report = BenchReport::default();
    let sqrt_n = (cfg.draws as f64).sqrt();

    let mut rand_violations = 0usize;
    let mut worst_dev = 0.0f64;
    let mut worst_tol = f64::INFINITY;
    let mut det_fails = 0usize;
    let mut off_grid = 0usize;

    for case in 0..cfg.cases {
        let mut rng = substream(cfg.seed, case as u64, 0, purpose::EVAL);
        let clip = draw_alpha(&mut rng)?;
        let grid = Fp8Grid::new(fmt, clip);
        let alpha = clip.alpha();
        let x = (rng.gen::<f64>() * 2.0 - 1.0) * alpha * 0.999;

        let (_, step) = exact_sq_residual(&grid, x)?;
        let tol = 4.0 * (step / 2.0) / sqrt_n;

        // Accumulate deviations rather than values so an exact grid point
        // sums to exactly zero.
        let mut dev_sum = 0.0f64;
        for _ in 0..cfg.draws {
            dev_sum += grid.q_rand(x, &mut rng)? - x;
        }
        let dev = (dev_sum / cfg.draws as f64).abs();
        if dev > tol {
            rand_violations += 1;
        }
        // Track the case with the least headroom.
        if worst_tol.is_infinite() || dev * worst_tol > worst_dev * tol {
            worst_dev = dev;
            worst_tol = tol;
        }

        let det_dev = (grid.q_det(x)? - x).abs();
        if det_dev > 0.0 {
            off_grid += 1;
            if det_dev > tol {
                det_fails += 1;
            }
        }
    }

    report.checks.push(CheckOutcome {
        name: "rand-mean-unbiased".into(),
        cases: cfg.cases,
        violations: rand_violations,
        measured: worst_dev,
        bound: worst_tol,
        pass: rand_violations == 0,
        note: format!("{} draws per case", cfg.draws),
    });

    // Exact grid points: the mean must not just be close, it must be the
    // point itself on every draw.
    let grid_cases = (cfg.cases / 5).max(2);
    let mut grid_violations = 0usize;
    let mut worst_grid_dev = 0.0f64;
    for case in 0..grid_cases {
        let mut rng = substream(cfg.seed, case as u64, 1, purpose::EVAL);
        let clip = draw_alpha(&mut rng)?;
        let grid = Fp8Grid::new(fmt, clip);
        let mags = grid.magnitudes();
        let idx = rng.gen_range(1..mags.len());
        let sign = if rng.gen::<bool>() { -1.0 } else { 1.0 };
        let x = sign * mags[idx];
        let mut dev_sum = 0.0f64;
        for _ in 0..cfg.draws.min(1000) {
            dev_sum += grid.q_rand(x, &mut rng)? - x;
        }
        let dev = dev_sum.abs();
        worst_grid_dev = worst_grid_dev.max(dev);
        if dev != 0.0 {
            grid_violations += 1;
        }
    }
    report.checks.push(CheckOutcome {
        name: "grid-point-fixed".into(),
        cases: grid_cases,
        violations: grid_violations,
        measured: worst_grid_dev,
        bound: 0.0,
        pass: grid_violations == 0,
        note: "representable inputs must round to themselves".into(),
    });

    let fail_frac = if off_grid == 0 { 0.0 } else { det_fails as f64 / off_grid as f64 };
    report.checks.push(CheckOutcome {
        name: "det-bias-detected".into(),
        cases: off_grid,
        violations: off_grid - det_fails,
        measured: fail_frac,
        bound: cfg.det_fail_fraction,
        pass: off_grid > 0 && fail_frac >= cfg.det_fail_fraction,
        note: "nearest rounding must exceed the same envelope".into(),
    });

    Ok(report)
}

// ---------------------------------------------------------------------------
// Residual-energy bounds
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ErrorBoundConfig {
    /// Instances per inequality family.
    pub trials: usize,
    pub seed: u64,
    /// Vector length for the worst-case residual-norm family.
    pub big_dim: usize,
}

impl Default for ErrorBoundConfig {
    fn default() -> Self {
        Self { trials: 1000, seed: 11, big_dim: 100 }
    }
}

/// Verify the three residual-energy inequalities on random instances whose
/// magnitudes span the subnormal, normal, and near-clip ranges:
///
/// * expected squared residual of a vector is at most `S * ||x||_1`;
/// * after adding an offset `y` to an on-grid value, the expected squared
///   residual of re-quantization is at most `S * |y|`;
/// * a quantized vector's residual norm never exceeds `sqrt(d) * S`.
///
/// `S` is the largest step the instance actually touched, so the bound is
/// computed from the same numbers the quantizer used. Expectations are
/// evaluated exactly through the two-point law.
pub fn check_error_bounds(
    fmt: Fp8Format,
    cfg: &ErrorBoundConfig,
) -> Result<BenchReport, BenchError> {
    if cfg.trials == 0 || cfg.big_dim == 0 {
        return Err(BenchError::BadConfig("trials and big_dim must be positive".into()));
    }
    let mut report = BenchReport::default();

    // Family 1: E||r||^2 <= S * ||x||_1 for in-range vectors.
    let mut violations = 0usize;
    let mut worst = (0.0f64, f64::INFINITY); // (measured, bound) with max ratio
    for trial in 0..cfg.trials {
        let mut rng = substream(cfg.seed, trial as u64, 1, purpose::EVAL);
        let clip = draw_alpha(&mut rng)?;
        let grid = Fp8Grid::new(fmt, clip);
        let alpha = clip.alpha();
        let d = rng.gen_range(1..=32usize);
        let mut energy = 0.0f64;
        let mut l1 = 0.0f64;
        let mut s_max = 0.0f64;
        for i in 0..d {
            let mag = if trial == 0 {
                0.0 // the all-zero vector is a legal instance
            } else if i == 0 {
                alpha * rng.gen_range(0.9..=1.0) // pin one coordinate near the clip
            } else {
                alpha * rng.gen_range(-16.0f64..0.0).exp2()
            };
            let sign = if rng.gen::<bool>() { -1.0 } else { 1.0 };
            let x = sign * mag;
            let (e, step) = exact_sq_residual(&grid, x)?;
            energy += e;
            l1 += x.abs();
            s_max = s_max.max(step);
        }
        let bound = s_max * l1;
        if energy > bound * (1.0 + FP_GUARD) {
            violations += 1;
        }
        if worst.1.is_infinite() || energy * worst.1 > worst.0 * bound {
            worst = (energy, bound);
        }
    }
    report.checks.push(CheckOutcome {
        name: "residual-energy-linear".into(),
        cases: cfg.trials,
        violations,
        measured: worst.0,
        bound: worst.1,
        pass: violations == 0,
        note: "exact expectation vs largest step times l1 norm".into(),
    });

    // Family 2: re-quantization after an offset. Start from a grid point
    // g_i, land inside cell [g_j, g_{j+1}); the three sub-families place the
    // start below the landing cell, more than one cell above it, and in the
    // cell directly above it.
    let mut violations = 0usize;
    let mut worst = (0.0f64, f64::INFINITY);
    let mut family_counts = [0usize; 3];
    for trial in 0..cfg.trials {
        let mut rng = substream(cfg.seed, trial as u64, 2, purpose::EVAL);
        let clip = draw_alpha(&mut rng)?;
        let grid = Fp8Grid::new(fmt, clip);
        let mags = grid.magnitudes();
        let m = mags.len();
        if m < 4 {
            return Err(BenchError::BadConfig("format grid too small for offset cases".into()));
        }
        let family = trial % 3;
        family_counts[family] += 1;
        let (i, j) = match family {
            0 => {
                let j = rng.gen_range(0..m - 1);
                (rng.gen_range(0..=j), j)
            }
            1 => {
                let j = rng.gen_range(0..m - 2);
                (rng.gen_range(j + 2..m), j)
            }
            _ => {
                let j = rng.gen_range(0..m - 1);
                (j + 1, j)
            }
        };
        let frac = rng.gen_range(0.02..0.98);
        let land = mags[j] + frac * (mags[j + 1] - mags[j]);
        let y = land - mags[i];
        let sign = if rng.gen::<bool>() { -1.0 } else { 1.0 };
        let (e, s_land) = exact_sq_residual(&grid, sign * land)?;
        let bound = s_land * y.abs();
        if e > bound * (1.0 + FP_GUARD) {
            violations += 1;
        }
        if worst.1.is_infinite() || e * worst.1 > worst.0 * bound {
            worst = (e, bound);
        }
    }
    report.checks.push(CheckOutcome {
        name: "regrid-residual-energy".into(),
        cases: cfg.trials,
        violations,
        measured: worst.0,
        bound: worst.1,
        pass: violations == 0,
        note: format!(
            "start below/above+1/adjacent cases: {}/{}/{}",
            family_counts[0], family_counts[1], family_counts[2]
        ),
    });

    // Family 3: ||r||_2 <= sqrt(d) * S for a realized quantization, nearest
    // and stochastic rounding alike.
    let mut violations = 0usize;
    let mut worst = (0.0f64, f64::INFINITY);
    for trial in 0..cfg.trials {
        let mut rng = substream(cfg.seed, trial as u64, 3, purpose::EVAL);
        let clip = draw_alpha(&mut rng)?;
        let grid = Fp8Grid::new(fmt, clip);
        let alpha = clip.alpha();
        let stochastic = trial % 2 == 1;
        let mut sq = 0.0f64;
        let mut s_max = 0.0f64;
        for _ in 0..cfg.big_dim {
            let mag = if trial == 0 { 0.0 } else { alpha * rng.gen_range(-16.0f64..0.0).exp2() };
            let sign = if rng.gen::<bool>() { -1.0 } else { 1.0 };
            let x = sign * mag;
            let q = if stochastic { grid.q_rand(x, &mut rng)? } else { grid.q_det(x)? };
            sq += (q - x) * (q - x);
            let (_, step) = exact_sq_residual(&grid, x)?;
            s_max = s_max.max(step);
        }
        let measured = sq.sqrt();
        let bound = (cfg.big_dim as f64).sqrt() * s_max;
        if measured > bound * (1.0 + FP_GUARD) {
            violations += 1;
        }
        if worst.1.is_infinite() || measured * worst.1 > worst.0 * bound {
            worst = (measured, bound);
        }
    }
    report.checks.push(CheckOutcome {
        name: "residual-norm-cap".into(),
        cases: cfg.trials,
        violations,
        measured: worst.0,
        bound: worst.1,
        pass: violations == 0,
        note: format!("dimension {}", cfg.big_dim),
    });

    Ok(report)
}

// ---------------------------------------------------------------------------
// Centralized quantized training
// ---------------------------------------------------------------------------

/// Build the shared starting point for the convex-quadratic studies: the
/// optimum plus a fixed Gaussian offset, with a clip wide enough that the
/// trajectory never saturates.
fn quad_start(
    problem: &QuadProblem,
    clip_margin: f64,
    init_offset: f64,
    problem_seed: u64,
) -> Result<ParamSet, BenchError> {
    let mut rng = substream(problem_seed, 1, 0, purpose::INIT);
    let mut w1 = problem.w_star.clone();
    for v in w1.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += init_offset * z;
    }
    let w_inf = w1
        .iter()
        .chain(problem.w_star.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let alpha = clip_margin * w_inf.max(1e-3);
    Ok(ParamSet {
        layers: vec![LayerParams { w: w1.insert_axis(Axis(0)), b: None }],
        weight_clips: vec![ClipParam::new(alpha)?],
        act_clips: vec![],
    })
}

/// One centralized training run: `T` steps of minibatch SGD where the
/// gradient is taken at the nearest-quantized iterate (or the iterate
/// itself when `fmt` is `None`), step size `1/sqrt(T)`.
#[derive(Clone, Debug)]
pub struct CentralRunOut {
    /// Gap at the (quantized) iterate before each step, indexed by step.
    pub gaps: Vec<f64>,
    /// Mean of `gaps` — the uniformly-sampled-iterate estimate.
    pub mean_gap: f64,
    /// Largest minibatch gradient norm seen.
    pub g_max: f64,
    /// Largest quantization step actually used.
    pub s_max: f64,
    pub w1_dist_sq: f64,
    pub eta: f64,
    pub diverged: bool,
    /// Parameter vectors after each step, only when requested.
    pub flats: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn central_qat_run(
    problem: &QuadProblem,
    fmt: Option<Fp8Format>,
    rounds: usize,
    batch: usize,
    seed: u64,
    clip_margin: f64,
    init_offset: f64,
    problem_seed: u64,
    record_flats: bool,
) -> Result<CentralRunOut, BenchError> {
    if problem.k() != 1 {
        return Err(BenchError::BadConfig(
            "centralized run expects a single-objective problem".into(),
        ));
    }
    if rounds == 0 || batch == 0 {
        return Err(BenchError::BadConfig("rounds and batch must be positive".into()));
    }
    let fed_clients = clients_from_quadratic(problem);
    let shard = &fed_clients[0];
    let mut params = quad_start(problem, clip_margin, init_offset, problem_seed)?;
    let w1_dist_sq: f64 = params.layers[0]
        .w
        .row(0)
        .iter()
        .zip(problem.w_star.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let mode = if fmt.is_some() { QuantMode::Det } else { QuantMode::Off };
    let mut spec = ModelSpec::linear(problem.d, 1, mode);
    if let Some(f) = fmt {
        spec.fmt = f;
    }
    let grid = fmt.map(|f| Fp8Grid::new(f, params.weight_clips[0]));
    let eta = 1.0 / (rounds as f64).sqrt();
    let lcfg = LocalUpdateConfig {
        steps: 1,
        batch_size: batch,
        lr: eta,
        weight_decay: 0.0,
        clip_lr: Some(0.0),
    };

    let mut gaps = Vec::with_capacity(rounds);
    let mut flats = Vec::new();
    let mut g_max = 0.0f64;
    let mut s_max = 0.0f64;
    let mut diverged = false;
    let mut qvec = Array1::zeros(problem.d);

    for t in 1..=rounds {
        {
            let wcol = params.layers[0].w.row(0);
            for (dst, &v) in qvec.iter_mut().zip(wcol.iter()) {
                *dst = match &grid {
                    Some(g) => g.q_det(v)?,
                    None => v,
                };
            }
        }
        let gap = problem.gap(qvec.view());
        gaps.push(gap);
        if !gap.is_finite() {
            diverged = true;
            break;
        }
        let mut rng = substream(seed, t as u64, 0, purpose::LOCAL_BATCHES);
        let stats = local_update(&spec, &mut params, shard.x.view(), shard.y.view(), &lcfg, &mut rng)?;
        g_max = g_max.max(stats.max_grad_norm);
        s_max = s_max.max(stats.quant.max_step);
        if record_flats {
            let mut f = Vec::new();
            params.write_flat(&mut f);
            flats.push(f);
        }
        if !stats.mean_loss.is_finite() {
            diverged = true;
            break;
        }
    }
    while gaps.len() < rounds {
        gaps.push(f64::INFINITY);
    }
    let mean_gap = if diverged {
        f64::INFINITY
    } else {
        gaps.iter().sum::<f64>() / rounds as f64
    };
    Ok(CentralRunOut { gaps, mean_gap, g_max, s_max, w1_dist_sq, eta, diverged, flats })
}

/// Least-squares slope of `ln y` against `ln x`.
fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return f64::NAN;
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (sxy - sx * sy / n) / (sxx - sx * sx / n)
}

#[derive(Clone, Debug)]
pub struct QatBenchConfig {
    pub dims: usize,
    pub rows: usize,
    pub batch: usize,
    /// Horizon ladder for the rate fit (no quantization).
    pub slope_ladder: Vec<usize>,
    /// Horizon for the precision-floor comparison.
    pub floor_rounds: usize,
    pub exp_bits: u32,
    pub mantissa_coarse: u32,
    pub mantissa_fine: u32,
    pub seeds: Vec<u64>,
    pub problem_seed: u64,
    pub clip_margin: f64,
    pub init_offset: f64,
    /// Acceptable window for the fitted log-log slope.
    pub slope_window: (f64, f64),
    /// Acceptable window for the coarse/fine floor ratio.
    pub floor_window: (f64, f64),
    /// Relative tolerance when holding gaps to the plug-in bound.
    pub bound_tol: f64,
}

impl Default for QatBenchConfig {
    fn default() -> Self {
        Self {
            dims: 10,
            rows: 256,
            batch: 128,
            slope_ladder: vec![128, 362, 1024, 2896, 8192],
            floor_rounds: 8192,
            exp_bits: 4,
            mantissa_coarse: 3,
            mantissa_fine: 4,
            seeds: vec![11, 12, 13, 14, 15],
            problem_seed: 42,
            clip_margin: 2.0,
            init_offset: 0.2,
            slope_window: (-0.6, -0.4),
            floor_window: (1.5, 2.5),
            bound_tol: 0.10,
        }
    }
}

/// Centralized quantized-training study on a convex quadratic.
///
/// Three checks: the unquantized mean gap decays like `T^(-1/2)` across the
/// horizon ladder; the quantized mean gap at a long horizon shrinks by the
/// expected factor when the mantissa gains a bit; and every run's mean gap
/// stays below the plug-in bound
/// `(dist^2 + G^2) / (2 sqrt(T)) + G * sqrt(d) * S`
/// built from that run's own measured `G` and `S`.
pub fn bench_qat_convergence(cfg: &QatBenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.seeds.is_empty() || cfg.slope_ladder.len() < 2 {
        return Err(BenchError::BadConfig(
            "need at least one seed and two ladder horizons".into(),
        ));
    }
    if cfg.rows < cfg.dims {
        return Err(BenchError::BadConfig("rows must be at least dims".into()));
    }
    let problem = synth_quadratic(1, cfg.dims, cfg.rows, 0.0, cfg.problem_seed)?;
    let mut report = BenchReport::default();
    let mut bound_cases = 0usize;
    let mut bound_violations = 0usize;
    let mut bound_worst = (0.0f64, f64::INFINITY);
    let mut check_bound = |run: &CentralRunOut, rounds: usize, d: usize, tol: f64| {
        let rhs = (run.w1_dist_sq + run.g_max * run.g_max) / (2.0 * (rounds as f64).sqrt())
            + run.g_max * (d as f64).sqrt() * run.s_max;
        bound_cases += 1;
        if !(run.mean_gap <= rhs * (1.0 + tol)) {
            bound_violations += 1;
        }
        if bound_worst.1.is_infinite() || run.mean_gap * bound_worst.1 > bound_worst.0 * rhs {
            bound_worst = (run.mean_gap, rhs);
        }
    };

    // Rate ladder without quantization.
    let mut ladder_points = Vec::new();
    for &t in &cfg.slope_ladder {
        let mut acc = 0.0f64;
        for &seed in &cfg.seeds {
            let run = central_qat_run(
                &problem,
                None,
                t,
                cfg.batch,
                seed,
                cfg.clip_margin,
                cfg.init_offset,
                cfg.problem_seed,
                false,
            )?;
            check_bound(&run, t, cfg.dims, cfg.bound_tol);
            acc += run.mean_gap;
        }
        ladder_points.push((t as f64, acc / cfg.seeds.len() as f64));
    }
    let slope = fit_loglog_slope(&ladder_points);
    report.series.push(Series {
        name: "rate-ladder".into(),
        x_label: "horizon".into(),
        y_label: "mean_gap".into(),
        rows: ladder_points.clone(),
    });
    report.checks.push(CheckOutcome {
        name: "rate-slope".into(),
        cases: cfg.slope_ladder.len() * cfg.seeds.len(),
        violations: 0,
        measured: slope,
        bound: cfg.slope_window.0,
        pass: slope.is_finite() && slope >= cfg.slope_window.0 && slope <= cfg.slope_window.1,
        note: format!(
            "window [{:.2}, {:.2}], seed-mean gaps over {} horizons",
            cfg.slope_window.0,
            cfg.slope_window.1,
            cfg.slope_ladder.len()
        ),
    });

    // Precision floor between mantissa widths.
    let fmt_coarse = Fp8Format::new(cfg.exp_bits, cfg.mantissa_coarse)?;
    let fmt_fine = Fp8Format::new(cfg.exp_bits, cfg.mantissa_fine)?;
    let mut floor_means = [0.0f64; 2];
    let mut per_seed_ratio = Vec::new();
    for (slot, fmt) in [fmt_coarse, fmt_fine].into_iter().enumerate() {
        let mut acc = 0.0f64;
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            let run = central_qat_run(
                &problem,
                Some(fmt),
                cfg.floor_rounds,
                cfg.batch,
                seed,
                cfg.clip_margin,
                cfg.init_offset,
                cfg.problem_seed,
                false,
            )?;
            check_bound(&run, cfg.floor_rounds, cfg.dims, cfg.bound_tol);
            acc += run.mean_gap;
            if slot == 0 {
                per_seed_ratio.push(run.mean_gap);
            } else {
                per_seed_ratio[si] /= run.mean_gap;
            }
            if si == 0 {
                report.series.push(Series {
                    name: if slot == 0 { "floor-gap-coarse".into() } else { "floor-gap-fine".into() },
                    x_label: "step".into(),
                    y_label: "gap".into(),
                    rows: run.gaps.iter().enumerate().map(|(i, &g)| ((i + 1) as f64, g)).collect(),
                });
            }
        }
        floor_means[slot] = acc / cfg.seeds.len() as f64;
    }
    let ratio = floor_means[0] / floor_means[1];
    let seed_list = per_seed_ratio.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(",");
    report.checks.push(CheckOutcome {
        name: "floor-ratio".into(),
        cases: cfg.seeds.len() * 2,
        violations: 0,
        measured: ratio,
        bound: cfg.floor_window.1,
        pass: ratio.is_finite() && ratio >= cfg.floor_window.0 && ratio <= cfg.floor_window.1,
        note: format!(
            "window [{:.2}, {:.2}] for mantissa {} vs {}; per-seed {}",
            cfg.floor_window.0, cfg.floor_window.1, cfg.mantissa_coarse, cfg.mantissa_fine, seed_list
        ),
    });

    report.checks.push(CheckOutcome {
        name: "gap-bound".into(),
        cases: bound_cases,
        violations: bound_violations,
        measured: bound_worst.0,
        bound: bound_worst.1,
        pass: bound_violations == 0,
        note: format!("plug-in bound from measured constants, tol {:.0}%", cfg.bound_tol * 100.0),
    });

    Ok(report)
}

// ---------------------------------------------------------------------------
// Federated loop
// ---------------------------------------------------------------------------

/// One federated run on a quadratic problem with frozen clips and
/// nearest-quantized local training, recording per-round traces.
#[derive(Clone, Debug)]
pub struct FedRunOut {
    /// Gap of the aggregated model before each round.
    pub gaps: Vec<f64>,
    /// Gap of a stochastically quantized snapshot of the aggregated model.
    pub qgaps: Vec<f64>,
    /// Mean squared distance between each client's quantized iterates and
    /// its received model, per round.
    pub drifts: Vec<f64>,
    pub g_max: f64,
    pub s_max: f64,
    pub eta: f64,
    pub diverged: bool,
    pub flats: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn fed_quad_run(
    problem: &QuadProblem,
    fmt: Fp8Format,
    comm: CommMode,
    rounds: usize,
    local_steps: usize,
    batch: usize,
    seed: u64,
    clip_margin: f64,
    init_offset: f64,
    problem_seed: u64,
    record_flats: bool,
) -> Result<FedRunOut, BenchError> {
    if rounds == 0 {
        return Err(BenchError::BadConfig("rounds must be positive".into()));
    }
    let clients = clients_from_quadratic(problem);
    let params = quad_start(problem, clip_margin, init_offset, problem_seed)?;
    let mut spec = ModelSpec::linear(problem.d, 1, QuantMode::Det);
    spec.fmt = fmt;
    let eta = 1.0 / ((local_steps * rounds) as f64).sqrt();
    let fed_cfg = FedConfig {
        seed,
        rounds,
        participation: 1.0,
        local: LocalUpdateConfig {
            steps: local_steps,
            batch_size: batch,
            lr: eta,
            weight_decay: 0.0,
            clip_lr: Some(0.0),
        },
        comm,
        aggregation: Aggregation::FedAvg,
        threads: 1,
    };
    fed_cfg.validate()?;
    let mut state = GlobalState { params, round: 0 };

    let mut gaps = Vec::with_capacity(rounds);
    let mut qgaps = Vec::with_capacity(rounds);
    let mut drifts = Vec::with_capacity(rounds);
    let mut flats = Vec::new();
    let mut g_max = 0.0f64;
    let mut s_max = 0.0f64;
    let mut diverged = false;
    let mut qvec = Array1::zeros(problem.d);

    for t in 1..=rounds {
        {
            let wcol = state.params.layers[0].w.row(0);
            let grid = Fp8Grid::new(fmt, state.params.weight_clips[0]);
            let mut eval_rng = substream(seed, t as u64, 0, purpose::EVAL);
            for (dst, &v) in qvec.iter_mut().zip(wcol.iter()) {
                *dst = grid.q_rand(v, &mut eval_rng)?;
            }
            gaps.push(problem.gap(wcol));
            qgaps.push(problem.gap(qvec.view()));
        }
        if !gaps[t - 1].is_finite() {
            diverged = true;
            break;
        }
        let outcome = run_round(&mut state, &spec, &clients, &fed_cfg, t)?;
        drifts.push(outcome.mean_drift_sq);
        g_max = g_max.max(outcome.max_grad_norm);
        s_max = s_max.max(outcome.quant.max_step);
        if record_flats {
            let mut f = Vec::new();
            state.params.write_flat(&mut f);
            flats.push(f);
        }
    }
    while gaps.len() < rounds {
        gaps.push(f64::INFINITY);
        qgaps.push(f64::INFINITY);
    }
    Ok(FedRunOut { gaps, qgaps, drifts, g_max, s_max, eta, diverged, flats })
}

#[derive(Clone, Debug)]
pub struct FedBenchConfig {
    pub clients: usize,
    pub dims: usize,
    pub rows_per: usize,
    pub heterogeneity: f64,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub problem_seed: u64,
    pub clip_margin: f64,
    pub init_offset: f64,
    /// Block size for the monotonicity test and the final-gap window.
    pub smoothing: usize,
    /// Allowed relative increase between adjacent smoothed blocks.
    pub mono_slack: f64,
    /// Blocks within this multiple of the run minimum count as the floor.
    pub mono_band: f64,
    /// Required overall decrease factor of the smoothed gap.
    pub mono_drop: f64,
    /// Relative tolerance for the drift plug-in bound.
    pub bound_tol: f64,
    pub fmt: Fp8Format,
    /// Horizon for the bit-exact centralized-degeneracy comparison.
    pub degeneracy_rounds: usize,
}

impl Default for FedBenchConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            dims: 10,
            rows_per: 64,
            heterogeneity: 0.5,
            rounds: 500,
            local_steps: 10,
            batch: 16,
            seeds: vec![21, 22, 23, 24, 25],
            problem_seed: 42,
            clip_margin: 2.0,
            init_offset: 1.0,
            smoothing: 50,
            mono_slack: 0.25,
            mono_band: 4.0,
            mono_drop: 0.5,
            bound_tol: 0.10,
            fmt: Fp8Format::e4m3(),
            degeneracy_rounds: 50,
        }
    }
}

fn block_means(xs: &[f64], block: usize) -> Vec<f64> {
    xs.chunks(block.max(1))
        .filter(|c| c.len() == block.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN medians"));
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Federated study on a heterogeneous quadratic with frozen clips.
///
/// Four checks: client drift stays below the plug-in bound
/// `18 U^3 S sqrt(d) G eta + 9 U^2 eta^2 G^2` every round of every
/// unbiased-transport run; the block-smoothed gap decreases monotonically
/// to a floor; unbiased transport beats nearest-rounding transport on the
/// seed-median final gap; and with one client, one local step, and
/// transport off, the loop reproduces the centralized run bit for bit.
pub fn bench_fedavg_uq(cfg: &FedBenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.seeds.is_empty() {
        return Err(BenchError::BadConfig("need at least one seed".into()));
    }
    if cfg.rounds < cfg.smoothing * 2 {
        return Err(BenchError::BadConfig("rounds must cover at least two blocks".into()));
    }
    let problem = synth_quadratic(
        cfg.clients,
        cfg.dims,
        cfg.rows_per,
        cfg.heterogeneity,
        cfg.problem_seed,
    )?;
    let mut report = BenchReport::default();

    let mut runs: Vec<(CommMode, u64, FedRunOut)> = Vec::new();
    for &mode in &[CommMode::Rand, CommMode::Det, CommMode::Off] {
        for &seed in &cfg.seeds {
            let run = fed_quad_run(
                &problem,
                cfg.fmt,
                mode,
                cfg.rounds,
                cfg.local_steps,
                cfg.batch,
                seed,
                cfg.clip_margin,
                cfg.init_offset,
                cfg.problem_seed,
                false,
            )?;
            if seed == cfg.seeds[0] {
                let tag = match mode {
                    CommMode::Rand => "unbiased",
                    CommMode::Det => "biased",
                    CommMode::Off => "plain",
                };
                report.series.push(Series {
                    name: format!("fed-gap-{tag}"),
                    x_label: "round".into(),
                    y_label: "gap".into(),
                    rows: run.gaps.iter().enumerate().map(|(i, &g)| ((i + 1) as f64, g)).collect(),
                });
                if matches!(mode, CommMode::Rand) {
                    report.series.push(Series {
                        name: "fed-drift-unbiased".into(),
                        x_label: "round".into(),
                        y_label: "drift".into(),
                        rows: run
                            .drifts
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| ((i + 1) as f64, v))
                            .collect(),
                    });
                    report.series.push(Series {
                        name: "fed-qgap-unbiased".into(),
                        x_label: "round".into(),
                        y_label: "gap".into(),
                        rows: run
                            .qgaps
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| ((i + 1) as f64, g))
                            .collect(),
                    });
                }
            }
            runs.push((mode, seed, run));
        }
    }

    // Drift against the plug-in bound, unbiased transport only (its
    // premise): every round of every seed.
    let u = cfg.local_steps as f64;
    let sqrt_d = (cfg.dims as f64).sqrt();
    let mut cases = 0usize;
    let mut violations = 0usize;
    let mut worst = (0.0f64, f64::INFINITY);
    let mut any_diverged = false;
    for (mode, _, run) in &runs {
        if !matches!(mode, CommMode::Rand) {
            continue;
        }
        any_diverged |= run.diverged;
        let rhs = 18.0 * u.powi(3) * run.s_max * sqrt_d * run.g_max * run.eta
            + 9.0 * u * u * run.eta * run.eta * run.g_max * run.g_max;
        for &v in &run.drifts {
            cases += 1;
            if !(v <= rhs * (1.0 + cfg.bound_tol)) {
                violations += 1;
            }
            if worst.1.is_infinite() || v * worst.1 > worst.0 * rhs {
                worst = (v, rhs);
            }
        }
    }
    report.checks.push(CheckOutcome {
        name: "drift-bound".into(),
        cases,
        violations,
        measured: worst.0,
        bound: worst.1,
        pass: violations == 0 && !any_diverged,
        note: format!(
            "plug-in bound from measured constants, tol {:.0}%{}",
            cfg.bound_tol * 100.0,
            if any_diverged { "; a run diverged" } else { "" }
        ),
    });

    // Monotone decrease of the block-smoothed gap, unbiased runs.
    let mut cases = 0usize;
    let mut violations = 0usize;
    let mut worst_ratio = 0.0f64;
    let mut worst_drop = 0.0f64;
    for (mode, _, run) in &runs {
        if !matches!(mode, CommMode::Rand) {
            continue;
        }
        let blocks = block_means(&run.gaps, cfg.smoothing);
        let floor = blocks.iter().cloned().fold(f64::INFINITY, f64::min);
        let band = cfg.mono_band * floor;
        for w in blocks.windows(2) {
            cases += 1;
            let ratio = if w[0] > 0.0 { w[1] / w[0] } else { f64::INFINITY };
            // An increase only counts once the series is above its floor
            // band; plateau jitter at the floor is not divergence.
            if w[1] > w[0] * (1.0 + cfg.mono_slack) && w[1] > band {
                violations += 1;
            }
            worst_ratio = worst_ratio.max(ratio);
        }
        let drop = blocks.last().unwrap_or(&f64::INFINITY) / blocks.first().unwrap_or(&1.0);
        worst_drop = worst_drop.max(drop);
        if !(drop <= cfg.mono_drop) {
            violations += 1;
            cases += 1;
        }
    }
    report.checks.push(CheckOutcome {
        name: "gap-monotone".into(),
        cases,
        violations,
        measured: worst_drop,
        bound: cfg.mono_drop,
        pass: violations == 0,
        note: format!(
            "blocks of {}, slack {:.0}%, floor band {:.1}x",
            cfg.smoothing,
            cfg.mono_slack * 100.0,
            cfg.mono_band
        ),
    });

    // Unbiased vs nearest-rounding transport on the final smoothed gap.
    let final_gap = |run: &FedRunOut| {
        if run.diverged {
            f64::INFINITY
        } else {
            let tail = &run.gaps[run.gaps.len() - cfg.smoothing..];
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    };
    let med_rand = median(
        runs.iter()
            .filter(|(m, _, _)| matches!(m, CommMode::Rand))
            .map(|(_, _, r)| final_gap(r))
            .collect(),
    );
    let med_det = median(
        runs.iter()
            .filter(|(m, _, _)| matches!(m, CommMode::Det))
            .map(|(_, _, r)| final_gap(r))
            .collect(),
    );
    report.checks.push(CheckOutcome {
        name: "unbiased-final-gap".into(),
        cases: cfg.seeds.len() * 2,
        violations: usize::from(!(med_rand < med_det)),
        measured: med_rand,
        bound: med_det,
        pass: med_rand < med_det,
        note: "seed-median final gap, unbiased must beat nearest rounding".into(),
    });

    // Degeneracy: one client, one local step, transport off must reproduce
    // the centralized loop exactly.
    let single = synth_quadratic(1, cfg.dims, cfg.rows_per, 0.0, cfg.problem_seed)?;
    let central = central_qat_run(
        &single,
        Some(cfg.fmt),
        cfg.degeneracy_rounds,
        cfg.batch,
        cfg.seeds[0],
        cfg.clip_margin,
        cfg.init_offset,
        cfg.problem_seed,
        true,
    )?;
    let fed = fed_quad_run(
        &single,
        cfg.fmt,
        CommMode::Off,
        cfg.degeneracy_rounds,
        1,
        cfg.batch,
        cfg.seeds[0],
        cfg.clip_margin,
        cfg.init_offset,
        cfg.problem_seed,
        true,
    )?;
    let mut max_diff = f64::INFINITY;
    if central.flats.len() == fed.flats.len() {
        max_diff = 0.0;
        for (a, b) in central.flats.iter().zip(fed.flats.iter()) {
            if a.len() != b.len() {
                max_diff = f64::INFINITY;
                break;
            }
            for (x, y) in a.iter().zip(b.iter()) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
    }
    report.checks.push(CheckOutcome {
        name: "central-degeneracy".into(),
        cases: cfg.degeneracy_rounds,
        violations: usize::from(max_diff != 0.0),
        measured: max_diff,
        bound: 0.0,
        pass: max_diff == 0.0,
        note: "single client, one local step, transport off".into(),
    });

    Ok(report)
}
