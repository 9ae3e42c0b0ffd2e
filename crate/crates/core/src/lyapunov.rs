//! Lyapunov functions, decay-rate estimates and Monte Carlo generator checks.
//!
//! * [`v_open`]: `Σ_k Σ_{k'≠k} √(p_k p_k')` over `{C,1,2,3}`; under measurement
//!   alone its mean decays at least as `e^{-4 min_k η_kΓ_k t}`.
//! * [`v_closed`]: `Σ_{k=1..3} √(p_k + p_1 + p_2 + p_3)`, zero exactly on the
//!   code space; under the hysteresis feedback its mean decays at the rate
//!   given by [`rate_estimate`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::algebra::{populations, DensityMatrix, OperatorSet, Populations};
use crate::controller::ControllerParams;
use crate::model::{Plant, PlantParams, StepNoise};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

pub fn v_open_from_populations(p: &Populations) -> f64 {
    let p = p.as_array();
    let mut v = 0.0;
    for k in 0..4 {
        for l in 0..4 {
            if k != l {
                v += (p[k] * p[l]).sqrt();
            }
        }
    }
    v
}

pub fn v_open(rho: &DensityMatrix, ops: &OperatorSet) -> f64 {
    v_open_from_populations(&populations(rho, ops))
}

pub fn v_closed_from_populations(p: &Populations) -> f64 {
    let s = p.flipped_total();
    p.flipped.iter().map(|pk| (pk + s).sqrt()).sum()
}

pub fn v_closed(rho: &DensityMatrix, ops: &OperatorSet) -> f64 {
    v_closed_from_populations(&populations(rho, ops))
}

/// How `f_j` is read in the `(s, x)` form of `g`.
///
/// In the population form `f_j = 2p_j + p_{j'} + p_{j''} = s(1 + x_j)`, so
/// `1 − f_j = 1 − s − s x_j` ([`FConvention::Derived`]). Taking
/// `f_j = 1 − s − s x_j` literally ([`FConvention::Literal`]) gives a
/// different function; it is kept only so the two can be compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FConvention {
    Derived,
    Literal,
}

fn g_term(own: f64, a: f64, b: f64, one_minus_f: f64) -> f64 {
    ((a + b) * one_minus_f).powi(2) + (own + (own + a) * one_minus_f).powi(2) + (own + (own + b) * one_minus_f).powi(2)
}

/// `g(s, x_1, x_2, x_3)`, defined on `s ∈ [0, 1]`, `x ≥ 0`, `Σ x = 1`.
pub fn g_of(s: f64, x: [f64; 3], convention: FConvention) -> f64 {
    (0..3)
        .map(|j| {
            let (a, b) = (x[(j + 1) % 3], x[(j + 2) % 3]);
            let one_minus_f = match convention {
                FConvention::Derived => 1.0 - s - s * x[j],
                FConvention::Literal => s + s * x[j],
            };
            g_term(x[j], a, b, one_minus_f) / (1.0 + x[j]).powi(2)
        })
        .sum()
}

/// `f_j = 2p_j + p_{j'} + p_{j''}`
pub fn f_values(p: &[f64; 3]) -> [f64; 3] {
    let s: f64 = p.iter().sum();
    std::array::from_fn(|j| s + p[j])
}

/// `g` written directly in the flipped populations `(p_1, p_2, p_3)`.
/// Undefined on the code space, where every `f_j` vanishes.
pub fn g_of_populations(p: &[f64; 3]) -> f64 {
    let f = f_values(p);
    (0..3)
        .map(|j| {
            let (a, b) = (p[(j + 1) % 3], p[(j + 2) % 3]);
            g_term(p[j], a, b, 1.0 - f[j]) / (f[j] * f[j])
        })
        .sum()
}

/// Coefficients `g_j(ρ)` of `σ_j²` in the generator bound.
pub fn g_coefficients(p: &[f64; 3]) -> [f64; 3] {
    let f = f_values(p);
    std::array::from_fn(|j| {
        let (a, b) = ((j + 1) % 3, (j + 2) % 3);
        (1.0 - f[j]) / f[j].sqrt()
            + (1.0 - 2.0 * (p[j] + p[a])) / (2.0 * f[a].sqrt())
            + (1.0 - 2.0 * (p[j] + p[b])) / (2.0 * f[b].sqrt())
    })
}

/// Upper bound `Σ_j σ_j² g_j − 4ηΓ/(3√2) g V` on the generator of
/// [`v_closed`], for equal channels with `ηΓ = readout_rate`.
pub fn generator_upper_bound(p: &[f64; 3], sigma: &[f64; 3], readout_rate: f64) -> f64 {
    let gj = g_coefficients(p);
    let control: f64 = (0..3).map(|j| sigma[j] * sigma[j] * gj[j]).sum();
    let pops = Populations { code: 1.0 - p.iter().sum::<f64>(), flipped: *p };
    control - 4.0 * readout_rate / (3.0 * SQRT_2) * g_of_populations(p) * v_closed_from_populations(&pops)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateEstimate {
    /// Guaranteed decay rate `min(c_branch, g_branch)`.
    pub r: f64,
    /// `min_j η_jΓ_j · c`, the rate inside the switching region.
    pub c_branch: f64,
    /// `min_j η_jΓ_j · 4/(3√2) · g_min`, the rate outside it.
    pub g_branch: f64,
    /// Minimum of `g` over `K`.
    pub g_min: f64,
    /// Minimiser `(s, x_1, x_2, x_3)`.
    pub g_argmin: [f64; 4],
    /// `min_j η_jΓ_j · min(c, 4√2 (1 − max α)²)`.
    pub heuristic_r: f64,
    /// Points per axis of the initial grid.
    pub grid_resolution: usize,
}

/// Initial grid resolution used by [`rate_estimate`].
pub const DEFAULT_GRID: usize = 240;

pub fn rate_estimate(controller: &ControllerParams, plant: &PlantParams) -> RateEstimate {
    rate_estimate_with_grid(controller, plant, DEFAULT_GRID)
}

pub fn rate_estimate_with_grid(controller: &ControllerParams, plant: &PlantParams, grid: usize) -> RateEstimate {
    let readout = (0..3)
        .map(|j| plant.efficiency[j] * plant.measurement_strength[j])
        .fold(f64::INFINITY, f64::min);
    let (g_min, g_argmin) = minimize_g(&controller.alpha, grid);
    let c_branch = readout * controller.c;
    let g_branch = readout * 4.0 / (3.0 * SQRT_2) * g_min;
    let alpha_max = controller.alpha.iter().copied().fold(0.0, f64::max);
    let heuristic_r = readout * controller.c.min(4.0 * SQRT_2 * (1.0 - alpha_max).powi(2));
    RateEstimate {
        r: c_branch.min(g_branch),
        c_branch,
        g_branch,
        g_min,
        g_argmin,
        heuristic_r,
        grid_resolution: grid,
    }
}

/// Membership in `K = {s ∈ [0,1], x ≥ 0, Σx = 1, s x_j ≤ α_j}`.
pub fn in_k(s: f64, x: &[f64; 3], alpha: &[f64; 3]) -> bool {
    (0.0..=1.0).contains(&s)
        && x.iter().all(|&v| v >= 0.0)
        && (x.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        && (0..3).all(|j| s * x[j] <= alpha[j])
}

/// Visits every grid point of `K` at the given resolution.
pub fn for_each_k_grid_point(alpha: &[f64; 3], grid: usize, mut visit: impl FnMut(f64, [f64; 3])) {
    let h = 1.0 / grid as f64;
    for i in 0..=grid {
        let s = i as f64 * h;
        for a in 0..=grid {
            for b in 0..=(grid - a) {
                let x1 = a as f64 * h;
                let x2 = b as f64 * h;
                let x = [x1, x2, (1.0 - x1 - x2).max(0.0)];
                if (0..3).all(|j| s * x[j] <= alpha[j]) {
                    visit(s, x);
                }
            }
        }
    }
}

fn minimize_g(alpha: &[f64; 3], grid: usize) -> (f64, [f64; 4]) {
    let mut candidates: Vec<(f64, f64, [f64; 3])> = Vec::new();
    const KEEP: usize = 8;
    for_each_k_grid_point(alpha, grid, |s, x| {
        let v = g_of(s, x, FConvention::Derived);
        if candidates.len() < KEEP || v < candidates[KEEP - 1].0 {
            candidates.push((v, s, x));
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
            candidates.truncate(KEEP);
        }
    });
    let h = 1.0 / grid as f64;
    candidates
        .into_iter()
        .map(|(v, s, x)| zoom_refine(alpha, v, s, [x[0], x[1]], h))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("K is non-empty")
}

/// Repeated local grid search in `(s, x_1, x_2)` with a shrinking box,
/// rejecting infeasible points.
fn zoom_refine(alpha: &[f64; 3], mut best: f64, mut s: f64, mut x: [f64; 2], mut h: f64) -> (f64, [f64; 4]) {
    const HALF: i32 = 6;
    for _ in 0..24 {
        let (s0, x0) = (s, x);
        for i in -HALF..=HALF {
            let si = s0 + i as f64 * h / HALF as f64;
            for a in -HALF..=HALF {
                let x1 = x0[0] + a as f64 * h / HALF as f64;
                for b in -HALF..=HALF {
                    let x2 = x0[1] + b as f64 * h / HALF as f64;
                    let full = [x1, x2, 1.0 - x1 - x2];
                    if !(0.0..=1.0).contains(&si) || full.iter().any(|&v| v < 0.0) {
                        continue;
                    }
                    if (0..3).any(|j| si * full[j] > alpha[j]) {
                        continue;
                    }
                    let v = g_of(si, full, FConvention::Derived);
                    if v < best {
                        best = v;
                        s = si;
                        x = [x1, x2];
                    }
                }
            }
        }
        h *= 0.5;
    }
    (best, [s, x[0], x[1], 1.0 - x[0] - x[1]])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LyapunovFunction {
    Open,
    Closed,
}

impl LyapunovFunction {
    pub fn eval(&self, p: &Populations) -> f64 {
        match self {
            Self::Open => v_open_from_populations(p),
            Self::Closed => v_closed_from_populations(p),
        }
    }
}

/// Monte Carlo estimate of a generator value with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Draws per independent RNG stream in [`generator_check`].
const DRAWS_PER_BLOCK: usize = 4096;

/// Estimates `AV(ρ) ≈ (E[V(ρ + dρ)] − V(ρ)) / dt` from `n_samples` independent
/// Euler–Maruyama increments of the closed-loop equation at fixed gains.
///
/// Draws are split into blocks with independent streams `(seed, block)` and
/// reduced in block order, so the result does not depend on the thread count.
pub fn generator_check(
    plant: &Plant,
    ops: &OperatorSet,
    rho: &DensityMatrix,
    sigma: &[f64; 3],
    dt: f64,
    n_samples: usize,
    lyapunov: LyapunovFunction,
    seed: u64,
) -> GeneratorEstimate {
    let v0 = lyapunov.eval(&populations(rho, ops));
    let blocks = n_samples.div_ceil(DRAWS_PER_BLOCK);
    let partial: Vec<(f64, f64, usize)> = (0..blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(block as u64);
            let count = DRAWS_PER_BLOCK.min(n_samples - block * DRAWS_PER_BLOCK);
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..count {
                let noise = StepNoise::sample(&mut rng, dt);
                let next = plant.raw_update(rho.matrix(), sigma, dt, &noise);
                let dv = (lyapunov.eval(&ops.populations_fast(&next)) - v0) / dt;
                sum += dv;
                sum_sq += dv * dv;
            }
            (sum, sum_sq, count)
        })
        .collect();
    let (sum, sum_sq, n) = partial
        .into_iter()
        .fold((0.0, 0.0, 0), |acc, (s, q, c)| (acc.0 + s, acc.1 + q, acc.2 + c));
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 { ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
    GeneratorEstimate { mean, std_error: (var / nf).sqrt(), samples: n }
}
