//! Invariant and generator checks behind `qec-sim verify`.
//!
//! Every check returns a [`CheckResult`]; [`run_suite`] collects them and
//! [`format_table`] renders the pass/fail table.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::algebra::{self, build_operators, qubit_mask, ComplexMatrix8, DensityMatrix, DIM};
use crate::controller::{self, ControllerParams};
use crate::filters::{populations_from_syndromes, FullFilter, ReducedFilter, SyndromeFilterState};
use crate::lyapunov::{self, generator_check, v_closed, LyapunovFunction};
use crate::model::{Plant, PlantParams, StepNoise};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

/// Sizes of the suite; [`SuiteSize::quick`] finishes in well under five minutes.
#[derive(Clone, Copy, Debug)]
pub struct SuiteSize {
    pub invariant_trajectories: usize,
    pub invariant_horizon: f64,
    pub generator_states: usize,
    pub generator_samples: usize,
    pub equivalence_states: usize,
}

impl SuiteSize {
    pub fn quick() -> Self {
        Self {
            invariant_trajectories: 8,
            invariant_horizon: 2.0,
            generator_states: 5,
            generator_samples: 20_000,
            equivalence_states: 5,
        }
    }

    pub fn full() -> Self {
        Self {
            invariant_trajectories: 32,
            invariant_horizon: 10.0,
            generator_states: 20,
            generator_samples: 100_000,
            equivalence_states: 20,
        }
    }
}

/// The equal-channel parameters `Γ = 1, η = 0.8, γ = 1/64` with `α = 0.95, β = 0.6, c = 3/2`.
pub fn reference_parameters() -> (PlantParams, ControllerParams) {
    let plant = PlantParams::uniform(1.0, 0.8, 1.0 / 64.0);
    let ctrl = ControllerParams::uniform(0.95, 0.6, 1.5, &plant);
    (plant, ctrl)
}

/// Worst values seen by [`invariant_run`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InvariantReport {
    pub steps: u64,
    pub max_trace_drift: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
    pub post_repair_trace_error: f64,
    pub non_binary_gains: u64,
    /// Steps in which at least one `ŝ_k` was clipped.
    pub clipped_steps: u64,
}

/// Closed loop driven by the reduced filter, checking the state after every step.
pub fn invariant_run(
    plant_params: PlantParams,
    ctrl: &ControllerParams,
    rho0: DensityMatrix,
    dt: f64,
    horizon: f64,
    seed: u64,
    stream: u64,
) -> Result<InvariantReport, crate::SimError> {
    let ops = build_operators();
    let plant = Plant::with_operators(plant_params, &ops)?;
    let filter = ReducedFilter::new(plant_params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut rho = rho0;
    let mut s_hat = SyndromeFilterState::from_density(&rho0, &ops);
    let mut state = controller::initial_state();
    let on: [f64; 3] = std::array::from_fn(|j| ctrl.active_gain(j));
    let mut report = InvariantReport { min_eigenvalue: f64::INFINITY, ..Default::default() };
    let n = (horizon / dt).round() as u64;
    for _ in 0..n {
        state = controller::update(&state, &populations_from_syndromes(&s_hat).flipped, ctrl);
        report.non_binary_gains += (0..3).filter(|&j| state.sigma[j] != 0.0 && state.sigma[j] != on[j]).count() as u64;
        let noise = StepNoise::sample(&mut rng, dt);
        let record = plant.record(rho.matrix(), dt, &noise);
        let raw = plant.raw_update(rho.matrix(), &state.sigma, dt, &noise);
        report.max_trace_drift = report.max_trace_drift.max((raw.trace().re - 1.0).abs());
        let (next, _) = algebra::repair(&raw)?;
        let m = next.matrix();
        report.max_hermiticity_error = report.max_hermiticity_error.max(m.hermiticity_error());
        report.post_repair_trace_error = report.post_repair_trace_error.max((m.trace().re - 1.0).abs());
        let lmin = m.hermitian_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        report.min_eigenvalue = report.min_eigenvalue.min(lmin);
        let step = filter.step(&s_hat, &record, &state.sigma, dt);
        report.clipped_steps += (step.clipped > 0) as u64;
        s_hat = step.state;
        rho = next;
        report.steps += 1;
    }
    Ok(report)
}

/// A random state whose flipped population `p_j` is at least `floor`, with
/// coherences inside each syndrome subspace.
pub fn random_switching_state(rng: &mut impl Rng, j: usize, floor: f64) -> DensityMatrix {
    let pj = floor + (1.0 - floor) * rng.gen::<f64>();
    let mut rest: [f64; 3] = std::array::from_fn(|_| rng.gen::<f64>());
    let total: f64 = rest.iter().sum();
    rest.iter_mut().for_each(|r| *r *= (1.0 - pj) / total);
    // subspace weights: code, then flips 0..3
    let mut weights = [0.0; 4];
    weights[j + 1] = pj;
    let mut r = rest.iter();
    for (k, w) in weights.iter_mut().enumerate() {
        if k != j + 1 {
            *w = *r.next().unwrap();
        }
    }
    let mut m = ComplexMatrix8::zeros();
    for (k, &w) in weights.iter().enumerate() {
        let low = if k == 0 { 0 } else { qubit_mask(k - 1) };
        let high = (DIM - 1) ^ low;
        let theta: f64 = rng.gen::<f64>() * std::f64::consts::FRAC_PI_2;
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let mut psi = [Complex64::new(0.0, 0.0); DIM];
        psi[low] = Complex64::new(theta.cos(), 0.0);
        psi[high] = Complex64::from_polar(theta.sin(), phase);
        let mix = rng.gen::<f64>();
        m += ComplexMatrix8::outer(&psi, &psi).scale(w * mix);
        m += (ComplexMatrix8::basis_outer(low, low) * (0.5 * w * (1.0 - mix)))
            + (ComplexMatrix8::basis_outer(high, high) * (0.5 * w * (1.0 - mix)));
    }
    algebra::renormalize(&m).expect("convex combination of states")
}

/// A random syndrome-diagonal state `Σ_k p_k |b_k><b_k|` spread over both basis
/// states of each subspace.
pub fn random_syndrome_diagonal(rng: &mut impl Rng) -> DensityMatrix {
    let mut d: [f64; DIM] = std::array::from_fn(|_| rng.gen::<f64>());
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|v| *v /= total);
    DensityMatrix::new(ComplexMatrix8::from_real_diagonal(d)).expect("diagonal probability vector")
}

fn invariants_check(size: &SuiteSize, seed: u64) -> Vec<CheckResult> {
    let (plant, ctrl) = reference_parameters();
    let mut total = InvariantReport { min_eigenvalue: f64::INFINITY, ..Default::default() };
    let starts = [0b000, 0b100, 0b010, 0b001, 0b110, 0b111];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in 0..size.invariant_trajectories {
        let rho0 = match t % 4 {
            3 => random_syndrome_diagonal(&mut rng),
            _ => DensityMatrix::basis_state(starts[t % starts.len()]),
        };
        match invariant_run(plant, &ctrl, rho0, 1e-4, size.invariant_horizon, seed, t as u64) {
            Ok(r) => {
                total.steps += r.steps;
                total.max_trace_drift = total.max_trace_drift.max(r.max_trace_drift);
                total.max_hermiticity_error = total.max_hermiticity_error.max(r.max_hermiticity_error);
                total.post_repair_trace_error = total.post_repair_trace_error.max(r.post_repair_trace_error);
                total.min_eigenvalue = total.min_eigenvalue.min(r.min_eigenvalue);
                total.non_binary_gains += r.non_binary_gains;
                total.clipped_steps += r.clipped_steps;
            }
            Err(e) => return vec![CheckResult::new("invariant trajectories", false, e.to_string())],
        }
    }
    let clip_rate = total.clipped_steps as f64 / total.steps as f64;
    vec![
        CheckResult::new(
            "trace drift before repair <= 1e-12",
            total.max_trace_drift <= 1e-12,
            format!("max {:.3e} over {} steps", total.max_trace_drift, total.steps),
        ),
        CheckResult::new(
            "hermiticity error <= 1e-12",
            total.max_hermiticity_error <= 1e-12,
            format!("max {:.3e}", total.max_hermiticity_error),
        ),
        CheckResult::new(
            "lambda_min after repair >= -1e-10",
            total.min_eigenvalue >= -1e-10,
            format!("min {:.3e}", total.min_eigenvalue),
        ),
        CheckResult::new(
            "trace after repair within 1e-12 of 1",
            total.post_repair_trace_error <= 1e-12,
            format!("max {:.3e}", total.post_repair_trace_error),
        ),
        CheckResult::new(
            "controller gains two-valued",
            total.non_binary_gains == 0,
            format!("{} off-value gains", total.non_binary_gains),
        ),
        CheckResult::new(
            "s-hat clipping < 0.1% of steps at dt = 1e-4",
            clip_rate < 1e-3,
            format!("{} of {} steps ({:.4}%)", total.clipped_steps, total.steps, 100.0 * clip_rate),
        ),
    ]
}

fn rate_check() -> Vec<CheckResult> {
    let (plant, ctrl) = reference_parameters();
    let est = lyapunov::rate_estimate(&ctrl, &plant);
    let expected = 4.0 * std::f64::consts::SQRT_2 * 0.05f64.powi(2) * 0.8;
    vec![
        CheckResult::new(
            "heuristic rate matches 4*sqrt(2)*(1-alpha)^2*eta*Gamma",
            (est.heuristic_r - expected).abs() <= 1e-12,
            format!("{} vs {}", est.heuristic_r, expected),
        ),
        CheckResult::new("g_min > 0 on K", est.g_min > 0.0, format!("g_min = {:.6e} at {:?}", est.g_min, est.g_argmin)),
    ]
}

/// Monte Carlo generator of `V_closed` against `−c η Γ V` on random switching-region states.
pub fn generator_bound_check(states: usize, samples: usize, seed: u64) -> CheckResult {
    let (mut plant_params, ctrl) = reference_parameters();
    plant_params.flip_rate = [0.0; 3];
    let ops = build_operators();
    let plant = Plant::with_operators(plant_params, &ops).expect("valid parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_margin = f64::INFINITY;
    let mut failures = 0;
    for i in 0..states {
        let rho = random_switching_state(&mut rng, i % 3, ctrl.alpha[i % 3]);
        let sigma = controller::update(&controller::initial_state(), &algebra::populations(&rho, &ops).flipped, &ctrl).sigma;
        let est = generator_check(&plant, &ops, &rho, &sigma, 1e-5, samples, LyapunovFunction::Closed, seed + i as u64);
        let j = i % 3;
        let bound = -ctrl.c * ctrl.efficiency[j] * ctrl.measurement_strength[j] * v_closed(&rho, &ops);
        let margin = bound + 3.0 * est.std_error - est.mean;
        worst_margin = worst_margin.min(margin);
        failures += (margin < 0.0) as usize;
    }
    CheckResult::new(
        "generator AV <= -c*eta*Gamma*V + 3 SE",
        failures == 0,
        format!("{failures} of {states} states fail; smallest margin {worst_margin:.3}"),
    )
}

/// Largest `|ŝ_k − tr(S_k ρ̂)|` between the reduced filter and the full filter
/// without control noise, driven by shared records.
pub fn filter_equivalence_gap(rho0: &DensityMatrix, params: PlantParams, sigma: [f64; 3], dt: f64, steps: usize, rng: &mut impl Rng) -> f64 {
    let ops = build_operators();
    let full = FullFilter::with_operators(params, &ops).expect("valid parameters");
    let reduced = ReducedFilter::new(params).expect("valid parameters");
    let mut rho = *rho0;
    let mut s = SyndromeFilterState::from_density(rho0, &ops);
    let mut gap: f64 = 0.0;
    let gain = params.readout_gain();
    for _ in 0..steps {
        let means = ops.syndrome_expectations(rho.matrix());
        let dy = std::array::from_fn(|k| 2.0 * gain[k] * means[k] * dt + dt.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal));
        let record = crate::model::MeasurementRecord { dy };
        rho = full.step(&rho, &record, &[0.0; 3], &sigma, dt).expect("stable step").state;
        s = reduced.step(&s, &record, &sigma, dt).state;
        let direct = ops.syndrome_expectations(rho.matrix());
        gap = (0..3).map(|k| (direct[k] - s.s_hat[k]).abs()).fold(gap, f64::max);
    }
    gap
}

fn equivalence_check(states: usize, seed: u64) -> CheckResult {
    let (plant, _) = reference_parameters();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..states {
        let rho0 = random_syndrome_diagonal(&mut rng);
        let sigma = if i % 2 == 0 { [0.0; 3] } else { [8f64.sqrt(), 0.0, 0.0] };
        worst = worst.max(filter_equivalence_gap(&rho0, plant, sigma, 1e-4, 1000, &mut rng));
    }
    CheckResult::new("reduced filter matches density-matrix filter", worst <= 1e-5, format!("max gap {worst:.3e}"))
}

pub fn run_suite(size: SuiteSize, seed: u64) -> Vec<CheckResult> {
    let mut results = invariants_check(&size, seed);
    results.extend(rate_check());
    results.push(generator_bound_check(size.generator_states, size.generator_samples, seed));
    results.push(equivalence_check(size.equivalence_states, seed));
    results
}

pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{status}  {:<width$}  {}\n", r.name, r.detail));
    }
    out
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switching_states_meet_the_floor() {
        let ops = build_operators();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for j in 0..3 {
            for _ in 0..20 {
                let rho = random_switching_state(&mut rng, j, 0.95);
                assert!(algebra::populations(&rho, &ops).flipped[j] >= 0.95 - 1e-12);
            }
        }
    }

    #[test]
    fn table_marks_failures() {
        let rows = vec![CheckResult::new("a", true, "ok".into()), CheckResult::new("bb", false, "bad".into())];
        let t = format_table(&rows);
        assert!(t.contains("PASS  a "));
        assert!(t.contains("FAIL  bb"));
        assert!(!all_passed(&rows));
    }

    #[test]
    fn short_invariant_run_is_clean() {
        let (plant, ctrl) = reference_parameters();
        let r = invariant_run(plant, &ctrl, DensityMatrix::basis_state(0b010), 1e-4, 0.2, 1, 0).unwrap();
        assert_eq!(r.steps, 2000);
        assert!(r.max_trace_drift <= 1e-12 && r.min_eigenvalue >= -1e-10);
        assert_eq!(r.non_binary_gains, 0);
    }
}
