//! Monte Carlo trajectories and ensembles of the closed loop.
//!
//! One trajectory: at each step the controller reads the estimator's
//! populations, the resulting gains pass through a delay line of
//! `latency / dt` steps, the plant is stepped with the applied gains, and the
//! estimator is updated from the (possibly biased) record. Trajectory `i`
//! draws its noise from the ChaCha8 stream `(seed, i)`, so results do not
//! depend on scheduling.

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use num_complex::Complex64;
use serde_json::json;

use crate::algebra::{build_operators, ComplexMatrix8, DensityMatrix, OperatorSet, Subspace, DIM};
use crate::config::{Estimator, ExperimentConfig};
use crate::controller::{self, ControllerParams, ControllerState};
use crate::error::SimError;
use crate::filters::{populations_from_syndromes, FullFilter, ReducedFilter, SyndromeFilterState};
use crate::lyapunov::{v_closed_from_populations, v_open_from_populations};
use crate::model::{MeasurementRecord, Plant, StepNoise};

pub const N_METRICS: usize = 8;

/// Column names of the per-time metrics, in storage order.
pub const METRIC_NAMES: [&str; N_METRICS] =
    ["code_overlap", "fidelity", "correctable_fidelity", "p1", "p2", "p3", "v_open", "v_closed"];

pub const CODE_OVERLAP: usize = 0;
pub const FIDELITY: usize = 1;
pub const CORRECTABLE_FIDELITY: usize = 2;
pub const P1: usize = 3;
pub const V_OPEN: usize = 6;
pub const V_CLOSED: usize = 7;

/// Trajectories simulated per parallel batch before folding into the running statistics.
const BATCH: usize = 64;

/// Version string recorded in sidecars.
pub fn version() -> &'static str {
    option_env!("QEC_SIM_GIT_DESCRIBE").unwrap_or(env!("CARGO_PKG_VERSION"))
}

/// Majority-vote recovery `Π_C ρ Π_C + Σ_j X_j Π_j ρ Π_j X_j`.
pub fn recover(rho: &ComplexMatrix8, ops: &OperatorSet) -> ComplexMatrix8 {
    let pc = &ops.code_projector;
    let mut out = *pc * *rho * *pc;
    for j in 0..3 {
        let a = ops.flips[j] * ops.flip_projectors[j];
        out += a * *rho * a.adjoint();
    }
    out
}

/// `tr(R(ρ₀) R(ρ))`: overlap with the reference after ideal correction.
/// For `ρ₀ = |000><000|` this is `<000|R(ρ)|000>`.
pub fn correctable_fidelity(rho: &DensityMatrix, rho0: &DensityMatrix, ops: &OperatorSet) -> f64 {
    let r0 = recover(rho0.matrix(), ops);
    recover(rho.matrix(), ops).trace_product(&r0).re.clamp(0.0, 1.0)
}

/// `(1 + e^{-2γt}) / 2`: fidelity of a lone qubit under `γ D[σ_x]` started in `|0>`.
pub fn single_qubit_baseline(gamma: f64, times: &[f64]) -> Vec<f64> {
    times.iter().map(|t| 0.5 * (1.0 + (-2.0 * gamma * t).exp())).collect()
}

/// Counters accumulated along a trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TrajectoryDiagnostics {
    pub steps: u64,
    /// Plant repairs that needed an eigenvalue clip.
    pub plant_clips: u64,
    /// Full-filter repairs that needed an eigenvalue clip.
    pub filter_clips: u64,
    /// Reduced-filter components clipped back into `[-1, 1]`.
    pub syndrome_clips: u64,
    /// Largest `|tr(ρ + dρ) − 1|` before repair, plant and full filter.
    pub max_trace_drift: f64,
    /// Number of on/off switches over all channels.
    pub gain_toggles: u64,
    /// Steps skipped once the loop reached an exact fixed point.
    pub skipped_steps: u64,
}

impl TrajectoryDiagnostics {
    fn merge(&mut self, other: &Self) {
        self.steps += other.steps;
        self.plant_clips += other.plant_clips;
        self.filter_clips += other.filter_clips;
        self.syndrome_clips += other.syndrome_clips;
        self.max_trace_drift = self.max_trace_drift.max(other.max_trace_drift);
        self.gain_toggles += other.gain_toggles;
        self.skipped_steps += other.skipped_steps;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub metrics: Vec<[f64; N_METRICS]>,
    /// Gains applied during the step starting at each output time.
    pub applied_gains: Vec<[f64; 3]>,
    pub diagnostics: TrajectoryDiagnostics,
}

enum EstimatorState {
    TrueState,
    Full(DensityMatrix),
    Reduced(SyndromeFilterState),
}

/// Everything a trajectory needs that does not depend on its index.
#[derive(Clone, Debug)]
pub struct Simulator {
    config: ExperimentConfig,
    ops: OperatorSet,
    plant: Plant,
    full_filter: FullFilter,
    reduced_filter: ReducedFilter,
    controller: ControllerParams,
    rho0: DensityMatrix,
    rho_hat0: DensityMatrix,
    recovered_reference: ComplexMatrix8,
    bias_drift: [f64; 3],
    /// No flips in the plant or the filter model and no record bias, so a
    /// code-space state with all gains off never moves again.
    can_absorb: bool,
}

impl Simulator {
    pub fn new(config: &ExperimentConfig) -> Result<Self, SimError> {
        config.validate()?;
        let ops = build_operators();
        let rho0 = config.initial_state.to_density()?;
        let gain = config.plant.readout_gain();
        Ok(Self {
            plant: Plant::with_operators(config.plant, &ops)?,
            full_filter: FullFilter::with_operators(config.filter, &ops)?,
            reduced_filter: ReducedFilter::new(config.filter)?,
            controller: config.controller_params(),
            rho_hat0: config.filter_initial_state.to_density()?,
            recovered_reference: recover(rho0.matrix(), &ops),
            bias_drift: std::array::from_fn(|k| config.bias[k] * gain[k] * config.dt),
            can_absorb: config.plant.flip_rate == [0.0; 3]
                && (config.estimator == Estimator::TrueState
                    || (config.filter.flip_rate == [0.0; 3] && config.bias == [0.0; 3])),
            rho0,
            ops,
            config: config.clone(),
        })
    }

    /// Steps every trajectory to the horizon even after it reaches a fixed point.
    pub fn without_fast_forward(mut self) -> Self {
        self.can_absorb = false;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn operators(&self) -> &OperatorSet {
        &self.ops
    }

    /// Output time indices: every `record_stride` steps plus the final step.
    pub fn output_steps(&self) -> Vec<usize> {
        let n = self.config.n_steps();
        let mut steps: Vec<usize> = (0..=n).step_by(self.config.record_stride).collect();
        if steps.last() != Some(&n) {
            steps.push(n);
        }
        steps
    }

    pub fn output_times(&self) -> Vec<f64> {
        self.output_steps().iter().map(|&n| n as f64 * self.config.dt).collect()
    }

    fn metrics(&self, rho: &DensityMatrix) -> [f64; N_METRICS] {
        let m = rho.matrix();
        let p = self.ops.populations_fast(m);
        let fidelity = m.trace_product(self.rho0.matrix()).re.clamp(0.0, 1.0);
        let correctable = recover(m, &self.ops).trace_product(&self.recovered_reference).re.clamp(0.0, 1.0);
        [
            p.code,
            fidelity,
            correctable,
            p.flipped[0],
            p.flipped[1],
            p.flipped[2],
            v_open_from_populations(&p),
            v_closed_from_populations(&p),
        ]
    }

    fn estimated_flip_populations(&self, plant: &DensityMatrix, estimator: &EstimatorState) -> [f64; 3] {
        match estimator {
            EstimatorState::TrueState => self.ops.populations_fast(plant.matrix()).flipped,
            EstimatorState::Full(rho_hat) => self.ops.populations_fast(rho_hat.matrix()).flipped,
            EstimatorState::Reduced(s) => populations_from_syndromes(s).flipped,
        }
    }

    /// Whether every entry of `rho` outside the code block is exactly zero.
    fn in_code_space(&self, rho: &DensityMatrix) -> bool {
        let m = rho.matrix();
        (0..DIM).filter(|&i| self.ops.subspace_of[i] != Subspace::Code).all(|i| {
            (0..DIM).all(|j| m.0[i][j] == Complex64::new(0.0, 0.0))
        })
    }

    fn absorbed(&self, rho: &DensityMatrix, estimator: &EstimatorState, ctrl: &ControllerState, delay: &VecDeque<[f64; 3]>) -> bool {
        self.can_absorb
            && ctrl.sigma == [0.0; 3]
            && delay.iter().all(|g| *g == [0.0; 3])
            && self.in_code_space(rho)
            && match estimator {
                EstimatorState::TrueState => true,
                EstimatorState::Full(rho_hat) => self.in_code_space(rho_hat),
                EstimatorState::Reduced(s) => s.s_hat == [1.0; 3],
            }
    }

    /// Runs trajectory `index`. Integrator blow-ups surface as [`SimError::Blowup`].
    pub fn run(&self, index: u64) -> Result<Trajectory, SimError> {
        let cfg = &self.config;
        let dt = cfg.dt;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index);

        let mut rho = self.rho0;
        let mut estimator = match cfg.estimator {
            Estimator::TrueState => EstimatorState::TrueState,
            Estimator::FullFilter => EstimatorState::Full(self.rho_hat0),
            Estimator::ReducedFilter => {
                EstimatorState::Reduced(SyndromeFilterState::from_density(&self.rho_hat0, &self.ops))
            }
        };
        let mut ctrl = controller::initial_state();
        let mut delay: VecDeque<[f64; 3]> = std::iter::repeat([0.0; 3]).take(cfg.latency_steps()).collect();

        let outputs = self.output_steps();
        let mut next_output = outputs.iter().copied().peekable();
        let mut traj = Trajectory {
            times: Vec::with_capacity(outputs.len()),
            metrics: Vec::with_capacity(outputs.len()),
            applied_gains: Vec::with_capacity(outputs.len()),
            diagnostics: TrajectoryDiagnostics::default(),
        };
        let diag = &mut traj.diagnostics;
        let n_steps = cfg.n_steps();

        for n in 0..=n_steps {
            if n < n_steps && self.absorbed(&rho, &estimator, &ctrl, &delay) {
                // Every later increment vanishes, so the remaining outputs repeat the current ones.
                let metrics = self.metrics(&rho);
                for m in next_output {
                    traj.times.push(m as f64 * dt);
                    traj.metrics.push(metrics);
                    traj.applied_gains.push([0.0; 3]);
                }
                diag.skipped_steps = (n_steps - n) as u64;
                break;
            }
            let sigma = if n < n_steps {
                if cfg.feedback {
                    let p = self.estimated_flip_populations(&rho, &estimator);
                    let next = controller::update(&ctrl, &p, &self.controller);
                    diag.gain_toggles += (0..3).filter(|&j| next.active[j] != ctrl.active[j]).count() as u64;
                    ctrl = next;
                }
                delay.push_back(ctrl.sigma);
                delay.pop_front().expect("delay line is never empty after a push")
            } else {
                [0.0; 3]
            };
            if next_output.peek() == Some(&n) {
                next_output.next();
                traj.times.push(n as f64 * dt);
                traj.metrics.push(self.metrics(&rho));
                traj.applied_gains.push(sigma);
            }
            if n == n_steps {
                break;
            }

            let noise = StepNoise::sample(&mut rng, dt);
            let step = self.plant.step_closed_loop(&rho, &sigma, dt, &noise)?;
            diag.steps += 1;
            diag.plant_clips += step.clipped as u64;
            diag.max_trace_drift = diag.max_trace_drift.max(step.trace_drift);
            let record = MeasurementRecord { dy: std::array::from_fn(|k| step.record.dy[k] + self.bias_drift[k]) };

            match &mut estimator {
                EstimatorState::TrueState => {}
                EstimatorState::Full(rho_hat) => {
                    let f = self.full_filter.step(rho_hat, &record, &noise.db, &sigma, dt)?;
                    diag.filter_clips += f.clipped as u64;
                    diag.max_trace_drift = diag.max_trace_drift.max(f.trace_drift);
                    *rho_hat = f.state;
                }
                EstimatorState::Reduced(s) => {
                    let r = self.reduced_filter.step(s, &record, &sigma, dt);
                    diag.syndrome_clips += r.clipped as u64;
                    *s = r.state;
                }
            }
            rho = step.state;
        }
        Ok(traj)
    }
}

/// Runs trajectory `index` of `config`.
pub fn run_trajectory(config: &ExperimentConfig, index: u64) -> Result<Trajectory, SimError> {
    Simulator::new(config)?.run(index)
}

/// Ensemble counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EnsembleDiagnostics {
    pub completed: usize,
    /// Trajectories excluded after an integrator blow-up.
    pub blowup_count: usize,
    #[serde(flatten)]
    pub totals: TrajectoryDiagnostics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    /// Per output time, the mean of each metric in [`METRIC_NAMES`] order.
    pub means: Vec<[f64; N_METRICS]>,
    pub standard_errors: Vec<[f64; N_METRICS]>,
    pub baseline_fidelity: Vec<f64>,
    pub diagnostics: EnsembleDiagnostics,
}

impl EnsembleResult {
    pub fn mean_of(&self, metric: usize) -> Vec<f64> {
        self.means.iter().map(|m| m[metric]).collect()
    }

    pub fn se_of(&self, metric: usize) -> Vec<f64> {
        self.standard_errors.iter().map(|m| m[metric]).collect()
    }

    pub fn mean_code_overlap(&self) -> Vec<f64> {
        self.mean_of(CODE_OVERLAP)
    }

    pub fn mean_fidelity(&self) -> Vec<f64> {
        self.mean_of(FIDELITY)
    }

    pub fn mean_correctable_fidelity(&self) -> Vec<f64> {
        self.mean_of(CORRECTABLE_FIDELITY)
    }
}

/// Welford accumulators, one per output time and metric.
struct Accumulator {
    n: usize,
    mean: Vec<[f64; N_METRICS]>,
    m2: Vec<[f64; N_METRICS]>,
}

impl Accumulator {
    fn new(len: usize) -> Self {
        Self { n: 0, mean: vec![[0.0; N_METRICS]; len], m2: vec![[0.0; N_METRICS]; len] }
    }

    fn push(&mut self, metrics: &[[f64; N_METRICS]]) {
        self.n += 1;
        let n = self.n as f64;
        for (t, row) in metrics.iter().enumerate() {
            for (m, &x) in row.iter().enumerate() {
                let delta = x - self.mean[t][m];
                self.mean[t][m] += delta / n;
                self.m2[t][m] += delta * (x - self.mean[t][m]);
            }
        }
    }

    fn standard_errors(&self) -> Vec<[f64; N_METRICS]> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|row| row.map(|m2| if self.n > 1 { (m2 / (n - 1.0) / n).max(0.0).sqrt() } else { 0.0 }))
            .collect()
    }
}

/// Runs `config.n_traj` trajectories in parallel and averages them in index order.
///
/// Blown-up trajectories are excluded; more than 1% of them is an error.
pub fn run_ensemble(config: &ExperimentConfig) -> Result<EnsembleResult, SimError> {
    let sim = Simulator::new(config)?;
    let times = sim.output_times();
    let mut acc = Accumulator::new(times.len());
    let mut diagnostics = EnsembleDiagnostics::default();
    let n = config.n_traj;
    for start in (0..n).step_by(BATCH) {
        let end = (start + BATCH).min(n);
        let batch: Vec<Result<Trajectory, SimError>> =
            (start..end).into_par_iter().map(|i| sim.run(i as u64)).collect();
        for result in batch {
            match result {
                Ok(traj) => {
                    acc.push(&traj.metrics);
                    diagnostics.completed += 1;
                    diagnostics.totals.merge(&traj.diagnostics);
                }
                Err(SimError::Blowup { .. }) => diagnostics.blowup_count += 1,
                Err(e) => return Err(e),
            }
        }
    }
    if diagnostics.blowup_count * 100 > n || diagnostics.completed == 0 {
        return Err(SimError::TooManyAborts { aborted: diagnostics.blowup_count, total: n });
    }
    let standard_errors = acc.standard_errors();
    let means = acc.mean.iter().map(|row| row.map(|v| v.clamp(0.0, f64::MAX))).collect();
    Ok(EnsembleResult {
        baseline_fidelity: single_qubit_baseline(config.plant.flip_rate[0], &times),
        times,
        means,
        standard_errors,
        diagnostics,
    })
}

/// CSV: `time`, each metric, `baseline_fidelity`, then `<metric>_se` for each metric.
pub fn write_ensemble_csv<W: Write>(result: &EnsembleResult, out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
    header.push("baseline_fidelity".into());
    header.extend(METRIC_NAMES.iter().map(|s| format!("{s}_se")));
    w.write_record(&header).map_err(csv_error)?;
    for (t, time) in result.times.iter().enumerate() {
        let mut row = vec![fmt_f64(time)];
        row.extend(result.means[t].iter().map(fmt_f64));
        row.push(fmt_f64(&result.baseline_fidelity[t]));
        row.extend(result.standard_errors[t].iter().map(fmt_f64));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV: `time`, each metric, then the applied gains `sigma1..3`.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
    header.extend(["sigma1", "sigma2", "sigma3"].map(String::from));
    w.write_record(&header).map_err(csv_error)?;
    for (t, time) in traj.times.iter().enumerate() {
        let mut row = vec![fmt_f64(time)];
        row.extend(traj.metrics[t].iter().map(fmt_f64));
        row.extend(traj.applied_gains[t].iter().map(fmt_f64));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Baseline CSV with columns `time,fidelity`.
pub fn write_baseline_csv<W: Write>(gamma: f64, times: &[f64], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "fidelity"]).map_err(csv_error)?;
    for (t, f) in times.iter().zip(single_qubit_baseline(gamma, times)) {
        w.write_record([fmt_f64(t), fmt_f64(&f)]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal, switching to exponent form outside `[1e-4, 1e15)`.
pub fn fmt_f64(x: &f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

fn csv_error(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e))
}

/// JSON sidecar with the resolved config, seed, version and diagnostics.
pub fn sidecar(config: &ExperimentConfig, diagnostics: &impl Serialize, warnings: &[String]) -> serde_json::Value {
    json!({
        "config": config.to_json_value(),
        "seed": config.seed,
        "version": version(),
        "diagnostics": diagnostics,
        "warnings": warnings,
    })
}

/// Reads the config back out of a sidecar produced by [`sidecar`].
pub fn config_from_sidecar(text: &str) -> Result<ExperimentConfig, SimError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let config = value.get("config").ok_or_else(|| SimError::Config("sidecar has no `config` entry".into()))?;
    crate::config::parse_config(&config.to_string()).map(|p| p.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ideal_preset, InitialState};

    fn small(mut cfg: ExperimentConfig) -> ExperimentConfig {
        cfg.horizon = 0.5;
        cfg.n_traj = 4;
        cfg.record_stride = 50;
        cfg
    }

    #[test]
    fn recovery_examples() {
        let ops = build_operators();
        let zero = DensityMatrix::basis_state(0);
        for (idx, expected) in [(0b000, 1.0), (0b100, 1.0), (0b010, 1.0), (0b001, 1.0), (0b011, 0.0), (0b111, 0.0)] {
            let f = correctable_fidelity(&DensityMatrix::basis_state(idx), &zero, &ops);
            assert_eq!(f, expected, "state {idx:03b}");
        }
    }

    #[test]
    fn recovery_preserves_trace() {
        let ops = build_operators();
        let rho = DensityMatrix::maximally_mixed();
        assert!((recover(rho.matrix(), &ops).trace().re - 1.0).abs() <= 1e-15);
        let r = recover(rho.matrix(), &ops);
        for i in 0..DIM {
            let expected = if i == 0 || i == 7 { 0.5 } else { 0.0 };
            assert!((r.0[i][i].re - expected).abs() <= 1e-15);
        }
    }

    #[test]
    fn baseline_values() {
        let b = single_qubit_baseline(1.0 / 64.0, &[0.0, 64.0, 1e6]);
        assert_eq!(b[0], 1.0);
        assert!((b[1] - (1.0 + (-2f64).exp()) / 2.0).abs() <= 1e-15);
        assert!((b[1] - 0.5677).abs() < 1e-4);
        assert!((b[2] - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn code_state_is_invariant_without_flips() {
        let mut cfg = small(ideal_preset());
        cfg.plant.flip_rate = [0.0; 3];
        cfg.filter = cfg.plant;
        cfg.estimator = Estimator::TrueState;
        let traj = run_trajectory(&cfg, 3).unwrap();
        for row in &traj.metrics {
            assert_eq!(&row[..3], &[1.0, 1.0, 1.0]);
        }
        assert_eq!(traj.diagnostics.gain_toggles, 0);
    }

    #[test]
    fn fast_forward_matches_full_stepping() {
        let mut cfg = ideal_preset();
        cfg.plant.flip_rate = [0.0; 3];
        cfg.filter = cfg.plant;
        cfg.estimator = Estimator::TrueState;
        cfg.initial_state = InitialState::Basis("001".into());
        cfg.horizon = 120.0;
        cfg.record_stride = 1000;
        let sim = Simulator::new(&cfg).unwrap();
        let fast = sim.run(5).unwrap();
        let slow = sim.clone().without_fast_forward().run(5).unwrap();
        assert!(fast.diagnostics.skipped_steps > 0);
        assert_eq!(slow.diagnostics.skipped_steps, 0);
        assert_eq!(fast.times, slow.times);
        for (a, b) in fast.metrics.iter().zip(&slow.metrics) {
            for m in 0..N_METRICS {
                assert!((a[m] - b[m]).abs() <= 1e-12, "{a:?} vs {b:?}");
            }
        }
        let last = fast.metrics.last().unwrap();
        assert_eq!((last[CODE_OVERLAP], last[V_CLOSED]), (1.0, 0.0));
    }

    #[test]
    fn trajectories_are_reproducible_and_distinct() {
        let cfg = small(ideal_preset());
        let a = run_trajectory(&cfg, 1).unwrap();
        assert_eq!(a, run_trajectory(&cfg, 1).unwrap());
        assert_ne!(a.metrics, run_trajectory(&cfg, 2).unwrap().metrics);
        assert_eq!(a.times.len(), 11);
        assert!((a.times.last().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn singleton_ensemble_reproduces_trajectory() {
        let mut cfg = small(ideal_preset());
        cfg.n_traj = 1;
        cfg.initial_state = InitialState::Basis("100".into());
        let traj = run_trajectory(&cfg, 0).unwrap();
        let ens = run_ensemble(&cfg).unwrap();
        assert_eq!(ens.means, traj.metrics);
        assert!(ens.standard_errors.iter().flatten().all(|&s| s == 0.0));
    }

    #[test]
    fn ensemble_is_bit_identical_across_thread_counts() {
        let mut cfg = small(ideal_preset());
        cfg.n_traj = 70;
        cfg.initial_state = InitialState::Basis("010".into());
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_ensemble(&cfg).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn latency_delays_the_first_switch() {
        let mut cfg = small(ideal_preset());
        cfg.estimator = Estimator::TrueState;
        cfg.initial_state = InitialState::Basis("100".into());
        cfg.record_stride = 1;
        cfg.horizon = 0.02;
        let prompt = run_trajectory(&cfg, 0).unwrap();
        assert!(prompt.applied_gains[0][0] > 0.0);
        cfg.latency = 0.01;
        let delayed = run_trajectory(&cfg, 0).unwrap();
        for (n, g) in delayed.applied_gains.iter().enumerate().take(20) {
            assert_eq!(g[0] > 0.0, n >= 10, "step {n}");
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let mut cfg = small(crate::config::mismatched_preset());
        cfg.initial_state = InitialState::Populations([0.4, 0.3, 0.2, 0.1]);
        let ens = run_ensemble(&cfg).unwrap();
        for row in &ens.means {
            assert!(row[..6].iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(ens.standard_errors.iter().flatten().all(|&s| s >= 0.0));
    }

    #[test]
    fn csv_has_header_and_monotone_time() {
        let cfg = small(ideal_preset());
        let ens = run_ensemble(&cfg).unwrap();
        let mut buf = Vec::new();
        write_ensemble_csv(&ens, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("time,code_overlap,fidelity,correctable_fidelity"));
        assert_eq!(header.split(',').count(), 2 + 2 * N_METRICS);
        let times: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn csv_numbers_round_trip() {
        for x in [0.0, 1.0, 0.5677, 1e-4, 3.2e-60, -7.5e-300, 1e20, 123.456] {
            let s = fmt_f64(&x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
            assert!(s.len() < 30, "{s}");
        }
    }

    #[test]
    fn sidecar_round_trips() {
        let cfg = crate::config::mismatched_preset();
        let side = sidecar(&cfg, &EnsembleDiagnostics::default(), &[]);
        assert_eq!(config_from_sidecar(&side.to_string()).unwrap(), cfg);
        assert_eq!(side["seed"], cfg.seed);
    }
}
