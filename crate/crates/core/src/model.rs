//! Stochastic master equation of the continuously measured three-qubit register.
//!
//! Open loop:
//!
//! ```text
//! dρ = Σ_k Γ_k D[S_k](ρ) dt + √(η_k Γ_k) M[S_k](ρ) dW_k + Σ_s γ_s D[X_s](ρ) dt
//! ```
//!
//! Closed loop adds `Σ_j -iσ_j [X_j, ρ] dB_j + σ_j² D[X_j](ρ) dt`, the Itō form
//! of a control Hamiltonian `X_j` driven by `σ_j dB_j`. Records are
//! `dY_k = 2√(η_k Γ_k) tr(S_k ρ) dt + dW_k`.
//!
//! Steps are Euler–Maruyama followed by [`repair`](crate::algebra::repair).

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::algebra::{self, build_operators, ComplexMatrix8, DensityMatrix, OperatorSet, RepairReport, DIM};
use crate::error::SimError;

/// Largest admissible `dt · rate` for any rate entering a step.
pub const STABILITY_LIMIT: f64 = 0.01;

/// `D_L(ρ) = LρL† − ½(L†Lρ + ρL†L)`
pub fn dissipator(l: &ComplexMatrix8, rho: &ComplexMatrix8) -> ComplexMatrix8 {
    let ld = l.adjoint();
    let ldl = ld * *l;
    *l * *rho * ld - (ldl * *rho + *rho * ldl).scale(0.5)
}

/// `M_L(ρ) = Lρ + ρL† − tr(ρ(L + L†))ρ`
pub fn innovation(l: &ComplexMatrix8, rho: &ComplexMatrix8) -> ComplexMatrix8 {
    let ld = l.adjoint();
    let mean = rho.trace_product(&(*l + ld));
    *l * *rho + *rho * ld - rho.scale_complex(mean)
}

/// Rates and efficiencies of the measured register.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    /// Syndrome measurement strengths `Γ_k`.
    pub measurement_strength: [f64; 3],
    /// Detection efficiencies `η_k`.
    pub efficiency: [f64; 3],
    /// Bit-flip rates `γ_s`.
    pub flip_rate: [f64; 3],
}

impl PlantParams {
    pub fn uniform(measurement_strength: f64, efficiency: f64, flip_rate: f64) -> Self {
        Self {
            measurement_strength: [measurement_strength; 3],
            efficiency: [efficiency; 3],
            flip_rate: [flip_rate; 3],
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<(), SimError> {
        for k in 0..3 {
            let g = self.measurement_strength[k];
            if !(g > 0.0 && g.is_finite()) {
                return Err(SimError::param(format!("{prefix}.measurement_strength[{k}]"), format!("must be > 0, got {g}")));
            }
            let e = self.efficiency[k];
            if !(0.0..=1.0).contains(&e) {
                return Err(SimError::param(format!("{prefix}.efficiency[{k}]"), format!("must lie in [0, 1], got {e}")));
            }
            let f = self.flip_rate[k];
            if !(f >= 0.0 && f.is_finite()) {
                return Err(SimError::param(format!("{prefix}.flip_rate[{k}]"), format!("must be >= 0, got {f}")));
            }
        }
        Ok(())
    }

    /// `√(η_k Γ_k)`
    pub fn readout_gain(&self) -> [f64; 3] {
        std::array::from_fn(|k| (self.efficiency[k] * self.measurement_strength[k]).sqrt())
    }

    /// `max(Γ_k, γ_s)`
    pub fn fastest_rate(&self) -> f64 {
        self.measurement_strength
            .iter()
            .chain(self.flip_rate.iter())
            .copied()
            .fold(0.0, f64::max)
    }

    /// Default step `1e-3 / max Γ_k`.
    pub fn default_dt(&self) -> f64 {
        1e-3 / self.measurement_strength.iter().copied().fold(0.0, f64::max)
    }
}

/// Wiener increments for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepNoise {
    /// Measurement noise `dW_k`.
    pub dw: [f64; 3],
    /// Control noise `dB_j`.
    pub db: [f64; 3],
}

impl StepNoise {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Independent `Normal(0, dt)` draws, `dW_1..3` first, then `dB_1..3`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dt: f64) -> Self {
        let sd = dt.sqrt();
        let mut draw = || sd * rng.sample::<f64, _>(StandardNormal);
        let dw = [draw(), draw(), draw()];
        let db = [draw(), draw(), draw()];
        Self { dw, db }
    }
}

/// Syndrome record increments `dY_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeasurementRecord {
    pub dy: [f64; 3],
}

/// Terms of a single Euler–Maruyama increment on the structured operators.
///
/// `innovation_increment[k]` multiplies `√(η_k Γ_k) M[S_k](ρ)`: it is `dW_k`
/// for the plant and `dY_k − 2√(η_k Γ_k) tr(S_k ρ) dt` for a filter.
#[derive(Clone, Copy, Debug, Default)]
pub struct IncrementTerms {
    pub innovation_increment: [f64; 3],
    /// Coefficient of `D[X_j](ρ) dt`, i.e. `γ_j + σ_j²`.
    pub flip_rate: [f64; 3],
    /// `σ_j dB_j`, coefficient of `-i[X_j, ρ]`.
    pub control_kick: [f64; 3],
}

/// Precomputed tables for fast stepping of `dρ` with a fixed parameter set.
#[derive(Clone, Debug)]
pub struct SmeKernel {
    params: PlantParams,
    gain: [f64; 3],
    signs: [[f64; DIM]; 3],
    flips: [[usize; DIM]; 3],
    /// `Σ_k Γ_k (s_k(i) s_k(j) − 1)`: entrywise action of `Σ Γ_k D[S_k]`.
    dephasing: [[f64; DIM]; DIM],
}

impl SmeKernel {
    pub fn new(params: PlantParams, ops: &OperatorSet) -> Self {
        let mut dephasing = [[0.0; DIM]; DIM];
        for (i, row) in dephasing.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                *w = (0..3)
                    .map(|k| params.measurement_strength[k] * (ops.syndrome_signs[k][i] * ops.syndrome_signs[k][j] - 1.0))
                    .sum();
            }
        }
        Self {
            params,
            gain: params.readout_gain(),
            signs: ops.syndrome_signs,
            flips: ops.flip_index,
            dephasing,
        }
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    /// `√(η_k Γ_k)` of the kernel's parameters.
    pub fn readout_gain(&self) -> [f64; 3] {
        self.gain
    }

    /// `tr(S_k ρ)`
    pub fn syndrome_expectations(&self, rho: &ComplexMatrix8) -> [f64; 3] {
        self.signs.map(|s| (0..DIM).map(|i| s[i] * rho.0[i][i].re).sum())
    }

    /// `ρ + dρ` before repair.
    pub fn euler_update(&self, rho: &ComplexMatrix8, dt: f64, terms: &IncrementTerms) -> ComplexMatrix8 {
        let means = self.syndrome_expectations(rho);
        let coef: [f64; 3] = std::array::from_fn(|k| self.gain[k] * terms.innovation_increment[k]);
        let offset: f64 = (0..3).map(|k| 2.0 * coef[k] * means[k]).sum();
        let u: [f64; DIM] = std::array::from_fn(|i| (0..3).map(|k| coef[k] * self.signs[k][i]).sum());
        let rates = terms.flip_rate.map(|r| r * dt);
        let total_rate: f64 = rates.iter().sum();
        let kicks = terms.control_kick;
        let has_kick = kicks.iter().any(|&b| b != 0.0);

        let mut out = *rho;
        for i in 0..DIM {
            for j in 0..DIM {
                let r = rho.0[i][j];
                let mut d = r * (self.dephasing[i][j] * dt + u[i] + u[j] - offset - total_rate);
                for s in 0..3 {
                    let xi = self.flips[s][i];
                    let xj = self.flips[s][j];
                    d += rho.0[xi][xj] * rates[s];
                    if has_kick {
                        // -i σ dB (Xρ − ρX)_{ij}
                        let c = rho.0[xi][j] - rho.0[i][xj];
                        d += Complex64::new(c.im, -c.re) * kicks[s];
                    }
                }
                out.0[i][j] = r + d;
            }
        }
        out
    }
}

/// Result of one plant step.
#[derive(Clone, Copy, Debug)]
pub struct PlantStep {
    pub state: DensityMatrix,
    pub record: MeasurementRecord,
    /// `|tr(ρ + dρ) − 1|` before repair.
    pub trace_drift: f64,
    /// Whether repair had to clip eigenvalues.
    pub clipped: bool,
}

/// The measured register with fixed parameters.
#[derive(Clone, Debug)]
pub struct Plant {
    kernel: SmeKernel,
}

impl Plant {
    pub fn new(params: PlantParams) -> Result<Self, SimError> {
        params.validate("plant")?;
        Ok(Self { kernel: SmeKernel::new(params, &build_operators()) })
    }

    pub fn with_operators(params: PlantParams, ops: &OperatorSet) -> Result<Self, SimError> {
        params.validate("plant")?;
        Ok(Self { kernel: SmeKernel::new(params, ops) })
    }

    pub fn params(&self) -> &PlantParams {
        self.kernel.params()
    }

    pub fn kernel(&self) -> &SmeKernel {
        &self.kernel
    }

    /// Rejects steps where `dt · max(Γ_k, γ_s, σ_j²)` exceeds [`STABILITY_LIMIT`].
    pub fn check_step(&self, dt: f64, sigma: &[f64; 3]) -> Result<(), SimError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::param("dt", format!("must be > 0, got {dt}")));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(SimError::param("sigma", format!("gains must be >= 0, got {sigma:?}")));
        }
        let rate = sigma.iter().map(|s| s * s).fold(self.params().fastest_rate(), f64::max);
        let product = dt * rate;
        if product > STABILITY_LIMIT {
            return Err(SimError::StepTooLarge { dt, rate, product, limit: STABILITY_LIMIT });
        }
        Ok(())
    }

    /// `dY_k = 2√(η_k Γ_k) tr(S_k ρ) dt + dW_k`
    pub fn record(&self, rho: &ComplexMatrix8, dt: f64, noise: &StepNoise) -> MeasurementRecord {
        let means = self.kernel.syndrome_expectations(rho);
        let gain = self.kernel.readout_gain();
        MeasurementRecord { dy: std::array::from_fn(|k| 2.0 * gain[k] * means[k] * dt + noise.dw[k]) }
    }

    /// `ρ + dρ` of the closed-loop equation, without repair.
    pub fn raw_update(&self, rho: &ComplexMatrix8, sigma: &[f64; 3], dt: f64, noise: &StepNoise) -> ComplexMatrix8 {
        let gamma = self.params().flip_rate;
        let terms = IncrementTerms {
            innovation_increment: noise.dw,
            flip_rate: std::array::from_fn(|j| gamma[j] + sigma[j] * sigma[j]),
            control_kick: std::array::from_fn(|j| sigma[j] * noise.db[j]),
        };
        self.kernel.euler_update(rho, dt, &terms)
    }

    pub fn step_open_loop(&self, rho: &DensityMatrix, dt: f64, noise: &StepNoise) -> Result<PlantStep, SimError> {
        self.step_closed_loop(rho, &[0.0; 3], dt, noise)
    }

    pub fn step_closed_loop(
        &self,
        rho: &DensityMatrix,
        sigma: &[f64; 3],
        dt: f64,
        noise: &StepNoise,
    ) -> Result<PlantStep, SimError> {
        self.check_step(dt, sigma)?;
        let record = self.record(rho.matrix(), dt, noise);
        let raw = self.raw_update(rho.matrix(), sigma, dt, noise);
        let (state, RepairReport { clipped, trace_before }) = algebra::repair(&raw)?;
        Ok(PlantStep { state, record, trace_drift: (trace_before - 1.0).abs(), clipped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::populations;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_closed_loop_update(
        ops: &OperatorSet,
        p: &PlantParams,
        rho: &ComplexMatrix8,
        sigma: &[f64; 3],
        dt: f64,
        noise: &StepNoise,
    ) -> ComplexMatrix8 {
        let mut d = ComplexMatrix8::zeros();
        for k in 0..3 {
            let g = p.measurement_strength[k];
            d += dissipator(&ops.syndromes[k], rho).scale(g * dt);
            d += innovation(&ops.syndromes[k], rho).scale((p.efficiency[k] * g).sqrt() * noise.dw[k]);
            d += dissipator(&ops.flips[k], rho).scale((p.flip_rate[k] + sigma[k] * sigma[k]) * dt);
            let comm = ops.flips[k].commutator(rho);
            d += comm.scale_complex(Complex64::new(0.0, -sigma[k] * noise.db[k]));
        }
        *rho + d
    }

    fn random_state(rng: &mut ChaCha8Rng) -> DensityMatrix {
        let mut a = ComplexMatrix8::zeros();
        for z in a.0.iter_mut().flatten() {
            *z = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        }
        let m = a * a.adjoint();
        let tr = m.trace().re;
        DensityMatrix::new(m.scale(1.0 / tr).hermitian_part()).unwrap()
    }

    #[test]
    fn dissipator_examples() {
        let ops = build_operators();
        let rho0 = DensityMatrix::basis_state(0);
        assert_eq!(dissipator(&ops.identity, rho0.matrix()).max_abs(), 0.0);
        assert_eq!(dissipator(&ops.syndromes[0], rho0.matrix()).max_abs(), 0.0);
        let expected = ComplexMatrix8::basis_outer(0b100, 0b100) - ComplexMatrix8::basis_outer(0, 0);
        assert_eq!(dissipator(&ops.flips[0], rho0.matrix()), expected);
    }

    #[test]
    fn innovation_examples() {
        let ops = build_operators();
        let rho0 = DensityMatrix::basis_state(0b111);
        for k in 0..3 {
            assert!(innovation(&ops.syndromes[k], rho0.matrix()).max_abs() <= 1e-15);
        }
        let mixed = DensityMatrix::maximally_mixed();
        let m = innovation(&ops.syndromes[0], mixed.matrix());
        assert!(m.max_abs_diff(&ops.syndromes[0].scale(0.25)) <= 1e-15);

        // (|000><000| + |100><100|)/2 has tr(S1 ρ) = 1, S1 = +1 on both states.
        let rho = (ComplexMatrix8::basis_outer(0, 0) + ComplexMatrix8::basis_outer(4, 4)).scale(0.5);
        assert!(innovation(&ops.syndromes[0], &rho).max_abs() <= 1e-15);
        // Under S2 the two states have opposite signs: tr(S2 ρ) = 0.
        let expected = ComplexMatrix8::basis_outer(0, 0) - ComplexMatrix8::basis_outer(4, 4);
        assert!(innovation(&ops.syndromes[1], &rho).max_abs_diff(&expected) <= 1e-15);
    }

    #[test]
    fn superoperators_are_traceless() {
        let ops = build_operators();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let rho = random_state(&mut rng);
            for l in ops.syndromes.iter().chain(ops.flips.iter()) {
                assert!(dissipator(l, rho.matrix()).trace().norm() <= 1e-12);
                let m = innovation(l, rho.matrix());
                assert!(m.trace().norm() <= 1e-12);
                assert!(m.hermiticity_error() <= 1e-14);
            }
        }
    }

    #[test]
    fn structured_update_matches_dense_formula() {
        let ops = build_operators();
        let params = PlantParams {
            measurement_strength: [1.0, 0.7, 1.3],
            efficiency: [0.8, 0.5, 1.0],
            flip_rate: [0.1, 0.02, 0.3],
        };
        let plant = Plant::new(params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let rho = random_state(&mut rng);
            let noise = StepNoise::sample(&mut rng, 1e-3);
            let sigma = [0.3, 2.0, 1.1];
            let fast = plant.raw_update(rho.matrix(), &sigma, 1e-3, &noise);
            let slow = dense_closed_loop_update(&ops, &params, rho.matrix(), &sigma, 1e-3, &noise);
            assert!(fast.max_abs_diff(&slow) <= 1e-14, "{}", fast.max_abs_diff(&slow));
        }
    }

    #[test]
    fn code_state_is_steady_without_flips() {
        let plant = Plant::new(PlantParams::uniform(1.0, 0.8, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rho0 = DensityMatrix::basis_state(0);
        let mut rho = rho0;
        for _ in 0..1000 {
            let noise = StepNoise::sample(&mut rng, 1e-3);
            rho = plant.step_open_loop(&rho, 1e-3, &noise).unwrap().state;
        }
        assert!(rho.matrix().max_abs_diff(rho0.matrix()) <= 1e-12);
    }

    #[test]
    fn drift_preserves_populations_without_flips() {
        let ops = build_operators();
        let plant = Plant::new(PlantParams::uniform(1.0, 0.8, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let rho = random_state(&mut rng);
            let before = populations(&rho, &ops);
            let next = plant.raw_update(rho.matrix(), &[0.0; 3], 1e-3, &StepNoise::zero());
            for (proj, p) in [ops.code_projector, ops.flip_projectors[0], ops.flip_projectors[1], ops.flip_projectors[2]]
                .iter()
                .zip(before.as_array())
            {
                assert!((proj.trace_product(&next).re - p).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn zero_efficiency_removes_diffusion() {
        let plant = Plant::new(PlantParams::uniform(1.0, 0.0, 0.1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho = random_state(&mut rng);
        let a = plant.raw_update(rho.matrix(), &[0.0; 3], 1e-3, &StepNoise::sample(&mut rng, 1e-3));
        let b = plant.raw_update(rho.matrix(), &[0.0; 3], 1e-3, &StepNoise::zero());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_gain_matches_open_loop() {
        let plant = Plant::new(PlantParams::uniform(1.0, 0.8, 0.05)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rho = random_state(&mut rng);
        let noise = StepNoise::sample(&mut rng, 1e-3);
        let open = plant.step_open_loop(&rho, 1e-3, &noise).unwrap();
        let closed = plant.step_closed_loop(&rho, &[0.0; 3], 1e-3, &noise).unwrap();
        assert_eq!(open.state, closed.state);
        assert_eq!(open.record, closed.record);
    }

    #[test]
    fn trace_is_preserved_before_repair() {
        let plant = Plant::new(PlantParams::uniform(1.0, 0.8, 1.0 / 64.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut rho = random_state(&mut rng);
        for _ in 0..1000 {
            let noise = StepNoise::sample(&mut rng, 1e-4);
            let step = plant.step_closed_loop(&rho, &[2.0, 0.0, 1.0], 1e-4, &noise).unwrap();
            assert!(step.trace_drift <= 1e-12);
            rho = step.state;
        }
    }

    #[test]
    fn record_is_reproducible() {
        let plant = Plant::new(PlantParams::uniform(1.0, 0.8, 0.0)).unwrap();
        let rho = DensityMatrix::basis_state(0b100);
        let noise = StepNoise { dw: [0.01, -0.02, 0.03], db: [0.0; 3] };
        let rec = plant.record(rho.matrix(), 1e-3, &noise);
        let g = 0.8f64.sqrt();
        let expected = [2.0 * g * 1e-3 + 0.01, -2.0 * g * 1e-3 - 0.02, -2.0 * g * 1e-3 + 0.03];
        for k in 0..3 {
            assert!((rec.dy[k] - expected[k]).abs() <= 1e-15);
        }
    }

    #[test]
    fn pure_states_stay_pure_with_perfect_detection() {
        let plant = Plant::new(PlantParams::uniform(1.0, 1.0, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = Complex64::new(0.5, 0.0);
        let psi = [h, Complex64::new(0.0, 0.5), ZERO_C, ZERO_C, h, ZERO_C, ZERO_C, Complex64::new(-0.5, 0.0)];
        let mut rho = DensityMatrix::pure(&psi).unwrap();
        for _ in 0..10_000 {
            let noise = StepNoise::sample(&mut rng, 1e-4);
            rho = plant.step_open_loop(&rho, 1e-4, &noise).unwrap().state;
            assert!(rho.purity() <= 1.0 + 1e-10);
        }
        assert!((rho.purity() - 1.0).abs() <= 1e-6, "purity {}", rho.purity());
    }

    const ZERO_C: Complex64 = Complex64::new(0.0, 0.0);

    #[test]
    fn step_guard_rejects_coarse_steps() {
        let plant = Plant::new(PlantParams::uniform(1.0, 0.8, 0.0)).unwrap();
        let rho = DensityMatrix::basis_state(0);
        let err = plant.step_open_loop(&rho, 0.02, &StepNoise::zero()).unwrap_err();
        assert!(matches!(err, SimError::StepTooLarge { .. }));
        let err = plant.step_closed_loop(&rho, &[3.0, 0.0, 0.0], 2e-3, &StepNoise::zero()).unwrap_err();
        assert!(matches!(err, SimError::StepTooLarge { .. }));
        assert!(Plant::new(PlantParams::uniform(0.0, 0.8, 0.0)).is_err());
        assert!(Plant::new(PlantParams::uniform(1.0, 1.2, 0.0)).is_err());
    }
}
