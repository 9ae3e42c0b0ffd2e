//! Estimators driven by the syndrome records.
//!
//! [`FullFilter`] propagates a density matrix estimate. Passing zero control
//! increments gives the filter that averages over the unobserved control
//! noise, whose syndrome expectations `ŝ_k = tr(S_k ρ̂)` obey the closed
//! three-dimensional system implemented by [`ReducedFilter`]:
//!
//! ```text
//! dŝ_k = −2 Σ_{l≠k} (γ_l + σ_l²) ŝ_k dt
//!        + 2√(η_k Γ_k) (1 − ŝ_k²) dI_k
//!        + Σ_{l≠k} 2√(η_l Γ_l) (ŝ_m − ŝ_k ŝ_l) dI_l,    {k, l, m} = {1, 2, 3}
//! dI_l  = dY_l − 2√(η_l Γ_l) ŝ_l dt
//! ```

use crate::algebra::{self, build_operators, DensityMatrix, OperatorSet, Populations};
use crate::error::SimError;
use crate::model::{IncrementTerms, MeasurementRecord, PlantParams, SmeKernel, STABILITY_LIMIT};

/// Parameters the filter assumes, possibly different from the plant's.
pub type FilterParams = PlantParams;

/// Result of one full-filter step.
#[derive(Clone, Copy, Debug)]
pub struct FilterStep {
    pub state: DensityMatrix,
    pub trace_drift: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug)]
pub struct FullFilter {
    kernel: SmeKernel,
}

impl FullFilter {
    pub fn new(params: FilterParams) -> Result<Self, SimError> {
        Self::with_operators(params, &build_operators())
    }

    pub fn with_operators(params: FilterParams, ops: &OperatorSet) -> Result<Self, SimError> {
        params.validate("filter")?;
        Ok(Self { kernel: SmeKernel::new(params, ops) })
    }

    pub fn params(&self) -> &FilterParams {
        self.kernel.params()
    }

    /// One Euler–Maruyama step driven by the record `dY` and, when the control
    /// noise is observed, by `dB`; pass `[0.0; 3]` for `db` otherwise.
    pub fn step(
        &self,
        rho_hat: &DensityMatrix,
        record: &MeasurementRecord,
        db: &[f64; 3],
        sigma: &[f64; 3],
        dt: f64,
    ) -> Result<FilterStep, SimError> {
        check_filter_step(self.params(), sigma, dt)?;
        let gain = self.kernel.readout_gain();
        let means = self.kernel.syndrome_expectations(rho_hat.matrix());
        let gamma = self.params().flip_rate;
        let terms = IncrementTerms {
            innovation_increment: std::array::from_fn(|k| record.dy[k] - 2.0 * gain[k] * means[k] * dt),
            flip_rate: std::array::from_fn(|j| gamma[j] + sigma[j] * sigma[j]),
            control_kick: std::array::from_fn(|j| sigma[j] * db[j]),
        };
        let raw = self.kernel.euler_update(rho_hat.matrix(), dt, &terms);
        let (state, report) = algebra::repair(&raw)?;
        Ok(FilterStep { state, trace_drift: (report.trace_before - 1.0).abs(), clipped: report.clipped })
    }
}

/// Free-function form of [`FullFilter::step`].
pub fn full_filter_step(
    rho_hat: &DensityMatrix,
    record: &MeasurementRecord,
    db: &[f64; 3],
    sigma: &[f64; 3],
    params: &FilterParams,
    dt: f64,
) -> Result<DensityMatrix, SimError> {
    FullFilter::new(*params)?.step(rho_hat, record, db, sigma, dt).map(|s| s.state)
}

fn check_filter_step(params: &FilterParams, sigma: &[f64; 3], dt: f64) -> Result<(), SimError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::param("dt", format!("must be > 0, got {dt}")));
    }
    let rate = sigma.iter().map(|s| s * s).fold(params.fastest_rate(), f64::max);
    let product = dt * rate;
    if product > STABILITY_LIMIT {
        return Err(SimError::StepTooLarge { dt, rate, product, limit: STABILITY_LIMIT });
    }
    Ok(())
}

/// Syndrome expectations `(ŝ_1, ŝ_2, ŝ_3)`, each in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyndromeFilterState {
    pub s_hat: [f64; 3],
}

impl SyndromeFilterState {
    /// Nominal code state, all syndromes `+1`.
    pub fn code_space() -> Self {
        Self { s_hat: [1.0; 3] }
    }

    pub fn from_density(rho: &DensityMatrix, ops: &OperatorSet) -> Self {
        Self { s_hat: ops.syndrome_expectations(rho.matrix()).map(|s| s.clamp(-1.0, 1.0)) }
    }
}

/// `p̂_C = (1 + ŝ1 + ŝ2 + ŝ3)/4`, `p̂_1 = (1 + ŝ1 − ŝ2 − ŝ3)/4` and cyclic.
///
/// Values are clipped to `[0, 1]` and rescaled to sum to one.
pub fn populations_from_syndromes(state: &SyndromeFilterState) -> Populations {
    let [s1, s2, s3] = state.s_hat;
    let raw = [
        (1.0 + s1 + s2 + s3) / 4.0,
        (1.0 + s1 - s2 - s3) / 4.0,
        (1.0 + s2 - s3 - s1) / 4.0,
        (1.0 + s3 - s1 - s2) / 4.0,
    ];
    let clipped = raw.map(|p| p.clamp(0.0, 1.0));
    let total: f64 = clipped.iter().sum();
    if clipped == raw || total <= 0.0 {
        Populations::from_array(clipped)
    } else {
        Populations::from_array(clipped.map(|p| p / total))
    }
}

/// Result of one reduced-filter step.
#[derive(Clone, Copy, Debug)]
pub struct ReducedStep {
    pub state: SyndromeFilterState,
    /// Number of components clipped back into `[-1, 1]`.
    pub clipped: u32,
}

#[derive(Clone, Copy, Debug)]
pub struct ReducedFilter {
    params: FilterParams,
    gain: [f64; 3],
}

impl ReducedFilter {
    pub fn new(params: FilterParams) -> Result<Self, SimError> {
        params.validate("filter")?;
        Ok(Self { params, gain: params.readout_gain() })
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn step(&self, state: &SyndromeFilterState, record: &MeasurementRecord, sigma: &[f64; 3], dt: f64) -> ReducedStep {
        let s = state.s_hat;
        let g = self.gain;
        let innov: [f64; 3] = std::array::from_fn(|l| record.dy[l] - 2.0 * g[l] * s[l] * dt);
        let flip: [f64; 3] = std::array::from_fn(|j| self.params.flip_rate[j] + sigma[j] * sigma[j]);
        let mut next = [0.0; 3];
        let mut clipped = 0;
        for k in 0..3 {
            let (l, m) = ((k + 1) % 3, (k + 2) % 3);
            let ds = -2.0 * (flip[l] + flip[m]) * s[k] * dt
                + 2.0 * g[k] * (1.0 - s[k] * s[k]) * innov[k]
                + 2.0 * g[l] * (s[m] - s[k] * s[l]) * innov[l]
                + 2.0 * g[m] * (s[l] - s[k] * s[m]) * innov[m];
            let v = s[k] + ds;
            next[k] = if v > 1.0 {
                clipped += 1;
                1.0
            } else if v < -1.0 {
                clipped += 1;
                -1.0
            } else {
                v
            };
        }
        ReducedStep { state: SyndromeFilterState { s_hat: next }, clipped }
    }
}

/// Free-function form of [`ReducedFilter::step`].
pub fn reduced_filter_step(
    state: &SyndromeFilterState,
    record: &MeasurementRecord,
    sigma: &[f64; 3],
    params: &FilterParams,
    dt: f64,
) -> Result<SyndromeFilterState, SimError> {
    check_filter_step(params, sigma, dt)?;
    Ok(ReducedFilter::new(*params)?.step(state, record, sigma, dt).state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{dissipator, Plant, StepNoise};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn params() -> FilterParams {
        PlantParams::uniform(1.0, 0.8, 0.05)
    }

    #[test]
    fn population_map_examples() {
        let p = populations_from_syndromes(&SyndromeFilterState::code_space());
        assert_eq!(p.as_array(), [1.0, 0.0, 0.0, 0.0]);
        let p = populations_from_syndromes(&SyndromeFilterState { s_hat: [1.0, -1.0, -1.0] });
        assert_eq!(p.as_array(), [0.0, 1.0, 0.0, 0.0]);
        let p = populations_from_syndromes(&SyndromeFilterState { s_hat: [0.0; 3] });
        assert_eq!(p.as_array(), [0.25; 4]);
        let p = populations_from_syndromes(&SyndromeFilterState { s_hat: [1.0, 1.0, -1.0] });
        assert!((p.as_array().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(p.as_array().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn population_map_matches_density_populations() {
        let ops = build_operators();
        for idx in 0..8 {
            let rho = DensityMatrix::basis_state(idx);
            let from_s = populations_from_syndromes(&SyndromeFilterState::from_density(&rho, &ops));
            assert_eq!(from_s, algebra::populations(&rho, &ops));
        }
    }

    #[test]
    fn code_space_is_a_fixed_point() {
        let f = ReducedFilter::new(PlantParams::uniform(1.0, 0.8, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = SyndromeFilterState::code_space();
        for _ in 0..100 {
            let record = MeasurementRecord { dy: std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) * 0.03) };
            let step = f.step(&s, &record, &[0.0; 3], 1e-3);
            assert_eq!(step.clipped, 0);
            s = step.state;
        }
        assert_eq!(s, SyndromeFilterState::code_space());
    }

    #[test]
    fn syndromes_decay_at_twice_the_flip_rate() {
        let p = PlantParams { flip_rate: [0.3, 0.1, 0.2], efficiency: [0.0; 3], ..params() };
        let f = ReducedFilter::new(p).unwrap();
        let dt = 1e-4;
        let mut s = SyndromeFilterState { s_hat: [0.5, 0.5, 0.5] };
        let n = 10_000;
        for _ in 0..n {
            s = f.step(&s, &MeasurementRecord::default(), &[0.0; 3], dt).state;
        }
        let t = n as f64 * dt;
        let expected = 0.5 * (1.0 - 2.0 * 0.3 * dt).powi(n);
        assert!((s.s_hat[0] - expected).abs() <= 1e-12);
        assert!((s.s_hat[0] - 0.5 * (-2.0 * 0.3 * t).exp()).abs() <= 1e-4);
        assert!((s.s_hat[1] - 0.5 * (-2.0 * 0.5 * t).exp()).abs() <= 1e-4);
    }

    #[test]
    fn full_filter_is_stationary_on_code_state() {
        let filter = FullFilter::new(PlantParams::uniform(1.0, 0.8, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho0 = DensityMatrix::basis_state(0);
        let mut rho = rho0;
        for _ in 0..500 {
            let noise = StepNoise::sample(&mut rng, 1e-3);
            let record = MeasurementRecord { dy: noise.dw };
            rho = filter.step(&rho, &record, &[0.0; 3], &[0.0; 3], 1e-3).unwrap().state;
        }
        assert!(rho.matrix().max_abs_diff(rho0.matrix()) <= 1e-12);
    }

    #[test]
    fn zero_innovation_gives_deterministic_lindblad_update() {
        let ops = build_operators();
        let p = params();
        let filter = FullFilter::new(p).unwrap();
        let rho = DensityMatrix::syndrome_diagonal([0.4, 0.3, 0.2, 0.1]).unwrap();
        let dt = 1e-3;
        let g = p.readout_gain();
        let s = ops.syndrome_expectations(rho.matrix());
        let record = MeasurementRecord { dy: std::array::from_fn(|k| 2.0 * g[k] * s[k] * dt) };
        let got = filter.step(&rho, &record, &[0.0; 3], &[0.0; 3], dt).unwrap().state;
        let mut expected = *rho.matrix();
        for k in 0..3 {
            expected += dissipator(&ops.syndromes[k], rho.matrix()).scale(p.measurement_strength[k] * dt);
            expected += dissipator(&ops.flips[k], rho.matrix()).scale(p.flip_rate[k] * dt);
        }
        assert!(got.matrix().max_abs_diff(&expected) <= 1e-15);
    }

    #[test]
    fn full_filter_tracks_plant_with_shared_noise() {
        let p = PlantParams::uniform(1.0, 0.8, 1.0 / 64.0);
        let plant = Plant::new(p).unwrap();
        let filter = FullFilter::new(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rho = DensityMatrix::syndrome_diagonal([0.7, 0.1, 0.1, 0.1]).unwrap();
        let mut rho_hat = rho;
        let sigma = [1.0, 0.0, 0.5];
        for _ in 0..1000 {
            let noise = StepNoise::sample(&mut rng, 1e-4);
            let step = plant.step_closed_loop(&rho, &sigma, 1e-4, &noise).unwrap();
            rho_hat = filter.step(&rho_hat, &step.record, &noise.db, &sigma, 1e-4).unwrap().state;
            rho = step.state;
        }
        assert!(rho.matrix().max_abs_diff(rho_hat.matrix()) <= 1e-6);
    }

    #[test]
    fn free_functions_match_methods() {
        let p = params();
        let s = SyndromeFilterState { s_hat: [0.9, 0.8, 0.7] };
        let record = MeasurementRecord { dy: [0.01, -0.02, 0.005] };
        let a = reduced_filter_step(&s, &record, &[0.5, 0.0, 0.0], &p, 1e-3).unwrap();
        let b = ReducedFilter::new(p).unwrap().step(&s, &record, &[0.5, 0.0, 0.0], 1e-3).state;
        assert_eq!(a, b);
        assert!(reduced_filter_step(&s, &record, &[5.0, 0.0, 0.0], &p, 1e-3).is_err());
        let rho = DensityMatrix::maximally_mixed();
        let full = full_filter_step(&rho, &record, &[0.0; 3], &[0.0; 3], &p, 1e-3).unwrap();
        assert!((full.matrix().trace().re - 1.0).abs() <= 1e-12);
    }
}
