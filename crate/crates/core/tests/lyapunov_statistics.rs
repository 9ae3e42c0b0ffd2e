//! Lyapunov decay checked against the Monte Carlo error of the ensemble mean.
//!
//! Under measurement alone `E[V_open(t)] = e^{-4ηΓt} V_open(0)` holds with
//! equality, and the mean is carried by rare slowly-deciding trajectories, so
//! the sample mean is compared with the bound plus three standard errors.

use bitflip_qec::config::{ideal_preset, Estimator, InitialState};
use bitflip_qec::experiments::{run_ensemble, V_OPEN};
use bitflip_qec::model::PlantParams;

#[test]
fn open_loop_mean_within_bound_plus_three_standard_errors() {
    let mut cfg = ideal_preset();
    cfg.plant = PlantParams::uniform(1.0, 0.8, 0.0);
    cfg.filter = cfg.plant;
    cfg.estimator = Estimator::TrueState;
    cfg.feedback = false;
    cfg.horizon = 10.0;
    cfg.n_traj = 1000;
    cfg.seed = 5;
    cfg.initial_state = InitialState::Populations([0.4, 0.3, 0.2, 0.1]);
    let ens = run_ensemble(&cfg).unwrap();
    let v0 = ens.means[0][V_OPEN];
    for (t, (mean, se)) in ens.times.iter().zip(ens.means.iter().zip(&ens.standard_errors)) {
        let bound = 1.1 * (-3.2 * t).exp() * v0;
        assert!(mean[V_OPEN] <= bound + 3.0 * se[V_OPEN], "t = {t}: {} > {bound} + 3 * {}", mean[V_OPEN], se[V_OPEN]);
    }
    // early on, before rare paths dominate, the mean sits on the bound
    let i = ens.times.iter().position(|&t| (t - 0.5).abs() < 1e-9).unwrap();
    let ratio = ens.means[i][V_OPEN] / ((-1.6f64).exp() * v0);
    assert!((0.9..1.1).contains(&ratio), "{ratio}");
}
