//! Fixtures shared by the benchmarks.

use classdose_core::balance::BalanceProblem;
use classdose_core::drf::DoseData;
use classdose_core::sim::{simulate_measurement, SimSettings};
use classdose_core::{assemble_design, DesignBundle, ItemCatalog, ParameterSet};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Simulated design with `n_centers` centers at the default settings, and
/// the true parameters.
pub fn measurement_fixture(n_centers: usize, seed: u64) -> (DesignBundle, ParameterSet, ItemCatalog) {
    let cat = ItemCatalog::default_six_factor();
    let settings = SimSettings {
        n_centers,
        ..SimSettings::default()
    };
    let cfg = settings.to_config(&cat, seed).expect("valid settings");
    let (frame, _) = simulate_measurement(&cfg, &cat).expect("simulation");
    let bundle = assemble_design(&frame, &cat).expect("design");
    (bundle, cfg.theta, cat)
}

/// Confounded dose with `q` covariates.
pub fn balance_fixture(n: usize, q: usize, p: usize, seed: u64) -> BalanceProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let d = DVector::from_fn(n, |i, _| 0.4 * x.row(i).sum() + rng.sample::<f64, _>(StandardNormal));
    let names = (0..q).map(|c| format!("x{c}")).collect();
    BalanceProblem::new(d, x, names, None, p).expect("valid problem")
}

/// Smooth nonlinear response with noise and unequal weights.
pub fn dose_fixture(n: usize, seed: u64) -> DoseData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dose: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let z = dose
        .iter()
        .map(|d| (1.3 * d).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut data = DoseData::uniform(z, dose);
    data.weights = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    data
}
