use crate::balance::{ebct_solve, effective_sample_size, BalanceProblem};
use crate::drf::{center_mean_center, demean_dose, wls_fit, DoseData, WlsOptions};
use crate::ident::{ci_completion, feasibility_check, BlockPartition, Classification};
use crate::sim::{simulate_measurement, OutcomeModel, SimConfig};
use crate::vpc::{item_vpc, rescaling_invariance_check};
use crate::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn theta_from(loadings: &[f64], a: &[f64], s2a: f64, s2e: f64) -> ParameterSet {
    let cat = ItemCatalog::default_six_factor();
    let m = DMatrix::from_column_slice(6, 6, a);
    let psi = &m * m.transpose() / 6.0 + DMatrix::identity(6, 6) * 0.2;
    ParameterSet::from_loadings(ConstraintMeta::from_catalog(&cat), DVector::zeros(25), loadings, psi, s2a, s2e)
        .unwrap()
}

fn theta_strategy() -> impl Strategy<Value = ParameterSet> {
    (
        prop::collection::vec(0.2f64..2.0, 25),
        prop::collection::vec(-1.5f64..1.5, 36),
        0.0f64..1.0,
        0.05f64..2.0,
    )
        .prop_map(|(l, a, s2a, s2e)| theta_from(&l, &a, s2a, s2e))
}

fn ids(groups: &[usize]) -> (Vec<String>, Vec<String>) {
    let class = (0..groups.len()).map(|i| format!("k{i}")).collect();
    let center = groups.iter().map(|g| format!("c{g}")).collect();
    (class, center)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vpc_shares_are_a_partition(theta in theta_strategy()) {
        let cat = ItemCatalog::default_six_factor();
        let t = item_vpc(&theta, &cat, None).unwrap();
        for it in &t.items {
            prop_assert!((it.pi1 + it.pi2 + it.pi3 - 1.0).abs() < 1e-12);
            prop_assert!(it.pi1 >= 0.0 && it.pi2 >= 0.0 && it.pi3 >= 0.0);
        }
        prop_assert!((t.pi1_bar + t.pi2_bar + t.pi3_bar - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vpc_survives_factor_rescaling(theta in theta_strategy(), d in prop::collection::vec(0.1f64..10.0, 6)) {
        prop_assert!(rescaling_invariance_check(&theta, &d).unwrap() < 1e-10);
    }

    #[test]
    fn ci_completion_is_strictly_feasible(theta in theta_strategy()) {
        let cat = ItemCatalog::default_six_factor();
        let mut p = BlockPartition::from_psi(&theta.psi2, &cat).unwrap();
        p.f = ci_completion(&p).unwrap();
        let r = feasibility_check(&p).unwrap();
        prop_assert!(r.feasible && r.margin > 0.0);
        prop_assert_eq!(r.classification, Classification::Feasible);
    }

    #[test]
    fn centering_zeroes_every_center(
        groups in prop::collection::vec(0usize..5, 2..40),
        y in prop::collection::vec(-10.0f64..10.0, 40),
    ) {
        let (class, center) = ids(&groups);
        let y = &y[..groups.len()];
        let z = center_mean_center(&class, &center, y);
        let d = demean_dose(y, &center);
        for g in 0..5 {
            let tag = format!("c{g}");
            let sz: f64 = z.iter().filter(|c| c.center_id == tag).map(|c| c.z).sum();
            let sd: f64 = d.iter().zip(&center).filter(|(_, c)| **c == tag).map(|(v, _)| v).sum();
            prop_assert!(sz.abs() < 1e-9 && sd.abs() < 1e-9);
        }
    }

    #[test]
    fn ess_is_bounded_and_scale_free(w in prop::collection::vec(1e-3f64..1.0, 1..200), s in 1e-3f64..1e3) {
        let w = DVector::from_vec(w);
        let e = effective_sample_size(&w);
        prop_assert!(e >= 1.0 - 1e-12 && e <= w.len() as f64 + 1e-9);
        prop_assert!((effective_sample_size(&(&w * s)) - e).abs() < 1e-9 * e);
    }

    #[test]
    fn ebct_weights_are_a_balanced_distribution(seed in any::<u64>(), n in 30usize..150, q in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, q, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
        let d = DVector::from_fn(n, |i, _| 0.3 * x.row(i).sum() + rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng));
        let names = (0..q).map(|c| format!("x{c}")).collect();
        let p = BalanceProblem::new(d, x, names, None, 1).unwrap();
        let w = ebct_solve(&p).unwrap();
        prop_assert!(w.weights.iter().all(|v| *v > 0.0));
        prop_assert!((w.weights.sum() - 1.0).abs() < 1e-12);
        prop_assert!(w.diagnostics.max_abs_balance_violation < 1e-8);
    }

    #[test]
    fn wls_is_invariant_to_weight_scale_and_shifts(
        seed in any::<u64>(),
        s in 0.01f64..100.0,
        shift in -5.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let d: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
        let z: Vec<f64> = d.iter().map(|v| 0.5 * v + rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0.2..2.0)).collect();
        let base = DoseData { z: z.clone(), dose: d.clone(), weights: w.clone(), center_ids: (0..n).map(|i| i.to_string()).collect() };
        let fit = |data: &DoseData| wls_fit(data, &WlsOptions::default()).unwrap().linear.unwrap();
        let a = fit(&base);
        let b = fit(&DoseData { weights: w.iter().map(|v| v * s).collect(), ..base.clone() });
        let c = fit(&DoseData { z: z.iter().map(|v| v + shift).collect(), ..base.clone() });
        prop_assert!((a.gamma1 - b.gamma1).abs() < 1e-10 && (a.se_gamma1 - b.se_gamma1).abs() < 1e-10);
        prop_assert!((a.gamma1 - c.gamma1).abs() < 1e-10);
        prop_assert!((c.gamma0 - a.gamma0 - shift).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn likelihood_ignores_row_order_and_restandardizing(seed in any::<u64>(), theta in theta_strategy()) {
        let cat = ItemCatalog::default_six_factor();
        let cfg = SimConfig {
            n_centers: 30,
            rooms_per_center: (1, 3),
            infant_share: 0.5,
            item_drop: 0.1,
            theta: theta.clone(),
            outcomes: OutcomeModel::none(6),
            seed,
        };
        let (frame, _) = simulate_measurement(&cfg, &cat).unwrap();
        let mut rows = frame.rows().to_vec();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let mut rooms: Vec<_> = frame.classrooms().cloned().collect();
        rooms.reverse();
        let shuffled = ObservationFrame::new(rows, rooms).unwrap();
        let a = marginal_loglik(&theta, &assemble_design(&frame, &cat).unwrap()).unwrap();
        let b = marginal_loglik(&theta, &assemble_design(&shuffled, &cat).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));

        let once = frame.standardize_items().unwrap();
        let twice = once.standardize_items().unwrap();
        for (r, s) in once.rows().iter().zip(twice.rows()) {
            prop_assert!((r.value - s.value).abs() < 1e-12);
        }
    }
}
