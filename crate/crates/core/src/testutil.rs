//! Random small instances for unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{
    AgeGroup, CenterBlock, ClassroomBlock, ConstraintMeta, DesignBundle, ItemCatalog, ParameterSet,
};

/// Default catalog, `centers` centers with 1..=`max_rooms` classrooms of
/// random age group, each permitted item dropped with probability `drop`
/// (QCIT anchor always kept). Values are standard normal.
pub fn random_bundle(seed: u64, centers: usize, max_rooms: usize, drop: f64) -> (ItemCatalog, DesignBundle) {
    let cat = ItemCatalog::default_six_factor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in 0..centers {
        let j = rng.gen_range(1..=max_rooms);
        let mut classrooms = Vec::new();
        for jj in 0..j {
            let group = if rng.gen_bool(0.5) { AgeGroup::Infant } else { AgeGroup::Toddler };
            let items: Vec<usize> = cat
                .permitted_items(group)
                .into_iter()
                .filter(|&i| i == 0 || !rng.gen_bool(drop))
                .collect();
            let values = items.iter().map(|_| rng.sample(StandardNormal)).collect();
            classrooms.push(ClassroomBlock {
                class_id: format!("c{k}_{jj}"),
                group,
                items,
                values,
            });
        }
        out.push(CenterBlock {
            center_id: format!("k{k}"),
            classrooms,
        });
    }
    let bundle = DesignBundle {
        n_items: cat.n_items(),
        n_factors: cat.n_factors(),
        centers: out,
    };
    (cat, bundle)
}

pub fn random_theta(cat: &ItemCatalog, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ni = cat.n_items();
    let nf = cat.n_factors();
    let beta = DVector::from_fn(ni, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let loadings: Vec<f64> = (0..ni).map(|_| rng.gen_range(0.5..1.5)).collect();
    let a = DMatrix::from_fn(nf, nf, |_, _| 0.4 * rng.sample::<f64, _>(StandardNormal));
    let mut psi = &a * a.transpose() + DMatrix::identity(nf, nf) * 0.5;
    crate::linalg::symmetrize(&mut psi);
    ParameterSet::from_loadings(
        ConstraintMeta::from_catalog(cat),
        beta,
        &loadings,
        psi,
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.2..0.8),
    )
    .unwrap()
}
