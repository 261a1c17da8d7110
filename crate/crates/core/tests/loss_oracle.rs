mod common;

use common::{naive_align_loss, random_matrix};
use mirror_align::{align_loss, Matrix, SeededSampler};
use proptest::prelude::*;

#[test]
fn production_loss_matches_naive_evaluation_on_200_batches() {
    let root = SeededSampler::new(2024);
    let mut worst: f64 = 0.0;
    for case in 0..200u64 {
        let mut rng = root.fork_indexed("batch", case);
        let b = 2 + rng.below(7);
        let d = 1 + rng.below(8);
        let tau = 0.1 + 0.9 * rng.uniform();
        let zu = random_matrix(b, d, &mut rng);
        let ze = random_matrix(b, d, &mut rng);
        let got = align_loss(&zu, &ze, tau).unwrap();
        let want = naive_align_loss(&zu, &ze, tau);
        worst = worst.max((got - want).abs());
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn single_pair_batches_are_exactly_zero() {
    let mut rng = SeededSampler::new(1);
    for _ in 0..20 {
        let d = 1 + rng.below(8);
        let zu = random_matrix(1, d, &mut rng);
        let ze = random_matrix(1, d, &mut rng);
        assert_eq!(align_loss(&zu, &ze, 0.1).unwrap(), 0.0);
    }
}

#[test]
fn stabilized_loss_stays_finite_where_naive_overflows() {
    let zu = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let tau = 1e-3;
    assert!(!naive_align_loss(&zu, &zu, tau).is_finite());
    assert!(align_loss(&zu, &zu, tau).unwrap().abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn naive_and_production_agree(seed in any::<u64>(), b in 1usize..=8, d in 1usize..=8, tau in 0.1f64..2.0) {
        let mut rng = SeededSampler::new(seed);
        let zu = random_matrix(b, d, &mut rng);
        let ze = random_matrix(b, d, &mut rng);
        let got = align_loss(&zu, &ze, tau).unwrap();
        prop_assert!((got - naive_align_loss(&zu, &ze, tau)).abs() < 1e-9);
    }
}
