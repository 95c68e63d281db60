//! Reduced-scale end-to-end properties of the ensemble families that the
//! acceptance orderings do not already pin down: SWE connectivity, the
//! multi-basin control's connectivity, split-point stability, and the effect
//! of pairwise alignment on interpolation barriers.

use basinlab::align::pcd_align;
use basinlab::data::{AugmentConfig, BlobsConfig, Dataset};
use basinlab::ensemble::{
    build_constrained, build_deep, build_deep_distilled, build_swe, evaluate_bundle,
    DistillConfig,
};
use basinlab::landscape::{lambda_grid, q_joint_report, q_pair_curve};
use basinlab::models::{self, ModelSpec};
use basinlab::train::TrainConfig;

const EPOCHS: usize = 16;
const MEMBERS: usize = 3;

fn small_desk() -> (Dataset, Dataset) {
    BlobsConfig { n_train: 1024, n_test: 1024, ..Default::default() }
        .build()
        .unwrap()
}

fn spec() -> ModelSpec {
    ModelSpec::plain_mlp(2, 4, &[32, 32])
}

fn config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(EPOCHS, seed);
    cfg.augment = AugmentConfig::jitter(0.1);
    cfg.eval_every = 0;
    cfg
}

#[test]
fn swe_stays_connected_where_deep_ensembles_break() {
    let (train_set, test_set) = small_desk();
    let spec = spec();
    let mut gap_total = 0.0;
    for seed in [11u64, 12, 13] {
        let base = config(seed);
        let deep = build_deep(&spec, &train_set, &test_set, &base, MEMBERS).unwrap();
        let swe = build_swe(&spec, &train_set, &test_set, &base, MEMBERS, 0.01).unwrap();
        assert_eq!(swe.epochs_consumed, deep.epochs_consumed);
        let q_deep = q_joint_report(&deep, 30, seed, &test_set).unwrap().mean;
        let q_swe = q_joint_report(&swe, 30, seed, &test_set).unwrap().mean;
        gap_total += q_swe - q_deep;
    }
    let gap = gap_total / 3.0;
    assert!(
        gap >= 10.0,
        "SWE should beat deep joint connectivity by >= 10 points, got {gap:.2}"
    );
}

#[test]
fn ensembling_beats_the_mean_member_on_average() {
    let (train_set, test_set) = small_desk();
    let spec = spec();
    let mut gain = 0.0;
    for seed in [21u64, 22, 23] {
        let base = config(seed);
        let deep = build_deep(&spec, &train_set, &test_set, &base, MEMBERS).unwrap();
        let eval = evaluate_bundle(&deep, &test_set).unwrap();
        gain += eval.ensemble_accuracy - eval.mean_member_accuracy;
    }
    assert!(
        gain / 3.0 >= 0.0,
        "deep ensembles should not lose to their mean member, gain {:.3} points",
        gain / 3.0 * 100.0
    );
}

#[test]
fn split_at_half_budget_is_past_the_stability_point() {
    let (train_set, test_set) = small_desk();
    let spec = spec();
    let base = config(31);
    let members =
        basinlab::train::split_train(&spec, &train_set, &test_set, &base, EPOCHS / 2, 2).unwrap();
    let curve = q_pair_curve(
        &members[0].params,
        &members[1].params,
        &[0.0, 0.5, 1.0],
        &test_set,
        (0, 1),
    )
    .unwrap();
    let mid = curve.q_pair[1];
    assert!(
        mid.abs() < 2.0,
        "midpoint barrier after the stability point should stay under 2 points, got {mid:.2}"
    );
}

#[test]
fn pairwise_alignment_shrinks_the_midpoint_barrier() {
    let (train_set, test_set) = small_desk();
    let spec = spec();
    let base = config(41);
    let deep = build_deep(&spec, &train_set, &test_set, &base, 2).unwrap();
    let a = &deep.members[0].params;
    let b = &deep.members[1].params;
    let grid = [0.0, 0.5, 1.0];
    let before = q_pair_curve(a, b, &grid, &test_set, (0, 1)).unwrap().q_pair[1];
    let result = pcd_align(a, b, 50, 41).unwrap();
    let aligned = models::apply_permutation(b, &result.perms[0]).unwrap();
    let after = q_pair_curve(a, &aligned, &grid, &test_set, (0, 1)).unwrap().q_pair[1];
    assert!(
        after.abs() < before.abs(),
        "alignment should shrink the barrier: before {before:.2}, after {after:.2}"
    );
}

#[test]
fn multi_basin_control_stays_disconnected() {
    let (train_set, test_set) = small_desk();
    let spec = spec();
    let base = config(51);
    let deep = build_deep(&spec, &train_set, &test_set, &base, MEMBERS).unwrap();
    let distill = DistillConfig {
        beta: 0.2,
        tau: 3.0,
        split_epoch: EPOCHS / 2,
        distill_epochs: EPOCHS / 2,
    };
    let control =
        build_deep_distilled(&spec, &train_set, &test_set, &base, &deep, &distill).unwrap();
    let q = q_joint_report(&control, 30, 51, &test_set).unwrap().mean;
    assert!(
        q <= -10.0,
        "students from independent initializations stay multi-basin, q_joint {q:.2}"
    );
}

#[test]
fn constrained_budget_never_exceeds_the_deep_envelope() {
    let (train_set, test_set) = small_desk();
    let spec = spec();
    let base = config(61);
    for t in [0, EPOCHS / 4, EPOCHS / 2, EPOCHS] {
        let bundle =
            build_constrained(&spec, &train_set, &test_set, &base, MEMBERS, t).unwrap();
        assert_eq!(bundle.epochs_consumed, t + MEMBERS * (EPOCHS - t));
        assert!(bundle.epochs_consumed <= MEMBERS * EPOCHS);
    }
}
