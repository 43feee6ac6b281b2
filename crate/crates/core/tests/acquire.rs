mod common;

use cartal_core::acquire::{
    ensemble_predict, ensemble_predict_many, entropy_score, mcbn_predict, mcbn_predict_many, mean_prediction,
    variance_score, PredictionStack,
};
use cartal_core::siamnet::{build, train, SiamUNet, SiamUNetConfig, TrainConfig};
use cartal_core::synthdata::{generate, CorpusSpec, TilePair};
use common::{entropy_by_loops, random_stack, to_stack, variance_by_loops};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn scores_match_loop_oracle_on_random_stacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (m, side, probs) = random_stack(&mut rng);
        let expect_v = variance_by_loops(m, side, &probs);
        let expect_h = entropy_by_loops(m, side, &probs);
        let s = to_stack(m, side, probs);
        assert!((variance_score(&s).score - expect_v).abs() < 1e-12);
        assert!((entropy_score(&s).score - expect_h).abs() < 1e-12);
    }
}

fn arb_stack() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=5, 1usize..=3).prop_flat_map(|(m, side)| {
        prop::collection::vec(0.0f64..=1.0, m * side * side)
            .prop_map(move |ps| (m, side, ps.iter().flat_map(|&p| [1.0 - p, p]).collect()))
    })
}

fn permuted(side: usize, probs: &[f64], order: &[usize]) -> Vec<f64> {
    let n = side * side * 2;
    order
        .iter()
        .flat_map(|&k| probs[k * n..(k + 1) * n].iter().copied())
        .collect()
}

proptest! {
    #[test]
    fn scores_ignore_slice_order((m, side, probs) in arb_stack(), rot in 0usize..5) {
        let order: Vec<usize> = (0..m).map(|k| (k + rot) % m).rev().collect();
        let a = to_stack(m, side, probs.clone());
        let b = to_stack(m, side, permuted(side, &probs, &order));
        prop_assert!((variance_score(&a).score - variance_score(&b).score).abs() < 1e-15);
        prop_assert!((entropy_score(&a).score - entropy_score(&b).score).abs() < 1e-15);
    }

    #[test]
    fn scores_stay_in_bounds((m, side, probs) in arb_stack()) {
        let s = to_stack(m, side, probs);
        let v = variance_score(&s).score;
        let h = entropy_score(&s).score;
        prop_assert!((0.0..=0.25).contains(&v));
        prop_assert!(h >= 0.0 && h <= std::f64::consts::LN_2 + 1e-15);
    }

    #[test]
    fn entropy_depends_only_on_the_mean((m, side, probs) in arb_stack()) {
        let s = to_stack(m, side, probs);
        let mean = mean_prediction(&s);
        let replaced: Vec<f64> = (0..m).flat_map(|_| mean.probs.iter().copied()).collect();
        let r = to_stack(m, side, replaced);
        prop_assert!((entropy_score(&s).score - entropy_score(&r).score).abs() < 1e-12);
        prop_assert!(variance_score(&r).score < 1e-12);
    }

    #[test]
    fn identical_slices_have_zero_variance((_, side, probs) in arb_stack(), copies in 1usize..=4) {
        let one = probs[..side * side * 2].to_vec();
        let all: Vec<f64> = (0..copies).flat_map(|_| one.iter().copied()).collect();
        prop_assert_eq!(variance_score(&to_stack(copies, side, all)).score, 0.0);
    }
}

#[test]
fn even_split_of_confident_members_attains_the_maximum() {
    let s = to_stack(4, 1, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    assert_eq!(variance_score(&s).score, 0.25);
}

fn tiles(n_changed: usize, n_unchanged: usize, seed: u64) -> Vec<TilePair> {
    generate(&CorpusSpec {
        changed: n_changed,
        unchanged: n_unchanged,
        ignored: 0,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_net(seed: u64) -> SiamUNet {
    build(&SiamUNetConfig {
        widths: vec![4, 8, 16],
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn ensemble_slices_follow_member_order() {
    let data = tiles(2, 2, 3);
    let a = small_net(1);
    let b = small_net(2);
    let one = ensemble_predict(std::slice::from_ref(&a), &data[0]).unwrap();
    assert_eq!(one.members(), 1);
    assert_eq!(variance_score(&one).score, 0.0);

    let twins = ensemble_predict(&[a.clone(), a.clone()], &data[0]).unwrap();
    assert_eq!(twins.slice(0), twins.slice(1));

    let refs: Vec<&TilePair> = data.iter().collect();
    let ab = ensemble_predict_many(&[a.clone(), b.clone()], &refs).unwrap();
    let ba = ensemble_predict_many(&[b, a], &refs).unwrap();
    for (x, y) in ab.iter().zip(&ba) {
        assert_eq!(x.slice(0), y.slice(1));
        assert_eq!(x.slice(1), y.slice(0));
        assert_eq!(variance_score(x).score, variance_score(y).score);
        assert_eq!(entropy_score(x).score, entropy_score(y).score);
    }
}

#[test]
fn ensembles_need_one_architecture() {
    let data = tiles(1, 1, 3);
    let other = build(&SiamUNetConfig {
        widths: vec![4, 8, 8],
        ..Default::default()
    })
    .unwrap();
    assert!(ensemble_predict(&[small_net(1), other], &data[0]).is_err());
    assert!(ensemble_predict(&[], &data[0]).is_err());
}

#[test]
fn mcbn_is_seeded_and_needs_enough_training_tiles() {
    let data = tiles(4, 6, 5);
    let (train_set, queries) = data.split_at(8);
    let net = small_net(3);
    let a = mcbn_predict(&net, &queries[0], train_set, 3, 4, 99).unwrap();
    let b = mcbn_predict(&net, &queries[0], train_set, 3, 4, 99).unwrap();
    assert_eq!(a, b);
    let c = mcbn_predict(&net, &queries[0], train_set, 3, 4, 100).unwrap();
    assert_ne!(a, c);
    assert!(mcbn_predict(&net, &queries[0], train_set, 3, 9, 1).is_err());
    assert!(mcbn_predict(&net, &queries[0], train_set, 3, 1, 1).is_err());
    // a query inside the training set is excluded from its own statistics
    assert!(mcbn_predict(&net, &train_set[0], train_set, 2, 8, 1).is_err());
    assert!(mcbn_predict(&net, &train_set[0], train_set, 2, 7, 1).is_ok());
}

#[test]
fn deterministic_statistics_collapse_the_stack() {
    let data = tiles(2, 2, 8);
    let net = small_net(4);
    let refs: Vec<&TilePair> = data.iter().collect();
    let maps: Vec<_> = (0..3)
        .map(|_| net.predict_tiles(&refs[..1], None).unwrap().remove(0))
        .collect();
    let s = PredictionStack::from_maps(data[0].id, &maps).unwrap();
    assert_eq!(variance_score(&s).score, 0.0);
}

#[test]
fn mcbn_on_a_trained_model_disagrees_somewhere() {
    let data = tiles(6, 10, 12);
    let (train_set, queries) = data.split_at(12);
    let mut net = small_net(6);
    train(
        &mut net,
        train_set,
        &TrainConfig {
            epochs: 4,
            batch_size: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let refs: Vec<&TilePair> = queries.iter().collect();
    let stacks = mcbn_predict_many(&net, &refs, train_set, 4, 4, 7).unwrap();
    assert!(stacks.iter().any(|s| variance_score(s).score > 0.0));
}
