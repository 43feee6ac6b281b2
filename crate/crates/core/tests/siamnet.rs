use std::collections::BTreeMap;

use cartal_core::siamnet::{
    self, build, checkpoint, parameter_count, train, BnMode, SiamUNet, SiamUNetConfig, TrainConfig,
};
use cartal_core::synthdata::{generate, CorpusSpec, TilePair};
use cartal_core::Error;
use gradkit::{finite_difference_check, GradError, Tape, Tensor, Var};

fn tiny_config(seed: u64) -> SiamUNetConfig {
    SiamUNetConfig {
        tile_side: 8,
        widths: vec![2, 3, 4],
        seed,
        ..Default::default()
    }
}

fn corpus(changed: usize, unchanged: usize, side: usize) -> Vec<TilePair> {
    generate(&CorpusSpec {
        tile_side: side,
        changed,
        unchanged,
        ignored: 0,
        rect_side: [2, 3],
        disc_radius: [1, 2],
        seed: 77,
        ..Default::default()
    })
    .unwrap()
}

/// Parameter count written out layer by layer for widths (a, b, c) and two stages.
fn count_by_hand(inp: usize, a: usize, b: usize, c: usize) -> usize {
    let conv_bn = |i: usize, o: usize| o * i * 9 + 2 * o;
    conv_bn(inp, a) + conv_bn(a, b) + conv_bn(b, c) + conv_bn(2 * c + 2 * b, b) + conv_bn(b + 2 * a, a) + 2 * a + 2
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    let cfg = SiamUNetConfig::default();
    let m = build(&cfg).unwrap();
    assert_eq!(parameter_count(&cfg), count_by_hand(3, 8, 16, 32));
    assert_eq!(m.params().value_count(), parameter_count(&cfg));
    assert_eq!(parameter_count(&cfg), 22_282);
    let small = SiamUNetConfig {
        widths: vec![4, 8, 16],
        ..Default::default()
    };
    assert_eq!(parameter_count(&small), count_by_hand(3, 4, 8, 16));
}

#[test]
fn builds_depend_only_on_seed() {
    let a = build(&tiny_config(1)).unwrap();
    let b = build(&tiny_config(1)).unwrap();
    let c = build(&tiny_config(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
}

#[test]
fn forward_yields_distributions_of_the_input_size() {
    let m = build(&SiamUNetConfig::default()).unwrap();
    let tiles = corpus(2, 2, 16);
    let t0 = Tensor::stack_batch(&[&tiles[0].t0.to_tensor(), &tiles[1].t0.to_tensor()]).unwrap();
    let t1 = Tensor::stack_batch(&[&tiles[0].t1.to_tensor(), &tiles[1].t1.to_tensor()]).unwrap();
    for mode in [BnMode::Train, BnMode::EvalDeterministic] {
        let maps = m.forward(&t0, &t1, mode, None).unwrap();
        assert_eq!(maps.len(), 2);
        for map in &maps {
            assert_eq!(map.side(), 16);
            for p in map.probs().chunks(2) {
                assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
                assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
            }
        }
    }
    // t0 against itself is still a valid distribution
    let same = m.forward(&t0, &t0, BnMode::EvalDeterministic, None).unwrap();
    assert!(same.iter().all(|c| c.probs().iter().all(|v| v.is_finite())));
    let again = m.forward(&t0, &t0, BnMode::EvalDeterministic, None).unwrap();
    assert_eq!(same, again);
}

#[test]
fn mismatched_acquisitions_are_rejected() {
    let m = build(&SiamUNetConfig::default()).unwrap();
    let a = Tensor::zeros(&[1, 3, 16, 16]);
    let b = Tensor::zeros(&[1, 3, 8, 8]);
    assert!(matches!(
        m.forward(&a, &b, BnMode::EvalDeterministic, None),
        Err(Error::Shape(_))
    ));
    let wrong_side = Tensor::zeros(&[1, 3, 8, 8]);
    assert!(m
        .forward(&wrong_side, &wrong_side, BnMode::EvalDeterministic, None)
        .is_err());
}

#[test]
fn stochastic_mode_requires_a_usable_reference() {
    let m = build(&SiamUNetConfig::default()).unwrap();
    let x = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(m.forward(&x, &x, BnMode::EvalStochastic, None).is_err());
    assert!(m.forward(&x, &x, BnMode::EvalStochastic, Some((&x, &x))).is_err());
}

#[test]
fn encoder_weights_are_shared_between_branches() {
    // perturbing one encoder weight must move the features of both branches:
    // with t0 == t1 the two branch outputs stay identical after perturbation
    let mut m = build(&SiamUNetConfig::default()).unwrap();
    let tiles = corpus(1, 1, 16);
    let x = tiles[0].t0.to_tensor();
    let xx = Tensor::stack_batch(&[&x, &x]).unwrap();
    let branch_features = |m: &SiamUNet| {
        let mut tape = Tape::new();
        let leaves = m.param_leaves(&mut tape);
        let input = tape.leaf(xx.clone());
        let w = leaves["enc0.conv.w"];
        let y = tape.conv2d(input, w, None, 1, 1).unwrap();
        let v = tape.value(y).clone();
        let half = v.len() / 2;
        (v.data()[..half].to_vec(), v.data()[half..].to_vec())
    };
    let (a0, a1) = branch_features(&m);
    assert_eq!(a0, a1);
    m.params_mut().get_mut("enc0.conv.w").unwrap().data_mut()[4] += 0.5;
    let (b0, b1) = branch_features(&m);
    assert_eq!(b0, b1);
    assert_ne!(a0, b0);

    // and through the whole network, both acquisitions react to the change
    let m0 = build(&SiamUNetConfig::default()).unwrap();
    let t1 = tiles[1].t1.to_tensor();
    let before = m0.forward(&x, &t1, BnMode::EvalDeterministic, None).unwrap();
    let after = m.forward(&x, &t1, BnMode::EvalDeterministic, None).unwrap();
    assert_ne!(before, after);
}

#[test]
fn training_is_deterministic_and_traces_every_epoch() {
    let tiles = corpus(3, 3, 8);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 9,
        ..Default::default()
    };
    let mut a = build(&tiny_config(3)).unwrap();
    let mut b = build(&tiny_config(3)).unwrap();
    let ta = train(&mut a, &tiles, &cfg).unwrap();
    let tb = train(&mut b, &tiles, &cfg).unwrap();
    assert_eq!(ta.len(), 3);
    assert_eq!(ta, tb);
    assert_eq!(a, b);
    assert_ne!(a, build(&tiny_config(3)).unwrap());
}

#[test]
fn training_needs_masks() {
    let mut tiles = corpus(1, 2, 8);
    tiles[1].mask = None;
    let id = tiles[1].id;
    let mut m = build(&tiny_config(0)).unwrap();
    assert!(matches!(train(&mut m, &tiles, &TrainConfig::default()), Err(Error::MissingMask(i)) if i == id));
    assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
    let bad = TrainConfig {
        batch_size: 1,
        ..Default::default()
    };
    assert!(matches!(train(&mut m, &tiles[..1], &bad), Err(Error::TrainConfig(_))));
}

#[test]
fn single_sample_overfits() {
    let tiles = corpus(1, 0, 16);
    let mut m = build(&SiamUNetConfig {
        widths: vec![4, 8, 16],
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: 2,
        learning_rate: 1e-2,
        augment: false,
        ..Default::default()
    };
    let trace = train(&mut m, &tiles, &cfg).unwrap();
    let last = *trace.last().unwrap();
    assert!(last < 0.1, "final loss {last}, first {}", trace[0]);
}

#[test]
fn checkpoint_file_round_trip() {
    let tiles = corpus(2, 2, 8);
    let mut m = build(&tiny_config(8)).unwrap();
    train(
        &mut m,
        &tiles,
        &TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&m, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, m);
    let refs: Vec<&TilePair> = tiles.iter().collect();
    assert_eq!(
        back.predict_tiles(&refs, None).unwrap(),
        m.predict_tiles(&refs, None).unwrap()
    );
}

/// Full Siamese loss as a function of one named parameter tensor.
fn loss_wrt(m: &SiamUNet, name: &str, batch: &[&TilePair], tape: &mut Tape, leaf: Var) -> gradkit::Result<Var> {
    let wrap = |e: Error| GradError::Invalid(e.to_string());
    let mut leaves: BTreeMap<String, Var> = BTreeMap::new();
    for (n, t) in m.params().iter() {
        let v = if n == name { leaf } else { tape.constant(t.clone()) };
        leaves.insert(n.clone(), v);
    }
    let stacked = siamnet::stack_pairs(batch, 3).map_err(wrap)?;
    let x = tape.constant(stacked);
    let (logits, _) = m.logits_on_tape(tape, &leaves, x, BnMode::Train, None).map_err(wrap)?;
    let labels = batch
        .iter()
        .flat_map(|t| t.mask.as_ref().unwrap().data().iter().map(|&v| v as usize))
        .collect();
    tape.weighted_cross_entropy(logits, labels, vec![1.0, 3.0])
}

#[test]
fn full_siamese_loss_passes_finite_difference_checks() {
    let tiles = corpus(1, 1, 8);
    let batch: Vec<&TilePair> = tiles.iter().collect();
    let m = build(&tiny_config(21)).unwrap();
    let mut worst: f64 = 0.0;
    for (name, value) in m.params().iter() {
        let err = finite_difference_check(value, 1e-5, |tape, leaf| loss_wrt(&m, name, &batch, tape, leaf)).unwrap();
        assert!(err < 1e-4, "{name}: relative error {err}");
        worst = worst.max(err);
    }
    println!("worst relative error over all parameters: {worst:.3e}");
}
