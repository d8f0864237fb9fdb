use proptest::prelude::*;
use purify_core::netlab::{accuracy, train, Arch};
use purify_core::numcore::rng;
use purify_core::{ArchKind, Classifier, LabeledDataset, Tensor, TrainConfig};
use rand::Rng;

/// Two-class 4x4 images: class 0 is bright on the left half, class 1 on the right.
fn separable_toy(n: usize, seed: u64) -> LabeledDataset {
    let mut r = rng::seeded(seed);
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for i in 0..n {
        let y = i % 2;
        for _row in 0..4 {
            for col in 0..4 {
                let bright = (col < 2) == (y == 0);
                let v: f64 = if bright { r.random_range(0.55..1.0) } else { r.random_range(0.0..0.45) };
                pixels.push(v);
            }
        }
        labels.push(y);
    }
    LabeledDataset::new([4, 4, 1], pixels, labels, "toy").unwrap()
}

/// Perceptron on the raw pixels; a zero-error pass certifies linear separability.
fn perceptron_separates(data: &LabeledDataset) -> bool {
    let d = data.image_len();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..1000 {
        let mut mistakes = 0;
        for i in 0..data.len() {
            let s = if data.label(i) == 1 { 1.0 } else { -1.0 };
            let x = data.image(i);
            let margin = s * (x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b);
            if margin <= 0.0 {
                mistakes += 1;
                w.iter_mut().zip(x).for_each(|(wk, xk)| *wk += s * xk);
                b += s;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

fn random_three_class(n: usize, seed: u64) -> LabeledDataset {
    let mut r = rng::seeded(seed);
    let pixels = (0..n * 100).map(|_| r.random_range(0.0..=1.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..3)).collect();
    LabeledDataset::new([10, 10, 1], pixels, labels, "random").unwrap()
}

fn softmax_sums(logits: &Tensor, k: usize) -> Vec<f64> {
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter().map(|v| (v - m).exp() / z).sum()
        })
        .collect()
}

#[test]
fn mlp_parameter_count_is_closed_form() {
    let arch = Arch::new(ArchKind::Mlp, [28, 28, 1], 10);
    assert_eq!(arch.param_count().unwrap(), 28 * 28 * 64 + 64 + 64 * 10 + 10);
    assert_eq!(arch.param_count().unwrap(), 50_890);
    let m = Classifier::build(ArchKind::Mlp, [28, 28, 1], 10, 1).unwrap();
    assert_eq!(m.params().total_dims(), 50_890);
}

#[test]
fn small_cnn_parameter_count_is_closed_form() {
    // 28 -> conv 26 -> pool 13 -> conv 11 -> pool 5, so 5*5*16 features reach the dense layer.
    let expected = (9 * 8 + 8) + (9 * 8 * 16 + 16) + (5 * 5 * 16 * 64 + 64) + (64 * 10 + 10);
    let m = Classifier::build(ArchKind::SmallCnn, [28, 28, 1], 10, 1).unwrap();
    assert_eq!(m.params().total_dims(), expected);
}

#[test]
fn zero_image_gives_k_finite_logits() {
    for kind in [ArchKind::SmallCnn, ArchKind::Mlp] {
        let m = Classifier::build(kind, [28, 28, 1], 10, 1).unwrap();
        let logits = m.logits(&Tensor::zeros(&[1, 28, 28, 1])).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn unsupported_shapes_and_label_spaces_are_rejected() {
    assert!(Classifier::build(ArchKind::SmallCnn, [5, 5, 1], 10, 0).is_err());
    assert!(Classifier::build(ArchKind::Mlp, [28, 28, 1], 1, 0).is_err());
    assert!(Classifier::build(ArchKind::Mlp, [0, 28, 1], 10, 0).is_err());
}

#[test]
fn same_seed_builds_are_bitwise_identical() {
    for kind in [ArchKind::SmallCnn, ArchKind::Mlp] {
        let a = Classifier::build(kind, [28, 28, 1], 10, 7).unwrap();
        let b = Classifier::build(kind, [28, 28, 1], 10, 7).unwrap();
        let c = Classifier::build(kind, [28, 28, 1], 10, 8).unwrap();
        let bits = |m: &Classifier| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }
}

#[test]
fn separable_toy_set_is_learned() {
    let data = separable_toy(200, 3);
    assert!(perceptron_separates(&data));
    let init = Classifier::build(ArchKind::Mlp, [4, 4, 1], 2, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        lr: 0.05,
        momentum: 0.9,
        seed: 3,
    };
    let (model, history) = train(&init, &data, &cfg).unwrap();
    assert_eq!(history.len(), 20);
    assert!(history.iter().enumerate().all(|(i, h)| h.epoch == i));
    assert!(accuracy(&model, &data).unwrap() >= 0.99);
}

#[test]
fn zero_learning_rate_leaves_parameters_and_history_flat() {
    let data = separable_toy(40, 1);
    let init = Classifier::build(ArchKind::Mlp, [4, 4, 1], 2, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let (model, history) = train(&init, &data, &cfg).unwrap();
    assert_eq!(model, init);
    // Epoch losses are sums over differently shuffled batches, so only rounding may differ.
    for w in history.windows(2) {
        assert_eq!(w[0].accuracy, w[1].accuracy);
        assert!((w[0].loss - w[1].loss).abs() <= 1e-12 * w[0].loss.abs());
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let mut r = rng::seeded(2);
    let pixels = (0..64 * 144).map(|_| r.random_range(0.0..=1.0)).collect();
    let labels = (0..64).map(|i| i % 3).collect();
    let data = LabeledDataset::new([12, 12, 1], pixels, labels, "random").unwrap();
    for kind in [ArchKind::SmallCnn, ArchKind::Mlp] {
        let init = Classifier::build(kind, [12, 12, 1], 3, 2).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 10, ..TrainConfig::default() };
        let (a, ha) = train(&init, &data, &cfg).unwrap();
        let (b, hb) = train(&init, &data, &cfg).unwrap();
        assert_ne!(a, init);
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }
}

#[test]
fn training_rejects_bad_inputs() {
    let data = separable_toy(10, 0);
    let init = Classifier::build(ArchKind::Mlp, [4, 4, 1], 2, 0).unwrap();
    let empty = LabeledDataset::empty([4, 4, 1], "none");
    assert!(train(&init, &empty, &TrainConfig::default()).is_err());
    assert!(train(&init, &data, &TrainConfig { epochs: 0, ..TrainConfig::default() }).is_err());
    assert!(train(&init, &data, &TrainConfig { batch_size: 0, ..TrainConfig::default() }).is_err());
    let mislabeled = LabeledDataset::new([4, 4, 1], vec![0.0; 16], vec![2], "bad").unwrap();
    assert!(train(&init, &mislabeled, &TrainConfig::default()).is_err());
    assert!(accuracy(&init, &empty).is_err());
}

/// An MLP whose only nonzero parameter is the class-0 output bias.
fn constant_class_zero() -> Classifier {
    let mut m = Classifier::build(ArchKind::Mlp, [2, 2, 1], 3, 0).unwrap();
    for (name, t) in m.params_mut().segments_mut() {
        let zero_all = name != "fc2.b";
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v = if !zero_all && k == 0 { 1.0 } else { 0.0 };
        }
    }
    m
}

#[test]
fn constant_predictor_accuracy() {
    let m = constant_class_zero();
    let zeros = LabeledDataset::new([2, 2, 1], vec![0.3; 20], vec![0; 5], "zeros").unwrap();
    let ones = LabeledDataset::new([2, 2, 1], vec![0.3; 20], vec![1; 5], "ones").unwrap();
    assert_eq!(accuracy(&m, &zeros).unwrap(), 1.0);
    assert_eq!(accuracy(&m, &ones).unwrap(), 0.0);
}

#[test]
fn ties_go_to_the_smaller_label() {
    let mut m = constant_class_zero();
    for (_, t) in m.params_mut().segments_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let ones = LabeledDataset::new([2, 2, 1], vec![0.5; 8], vec![0, 1], "tie").unwrap();
    assert_eq!(accuracy(&m, &ones).unwrap(), 0.5);
}

#[test]
fn untrained_net_on_random_three_class_data_is_near_chance() {
    for seed in 0..5 {
        let data = random_three_class(300, 100 + seed);
        for kind in [ArchKind::SmallCnn, ArchKind::Mlp] {
            let m = Classifier::from_arch(Arch::new(kind, [10, 10, 1], 3).with_widths([4, 4], 16), seed).unwrap();
            let acc = accuracy(&m, &data).unwrap();
            assert!((0.20..=0.47).contains(&acc), "{kind:?} seed {seed}: {acc}");
        }
    }
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bers");
    let m = Classifier::build(ArchKind::SmallCnn, [28, 28, 1], 10, 5).unwrap();
    m.save(&path).unwrap();
    let back = Classifier::load(&path).unwrap();
    assert_eq!(back.arch(), m.arch());
    let bits = |m: &Classifier| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&m));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_of_logits_is_normalized(seed in any::<u64>(), pixels in proptest::collection::vec(0.0f64..=1.0, 3 * 100)) {
        let batch = Tensor::new(vec![3, 10, 10, 1], pixels).unwrap();
        for kind in [ArchKind::SmallCnn, ArchKind::Mlp] {
            let m = Classifier::build(kind, [10, 10, 1], 4, seed).unwrap();
            let logits = m.logits(&batch).unwrap();
            for s in softmax_sums(&logits, 4) {
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn accuracy_is_a_rate(seed in 0u64..1000, n in 1usize..40) {
        let data = random_three_class(n, seed);
        let m = Classifier::build(ArchKind::Mlp, [10, 10, 1], 3, seed).unwrap();
        let acc = accuracy(&m, &data).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!((acc * n as f64).round() / n as f64, acc);
    }
}
