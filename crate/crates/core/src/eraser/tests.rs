use super::*;
use crate::netlab::{Arch, ArchKind};
use crate::recovery::PoolEntry;
use rand::Rng as _;

const SHAPE: [usize; 3] = [3, 3, 1];

/// 9 -> 4 -> 2 MLP: 36 + 4 + 8 + 2 = 50 parameters.
fn mlp(seed: u64) -> Classifier {
    let arch = Arch::new(ArchKind::Mlp, SHAPE, 2).with_widths([1, 1], 4);
    let m = Classifier::from_arch(arch, seed).unwrap();
    assert_eq!(m.params().total_dims(), 50);
    m
}

fn data(n: usize, seed: u64) -> LabeledDataset {
    let mut r = rng::seeded(seed);
    let pixels = (0..n * 9).map(|_| r.random_range(0.0..1.0)).collect();
    let labels = (0..n).map(|i| i % 2).collect();
    LabeledDataset::new(SHAPE, pixels, labels, "synthetic").unwrap()
}

fn pool_for(label: usize, value: Scalar) -> TriggerPool {
    TriggerPool::from_entries(
        0.9,
        vec![PoolEntry {
            label,
            threshold: 0.5,
            asr: 1.0,
            perturbation: Tensor::full(&SHAPE, value),
        }],
    )
    .unwrap()
}

fn ones_like(p: &ParamVector) -> PenaltyWeights {
    let flat = vec![1.0; p.total_dims()];
    PenaltyWeights::new(p.unflatten(&flat).unwrap()).unwrap()
}

#[test]
fn weights_match_brute_force_loop() {
    let model = mlp(3);
    let clean = data(8, 1);
    let w = penalty_weights(&model, &clean).unwrap().flatten();
    let mut expect = vec![0.0; 50];
    for i in 0..8 {
        let (x, y) = clean.batch(&[i]);
        let (_, g) = model.loss_and_grad(&x, &y).unwrap();
        for (e, v) in expect.iter_mut().zip(g.flatten()) {
            *e += v.abs() / 8.0;
        }
    }
    for (a, b) in w.iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn single_sample_weights_are_absolute_gradient() {
    let model = mlp(4);
    let clean = data(1, 2);
    let w = penalty_weights(&model, &clean).unwrap().flatten();
    let (x, y) = clean.batch(&[0]);
    let g = model.loss_and_grad(&x, &y).unwrap().1.flatten();
    for (a, b) in w.iter().zip(&g) {
        assert_eq!(*a, b.abs());
    }
    assert!(penalty_weights(&model, &LabeledDataset::empty(SHAPE, "none")).is_err());
}

#[test]
fn unused_dimension_gets_zero_weight() {
    // a dead hidden unit: its incoming weights and bias are negative, inputs are non-negative
    let mut model = mlp(5);
    for (name, t) in model.params_mut().segments_mut() {
        match name {
            "fc1.w" => {
                for row in t.data_mut().chunks_exact_mut(4) {
                    row[0] = -1.0;
                }
            }
            "fc1.b" => t.data_mut()[0] = -1.0,
            _ => {}
        }
    }
    let w = penalty_weights(&model, &data(6, 3)).unwrap();
    let p = w.params();
    assert!(p.get("fc1.w").unwrap().data().chunks_exact(4).all(|r| r[0] == 0.0));
    assert_eq!(p.get("fc1.b").unwrap().data()[0], 0.0);
    assert_eq!(&p.get("fc2.w").unwrap().data()[0..2], &[0.0, 0.0]);
}

fn terms(
    model: &Classifier,
    anchor: &ParamVector,
    w: &PenaltyWeights,
    alpha: Scalar,
    beta: Scalar,
) -> (Scalar, Scalar, Scalar, Scalar) {
    let clean = data(6, 7);
    let (cx, cy) = clean.batch(&(0..6).collect::<Vec<_>>());
    let (bx, _) = data(4, 8).batch(&[0, 1, 2, 3]);
    let by = vec![1; 4];
    let tape = Tape::new();
    let bound = tape.bind(model.params(), true).unwrap();
    let t = unlearn_loss(
        &tape,
        model,
        &bound,
        Batch { images: &cx, labels: &cy },
        Batch { images: &bx, labels: &by },
        anchor,
        w,
        alpha,
        beta,
    )
    .unwrap();
    (
        t.total.item().unwrap(),
        t.clean_ce.item().unwrap(),
        t.backdoor_ce.item().unwrap(),
        t.penalty.item().unwrap(),
    )
}

#[test]
fn loss_terms_combine_as_expected() {
    let model = mlp(6);
    let anchor = model.params().clone();
    let w = penalty_weights(&model, &data(5, 1)).unwrap();
    let (total, _, _, penalty) = terms(&model, &anchor, &w, 1.0, 1.0);
    assert_eq!(penalty, 0.0);
    let (total_b0, clean, backdoor, _) = terms(&model, &anchor, &w, 1.0, 0.0);
    assert!((total_b0 - (clean - backdoor)).abs() < 1e-12);
    assert!((total - total_b0).abs() < 1e-12);

    // displace two coordinates by 0.5 and -0.25 under unit weights
    let mut moved = model.clone();
    let mut flat = anchor.flatten();
    flat[3] += 0.5;
    flat[41] -= 0.25;
    moved.set_params(anchor.unflatten(&flat).unwrap()).unwrap();
    let (total, _, _, penalty) = terms(&moved, &anchor, &ones_like(&anchor), 0.0, 1.0);
    assert!((penalty - 0.75).abs() < 1e-12);
    assert!((total - 0.75).abs() < 1e-12);
}

#[test]
fn layout_mismatch_is_rejected() {
    let model = mlp(1);
    let other = Classifier::from_arch(Arch::new(ArchKind::Mlp, SHAPE, 2).with_widths([1, 1], 5), 0).unwrap();
    let w = ones_like(model.params());
    let tape = Tape::new();
    let bound = tape.bind(model.params(), true).unwrap();
    let (x, y) = data(2, 0).batch(&[0, 1]);
    let b = Batch { images: &x, labels: &y };
    assert!(unlearn_loss(&tape, &model, &bound, b, b, other.params(), &w, 1.0, 1.0).is_err());
}

#[test]
fn naive_loss_of_uniform_logits() {
    let arch = Arch::new(ArchKind::Mlp, SHAPE, 10).with_widths([1, 1], 4);
    let mut model = Classifier::from_arch(arch, 0).unwrap();
    for (_, t) in model.params_mut().segments_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (x, _) = data(3, 0).batch(&[0, 1, 2]);
    let tape = Tape::new();
    let bound = tape.bind(model.params(), true).unwrap();
    let l = naive_unlearn_loss(&tape, &model, &bound, Batch { images: &x, labels: &[4, 4, 4] })
        .unwrap()
        .item()
        .unwrap();
    assert!((l + (10.0 as Scalar).ln()).abs() < 1e-12);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let anchor = mlp(10).params().clone();
    let w = penalty_weights(&mlp(10), &data(5, 4)).unwrap();
    let mut r = rng::seeded(77);
    let h = 1e-5;
    for trial in 0..10 {
        // random theta away from the anchor, so |theta - theta0| is differentiable
        let flat: Vec<Scalar> = anchor
            .flatten()
            .iter()
            .map(|v| v + if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.05..0.5))
            .collect();
        let mut model = mlp(10);
        model.set_params(anchor.unflatten(&flat).unwrap()).unwrap();
        let (cx, cy) = data(6, 7).batch(&(0..6).collect::<Vec<_>>());
        let (bx, _) = data(4, 8 + trial).batch(&[0, 1, 2, 3]);
        let by = vec![1; 4];
        let eval = |m: &Classifier| -> (Scalar, Vec<Scalar>) {
            let tape = Tape::new();
            let bound = tape.bind(m.params(), true).unwrap();
            let t = unlearn_loss(
                &tape,
                m,
                &bound,
                Batch { images: &cx, labels: &cy },
                Batch { images: &bx, labels: &by },
                &anchor,
                &w,
                0.7,
                1.3,
            )
            .unwrap();
            let v = t.total.item().unwrap();
            (v, tape.backward(t.total).unwrap().for_params(&bound).flatten())
        };
        let (_, grad) = eval(&model);
        for k in (0..50).step_by(7) {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let mut mp = model.clone();
            mp.set_params(anchor.unflatten(&plus).unwrap()).unwrap();
            let mut mm = model.clone();
            mm.set_params(anchor.unflatten(&minus).unwrap()).unwrap();
            let fd = (eval(&mp).0 - eval(&mm).0) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-5 * (1.0 + fd.abs()), "trial {trial} k {k}: {fd} vs {}", grad[k]);
        }
    }
}

#[test]
fn zero_alpha_keeps_the_model_at_its_anchor() {
    let model = mlp(11);
    let cfg = UnlearnConfig {
        alpha: 0.0,
        max_iters: 10,
        clean_batch: 8,
        backdoor_batch: 8,
        early_stop_asr: 0.0,
        ..UnlearnConfig::default()
    };
    let (out, trace) = unlearn(&model, &pool_for(1, 0.5), &data(10, 5), &cfg).unwrap();
    assert!(out.params().l1_distance(model.params()).unwrap() <= 1e-6);
    assert!(!trace.diverged);
}

#[test]
fn empty_pool_is_an_error() {
    let model = mlp(0);
    let err = unlearn(&model, &TriggerPool::new(0.9), &data(4, 0), &UnlearnConfig::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyPool));
}

#[test]
fn trace_is_well_formed() {
    let model = mlp(12);
    let cfg = UnlearnConfig {
        max_iters: 6,
        clean_batch: 8,
        backdoor_batch: 8,
        early_stop_asr: 0.0,
        ..UnlearnConfig::default()
    };
    let holdout = data(12, 6);
    let (_, trace) = unlearn(&model, &pool_for(0, 0.3), &holdout, &cfg).unwrap();
    let n = trace.records.len();
    assert!((1..=cfg.max_iters + 1).contains(&n));
    for (j, r) in trace.records.iter().enumerate() {
        assert_eq!(r.iteration, j);
        assert!((0.0..=1.0).contains(&r.asr) && (0.0..=1.0).contains(&r.acc));
        assert_eq!(r.histogram.len(), 2);
        assert_eq!(r.histogram.iter().sum::<usize>(), holdout.indices_without_label(0).len());
        assert_eq!(r.loss.is_some(), j + 1 < n || !trace.early_stopped && j < cfg.max_iters);
    }
    let mut csv = Vec::new();
    trace.write_csv(&mut csv, 2).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,asr,acc,loss,h0,h1");
    assert_eq!(lines.len(), n + 1);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));
}

#[test]
fn unlearning_is_deterministic() {
    let model = mlp(13);
    let cfg = UnlearnConfig {
        max_iters: 4,
        clean_batch: 8,
        backdoor_batch: 8,
        ..UnlearnConfig::default()
    };
    let holdout = data(10, 9);
    let pool = pool_for(1, 0.4);
    let (a, ta) = unlearn(&model, &pool, &holdout, &cfg).unwrap();
    let (b, tb) = unlearn(&model, &pool, &holdout, &cfg).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ta, tb);
}

#[test]
fn finetune_with_no_budget_is_identity() {
    let model = mlp(14);
    let clean = data(8, 1);
    for cfg in [
        FinetuneConfig { epochs: 0, ..FinetuneConfig::default() },
        FinetuneConfig { lr: 0.0, ..FinetuneConfig::default() },
    ] {
        assert_eq!(finetune_baseline(&model, &clean, &cfg).unwrap().params(), model.params());
    }
    let moved = finetune_baseline(&model, &clean, &FinetuneConfig { batch_size: 4, ..FinetuneConfig::default() }).unwrap();
    assert_ne!(moved.params(), model.params());
}

#[test]
fn config_rejects_bad_values() {
    assert!(UnlearnConfig::default().validate().is_ok());
    assert!(UnlearnConfig { alpha: -1.0, ..UnlearnConfig::default() }.validate().is_err());
    assert!(UnlearnConfig { max_iters: 0, ..UnlearnConfig::default() }.validate().is_err());
    assert!(UnlearnConfig { clean_batch: 0, ..UnlearnConfig::default() }.validate().is_err());
    assert!(UnlearnConfig { early_stop_asr: 1.5, ..UnlearnConfig::default() }.validate().is_err());
    let parsed: UnlearnConfig = toml::from_str("beta = 10.0\nobjective = \"naive\"").unwrap();
    assert_eq!(parsed.beta, 10.0);
    assert_eq!(parsed.objective, Objective::Naive);
    assert!(toml::from_str::<UnlearnConfig>("gamma = 1").is_err());
}
