//! Distillation loss properties: ablation additivity, KL positivity and
//! the Gibbs inequality on random distributions, softmax ordering
//! invariants, and convergence of the soft loss to its analytic minimum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use rdpd::autodiff::Tape;
use rdpd::distill::{
    attention_loss, comb_loss, combined_label, hard_loss, soft_loss, student_loss, BundleEntry,
    CombineHead, LossTermSet,
};
use rdpd::model::ForwardNodes;
use rdpd::tensor::Tensor;
use rdpd::train::adam::Adam;

fn softmax(values: &[f64], t: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn random_distribution(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    softmax(&logits, 1.0)
}

const PRESETS: [(&str, LossTermSet); 5] = [
    ("direct", LossTermSet::DIRECT),
    ("kd", LossTermSet::KD),
    ("rdpd-r1", LossTermSet::RDPD_R1),
    ("rdpd-r2", LossTermSet::RDPD_R2),
    ("rdpd", LossTermSet::RDPD),
];

#[test]
fn every_preset_satisfies_the_additivity_identity() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for round in 0..40 {
        let c = 4;
        let m = 3;
        let logits_v: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let scores_v: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut y = vec![0.0; c];
        y[rng.random_range(0..c)] = 1.0;
        let entry = BundleEntry {
            soft: random_distribution(&mut rng, c),
            attention: random_distribution(&mut rng, m),
        };
        let temperature = [1.0, 2.5, 5.0][round % 3];

        for (name, terms) in PRESETS {
            let head = CombineHead::<f64>::init(c, false);
            let mut tape = Tape::<f64>::new();
            let logits = tape.leaf(logits_v.clone(), &[1, c]).unwrap();
            let scores = tape.leaf(scores_v.clone(), &[m, 1]).unwrap();
            let attention = tape.softmax_t(scores, 1.0).unwrap();
            let fwd = ForwardNodes { attention, logits };
            let head_nodes = head.register(&mut tape);
            let parts = student_loss(
                &mut tape,
                &fwd,
                &y,
                Some(&entry),
                Some(&head_nodes),
                &terms,
                temperature,
            )
            .unwrap();

            // recompute each enabled term independently
            let mut expected = 0.0;
            let mut tape2 = Tape::<f64>::new();
            let logits2 = tape2.leaf(logits_v.clone(), &[1, c]).unwrap();
            let scores2 = tape2.leaf(scores_v.clone(), &[m, 1]).unwrap();
            let attention2 = tape2.softmax_t(scores2, 1.0).unwrap();
            if terms.att {
                let l = attention_loss(&mut tape2, attention2, &entry.attention).unwrap();
                expected += tape2.value(l);
            }
            if terms.hard {
                let l = hard_loss(&mut tape2, logits2, &y).unwrap();
                expected += tape2.value(l);
            }
            if terms.soft {
                let l = soft_loss(&mut tape2, logits2, &entry.soft, temperature).unwrap();
                expected += tape2.value(l);
            }
            if terms.comb {
                let head_nodes2 = head.register(&mut tape2);
                let p1 = tape2.softmax_t(logits2, 1.0).unwrap();
                let pt = tape2.softmax_t(logits2, temperature).unwrap();
                let blend = combined_label(&mut tape2, p1, pt, &head_nodes2).unwrap();
                let l = comb_loss(&mut tape2, blend, &y).unwrap();
                expected += tape2.value(l);
            }
            let got = tape.value(parts.total);
            assert!(
                (got - expected).abs() < 1e-12,
                "{name} round {round}: {got} vs {expected}"
            );
            // all enabled terms are nonnegative
            for part in [parts.att, parts.hard, parts.soft, parts.comb].into_iter().flatten() {
                assert!(tape.value(part) >= 0.0, "{name}: negative loss term");
            }
        }
    }
}

#[test]
fn kl_nonnegative_and_gibbs_on_1000_random_distributions() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for round in 0..1000 {
        let n = rng.random_range(2..=8);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);

        let mut tape = Tape::<f64>::new();
        let p_leaf = tape.leaf(p.clone(), &[n]).unwrap();
        let q_leaf = tape.leaf(q.clone(), &[n]).unwrap();
        let kl = tape.kl_divergence(p_leaf, q_leaf).unwrap();
        assert!(tape.value(kl) >= 0.0, "round {round}: KL < 0");

        // identical distributions give (numerically) zero divergence
        let p2 = tape.leaf(p.clone(), &[n]).unwrap();
        let p3 = tape.leaf(p.clone(), &[n]).unwrap();
        let zero = tape.kl_divergence(p2, p3).unwrap();
        assert!(tape.value(zero).abs() < 1e-10);

        // Gibbs: CE(y, p) >= CE(y, y) = H(y), equality iff p == y
        let y_leaf = tape.leaf(q.clone(), &[n]).unwrap();
        let pred = tape.leaf(p.clone(), &[n]).unwrap();
        let ce = tape.cross_entropy(y_leaf, pred).unwrap();
        let y2 = tape.leaf(q.clone(), &[n]).unwrap();
        let y3 = tape.leaf(q.clone(), &[n]).unwrap();
        let entropy = tape.cross_entropy(y2, y3).unwrap();
        assert!(
            tape.value(ce) >= tape.value(entropy) - 1e-12,
            "round {round}: Gibbs violated"
        );
    }
}

#[test]
fn softmax_ordering_is_invariant_in_temperature() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    for _ in 0..200 {
        let n = rng.random_range(2..=6);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let reference = argmax(&softmax(&logits, 1.0));
        for t in [0.25, 1.0, 2.0, 5.0, 20.0] {
            assert_eq!(argmax(&softmax(&logits, t)), reference);
        }
        // and softmax sums to one at 64-bit precision
        let mut tape = Tape::<f64>::new();
        let leaf = tape.leaf(logits.clone(), &[n]).unwrap();
        let p = tape.softmax_t(leaf, 3.0).unwrap();
        let total: f64 = tape.data(p).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        // shift invariance
        let shifted: Vec<f64> = logits.iter().map(|v| v + 17.5).collect();
        let leaf2 = tape.leaf(shifted, &[n]).unwrap();
        let p2 = tape.softmax_t(leaf2, 3.0).unwrap();
        for (a, b) in tape.data(p).iter().zip(tape.data(p2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn soft_loss_minimum_is_the_teacher_distribution() {
    // fixed 3-class target; gradient descent on raw student logits must
    // drive softmax(logits, T) to the teacher's soft labels
    let temperature = 2.5;
    let target = softmax(&[1.2, -0.3, 0.4], temperature);
    let mut logits = Tensor::<f64>::new(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
    let mut adam = Adam::new(0.05, &[3]);
    for _ in 0..2000 {
        let mut tape = Tape::<f64>::new();
        let node = tape.param(&logits);
        let loss = soft_loss(&mut tape, node, &target, temperature).unwrap();
        tape.backward(loss).unwrap();
        logits.grad = Some(tape.grad(node).unwrap().to_vec());
        adam.step(&mut [&mut logits]).unwrap();
    }
    let reached = softmax(&logits.data, temperature);
    for (r, t) in reached.iter().zip(&target) {
        assert!((r - t).abs() < 1e-4, "reached {reached:?}, target {target:?}");
    }
}

#[test]
fn attention_loss_trend_decreases_during_rdpd_training() {
    use rdpd::data::synth::{synth_generate, SynthConfig};
    use rdpd::data::{project_all, split_by_subject, ChannelProjection, SplitSpec};
    use rdpd::model::ModelSpec;
    use rdpd::train::{build_bundle, train_student, train_teacher, RunConfig, TrainedModel};

    let synth = SynthConfig {
        n_subjects: 5,
        windows_per_subject: 60,
        segment_len: 16,
        snr: 1.5,
        ..SynthConfig::default()
    };
    let ds = synth_generate(&synth).unwrap();
    let classes = ds.meta.classes.clone();
    let split = split_by_subject(&ds, &SplitSpec::ratio_80_10_10(2)).unwrap();
    let proj = ChannelProjection::from_group(&ds.meta, "poor").unwrap();
    let poor_train = project_all(&split.train, &proj).unwrap();
    let poor_valid = project_all(&split.valid, &proj).unwrap();

    let teacher_spec = ModelSpec {
        n_channels: 4,
        n_segments: 4,
        segment_len: 16,
        n_filters: 8,
        filter_width: 4,
        stride: 2,
        n_hidden: 8,
        n_classes: 4,
        dense_bias: true,
    };
    let mut cfg = RunConfig::new(teacher_spec.clone());
    cfg.max_iterations = 15;
    cfg.patience = 15;
    cfg.batch_size = 32;
    cfg.temperature = 2.0;

    let teacher: TrainedModel<f64> =
        train_teacher(&split.train, &split.valid, &classes, &cfg, 41).unwrap();
    let refs: Vec<&rdpd::data::SegmentedSeries> = split.train.iter().collect();
    let bundle = build_bundle(&teacher.model, &refs, cfg.temperature).unwrap();
    let student_spec = teacher_spec.derive_student(1).unwrap();
    let student: TrainedModel<f64> = train_student(
        &poor_train,
        &poor_valid,
        &classes,
        Some(&bundle),
        &student_spec,
        &cfg,
        0,
    )
    .unwrap();

    let att: Vec<f64> = student.log.iter().map(|r| r.l_att).collect();
    let ma: Vec<f64> = att.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    assert!(ma.len() >= 2, "run too short for a moving average");
    assert!(
        ma.last().unwrap() < ma.first().unwrap(),
        "attention loss trend did not decrease: {att:?}"
    );
}
