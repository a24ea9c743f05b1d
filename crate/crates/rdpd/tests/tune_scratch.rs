//! Scratch tuning harness (ignored; run manually with --ignored).

use rdpd::data::synth::{synth_generate_with_truth, SynthConfig, SynthTruth};
use rdpd::data::{project_all, split_by_subject, standardize, ChannelProjection, SampleKey, SplitSpec};
use rdpd::distill::LossTermSet;
use rdpd::model::ModelSpec;
use rdpd::train::{
    build_bundle, evaluate, run_students, summarize, train_teacher, RunConfig, TrainedModel,
};
use std::collections::HashMap;

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn envu(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn tune() {
    let synth = SynthConfig {
        snr: envf("SNR", 1.0),
        leak_ratio: envf("LEAK", 0.35),
        decoy_ratio: envf("DECOY", 0.75),
        windows_per_subject: envu("WPS", 200),
        segment_len: envu("SEGLEN", 32),
        ..SynthConfig::default()
    };
    let (ds, truths) = synth_generate_with_truth(&synth).unwrap();
    let truth_by_key: HashMap<SampleKey, SynthTruth> = ds
        .samples
        .iter()
        .zip(&truths)
        .map(|(s, &t)| (s.key(), t))
        .collect();
    let classes = ds.meta.classes.clone();
    let mut split = split_by_subject(&ds, &SplitSpec::ratio_80_10_10(0)).unwrap();
    standardize(&mut split).unwrap();
    let proj = ChannelProjection::from_group(&ds.meta, "poor").unwrap();
    let poor_train = project_all(&split.train, &proj).unwrap();
    let poor_valid = project_all(&split.valid, &proj).unwrap();
    let poor_test = project_all(&split.test, &proj).unwrap();

    let teacher_spec = ModelSpec {
        n_channels: 4,
        n_segments: 4,
        segment_len: synth.segment_len,
        n_filters: envu("K", 16),
        filter_width: 4,
        stride: 2,
        n_hidden: envu("U", 16),
        n_classes: 4,
        dense_bias: true,
    };
    let mut cfg = RunConfig::new(teacher_spec.clone());
    cfg.max_iterations = envu("EPOCHS", 60);
    cfg.patience = envu("PATIENCE", 15);
    cfg.temperature = envf("T", 5.0);
    cfg.seeds = (0..envu("SEEDS", 3) as u64).collect();

    let t0 = std::time::Instant::now();
    let teacher: TrainedModel<f64> =
        train_teacher(&split.train, &split.valid, &classes, &cfg, cfg.teacher_seed).unwrap();
    let teval = evaluate(&teacher.model, None, &split.test, &classes, 0).unwrap();
    eprintln!(
        "teacher: {:.1?}s, best epoch {}, epochs run {}, test pr {:.3} roc {:.3}",
        t0.elapsed(),
        teacher.best_epoch,
        teacher.log.len(),
        teval.pr_auc,
        teval.roc_auc
    );

    // attention diagnostics on test samples
    let mut hits = 0usize;
    let mut mass = 0.0;
    for s in &split.test {
        let out = teacher.model.infer(s).unwrap();
        let t = truth_by_key[&s.key()];
        let arg = out
            .attention
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if arg == t.active_segment {
            hits += 1;
        }
        mass += out.attention[t.active_segment];
    }
    eprintln!(
        "teacher attention: argmax hit {:.2}, mean mass on active {:.3} (chance 0.25)",
        hits as f64 / split.test.len() as f64,
        mass / split.test.len() as f64
    );

    let refs: Vec<&rdpd::data::SegmentedSeries> = split.train.iter().collect();
    let bundle = build_bundle(&teacher.model, &refs, cfg.temperature).unwrap();
    let student_spec = teacher_spec.derive_student(1).unwrap();
    eprintln!(
        "student spec: K={} U={} params {} vs teacher {}",
        student_spec.n_filters,
        student_spec.n_hidden,
        student_spec.param_count(),
        teacher_spec.param_count()
    );

    for (name, terms) in [
        ("direct ", LossTermSet::DIRECT),
        ("kd     ", LossTermSet::KD),
        ("rdpd-r2", LossTermSet::RDPD_R2),
        ("rdpd   ", LossTermSet::RDPD),
    ] {
        let mut c = cfg.clone();
        c.terms = terms;
        let t1 = std::time::Instant::now();
        let runs = run_students::<f64>(
            &student_spec,
            &poor_train,
            &poor_valid,
            &poor_test,
            &classes,
            Some(&bundle),
            &c,
            true,
        )
        .unwrap();
        let evals: Vec<_> = runs.iter().map(|r| r.eval.clone()).collect();
        let s = summarize(&evals);
        let epochs: Vec<usize> = runs.iter().map(|r| r.log.len()).collect();
        eprintln!(
            "{name}: pr {:.3}±{:.3} roc {:.3}±{:.3} f1 {:.3}±{:.3}  epochs {:?} ({:.1?})",
            s.pr_auc_mean, s.pr_auc_std, s.roc_auc_mean, s.roc_auc_std,
            s.macro_f1_mean, s.macro_f1_std, epochs, t1.elapsed()
        );
        // student attention diagnostics on the first seed: hit rate on the
        // active segment and KL to the teacher's test attention
        let trained = rdpd::train::train_student::<f64>(
            &poor_train, &poor_valid, &classes, Some(&bundle), &student_spec, &c, c.seeds[0],
        )
        .unwrap();
        let mut hits = 0usize;
        let mut kl_sum = 0.0;
        for (s_poor, s_rich) in poor_test.iter().zip(&split.test) {
            let out = trained.model.infer(s_poor).unwrap();
            let tout = teacher.model.infer(s_rich).unwrap();
            let t = truth_by_key[&s_poor.key()];
            let arg = out
                .attention
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if arg == t.active_segment {
                hits += 1;
            }
            for (p, q) in out.attention.iter().zip(&tout.attention) {
                if *p > 0.0 {
                    kl_sum += p * (p / q.max(1e-12)).ln();
                }
            }
        }
        eprintln!(
            "         attention: hit {:.2}, mean KL to teacher {:.4}",
            hits as f64 / poor_test.len() as f64,
            kl_sum / poor_test.len() as f64
        );
    }
}
