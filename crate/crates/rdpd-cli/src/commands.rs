use std::path::Path;

use serde_json::json;

use rdpd::data::manifest::load_dataset;
use rdpd::data::synth::{synth_generate, SynthConfig};
use rdpd::data::{
    inject_noise, noise_seed, project_all, split_by_subject, standardize, ChannelProjection,
    DatasetMeta, NoiseKind, SampleKey, SegmentedSeries, SplitDataset, SplitSpec,
};
use rdpd::model::ModelSpec;
use rdpd::train::checkpoint::{load_bundle, load_model, save_bundle, save_model, LoadedModel};
use rdpd::train::{
    build_bundle, evaluate, run_students, summarize, train_teacher, EarlyStopMetric,
    IterationUnit, RunConfig, SeedOutcome, TrainedModel,
};
use rdpd::util::sha256_hex;
use rdpd::{Error, Precision, Real, Result};

use crate::output::{eval_text, seed_rows_text, write_json, write_jsonl, write_text};
use crate::{
    AxisArg, DataArgs, DumpAttentionArgs, EvalArgs, MetricArg, ModeArg, NoiseArg, OptimArgs,
    SplitArg, SweepArgs, TeacherSpecArgs, TrainStudentArgs, TrainTeacherArgs, UnitArg,
};

/// Loaded dataset plus a self-contained JSON descriptor of its source.
struct Experiment {
    meta: DatasetMeta,
    split: SplitDataset,
    descriptor: serde_json::Value,
}

fn load_experiment(data: &DataArgs, no_standardize: bool) -> Result<Experiment> {
    let (dataset, split_spec, descriptor, standardize_default) = match (&data.manifest, &data.synth) {
        (Some(path), None) => {
            let (manifest, dataset) = load_dataset(path)?;
            let spec = manifest.split_spec();
            let descriptor = json!({
                "kind": "manifest",
                "path": path.display().to_string(),
                "manifest": manifest,
            });
            let std_default = manifest.standardize;
            (dataset, spec, descriptor, std_default)
        }
        (None, Some(synth)) => {
            let cfg = match synth {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Parse {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                    cfg
                }
                None => SynthConfig::default(),
            };
            let dataset = synth_generate(&cfg)?;
            let spec = SplitSpec::ratio_80_10_10(cfg.seed);
            let descriptor = json!({ "kind": "synth", "config": cfg });
            (dataset, spec, descriptor, true)
        }
        (None, None) => {
            return Err(Error::Config(
                "a data source is required: --manifest PATH or --synth [PATH]".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    let meta = dataset.meta.clone();
    let mut split = split_by_subject(&dataset, &split_spec)?;
    let standardized = standardize_default && !no_standardize;
    if standardized {
        standardize(&mut split)?;
    }
    let descriptor = json!({
        "source": descriptor,
        "standardized": standardized,
        "train_hash": format!("{:016x}", SplitDataset::fingerprint(&split.train)),
        "valid_hash": format!("{:016x}", SplitDataset::fingerprint(&split.valid)),
        "test_hash": format!("{:016x}", SplitDataset::fingerprint(&split.test)),
    });
    Ok(Experiment {
        meta,
        split,
        descriptor,
    })
}

fn teacher_spec_from_args(meta: &DatasetMeta, spec: &TeacherSpecArgs) -> Result<ModelSpec> {
    let s = ModelSpec {
        n_channels: meta.channels.len(),
        n_segments: meta.n_segments,
        segment_len: meta.segment_len,
        n_filters: spec.filters,
        filter_width: spec.filter_width,
        stride: spec.stride,
        n_hidden: spec.hidden,
        n_classes: meta.classes.len(),
        dense_bias: !spec.no_dense_bias,
    };
    s.validate()?;
    Ok(s)
}

fn run_config(teacher_spec: ModelSpec, optim: &OptimArgs) -> RunConfig {
    let mut cfg = RunConfig::new(teacher_spec);
    cfg.temperature = optim.temperature;
    cfg.lr = optim.lr;
    cfg.batch_size = optim.batch_size;
    cfg.max_iterations = optim.iterations;
    cfg.iteration_unit = match optim.iteration_unit {
        UnitArg::Epochs => IterationUnit::Epochs,
        UnitArg::Steps => IterationUnit::Steps,
    };
    cfg.early_stop_metric = match optim.early_stop_metric {
        MetricArg::PrAuc => EarlyStopMetric::PrAuc,
        MetricArg::RocAuc => EarlyStopMetric::RocAuc,
    };
    cfg.patience = optim.patience;
    cfg
}

fn noise_kind(arg: NoiseArg) -> NoiseKind {
    match arg {
        NoiseArg::Normal => NoiseKind::Normal,
        NoiseArg::Uniform => NoiseKind::Uniform,
    }
}

fn apply_noise(part: &[SegmentedSeries], amp: f64, kind: NoiseKind, base: u64) -> Result<Vec<SegmentedSeries>> {
    part.iter()
        .map(|s| inject_noise(s, amp, kind, noise_seed(base, &s.key())))
        .collect()
}

fn poor_view(split: &SplitDataset, proj: &ChannelProjection) -> Result<SplitDataset> {
    Ok(SplitDataset {
        meta: split.meta.clone(),
        train: project_all(&split.train, proj)?,
        valid: project_all(&split.valid, proj)?,
        test: project_all(&split.test, proj)?,
    })
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn init_jobs(jobs: usize) {
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}

// ───── train-teacher ─────

pub fn train_teacher_cmd(args: TrainTeacherArgs, precision: Precision) -> Result<()> {
    match precision {
        Precision::F64 => train_teacher_go::<f64>(args),
        Precision::F32 => train_teacher_go::<f32>(args),
    }
}

fn train_teacher_go<F: Real>(args: TrainTeacherArgs) -> Result<()> {
    let exp = load_experiment(&args.data, args.data.no_standardize)?;
    let teacher_spec = teacher_spec_from_args(&exp.meta, &args.spec)?;
    let mut cfg = run_config(teacher_spec, &args.optim);
    cfg.teacher_seed = args.seed;
    cfg.teacher_t1 = args.teacher_t1;
    cfg.seeds = vec![args.seed];
    cfg.projection = Some(exp.meta.channels.clone());
    cfg.validate()?;
    ensure_out_dir(&args.out)?;

    let classes = exp.meta.classes.clone();
    let trained: TrainedModel<F> =
        train_teacher(&exp.split.train, &exp.split.valid, &classes, &cfg, args.seed)?;
    let eval = evaluate(&trained.model, None, &exp.split.test, &classes, args.seed)?;

    let mut bundle_samples: Vec<&SegmentedSeries> = exp.split.train.iter().collect();
    bundle_samples.extend(exp.split.valid.iter());
    let bundle = build_bundle(&trained.model, &bundle_samples, cfg.temperature)?;

    let ckpt_path = args.out.join("teacher.ckpt");
    save_model(&ckpt_path, &trained.model, None, None, &cfg.hash(), args.seed)?;
    save_bundle(&args.out.join("bundle.bin"), &bundle)?;
    write_jsonl(&args.out.join("teacher_log.jsonl"), &trained.log)?;
    write_json(
        &args.out.join("teacher_eval.json"),
        &serde_json::to_value(&eval).unwrap(),
    )?;
    write_text(&args.out.join("teacher_eval.txt"), &eval_text("teacher", &eval))?;
    write_json(
        &args.out.join("config.json"),
        &json!({
            "command": "train-teacher",
            "precision": F::PRECISION.to_string(),
            "data": exp.descriptor,
            "run_config": cfg,
            "run_config_hash": cfg.hash(),
            "best_epoch": trained.best_epoch,
            "epochs_run": trained.log.len(),
        }),
    )?;
    println!(
        "teacher: best epoch {} of {}, test roc_auc {:.4} pr_auc {:.4} macro_f1 {:.4}",
        trained.best_epoch,
        trained.log.len(),
        eval.roc_auc,
        eval.pr_auc,
        eval.macro_f1
    );
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

// ───── train-student ─────

pub fn train_student_cmd(args: TrainStudentArgs, precision: Precision) -> Result<()> {
    match precision {
        Precision::F64 => train_student_go::<f64>(args),
        Precision::F32 => train_student_go::<f32>(args),
    }
}

fn train_student_go<F: Real>(args: TrainStudentArgs) -> Result<()> {
    let terms = args.mode.terms();
    if args.mode == ModeArg::Direct && args.bundle.is_some() {
        return Err(Error::Config(
            "mode=direct trains on hard labels only and refuses --bundle; drop the flag".into(),
        ));
    }
    if terms.needs_bundle() && args.bundle.is_none() {
        return Err(Error::Config(format!(
            "mode={} needs frozen teacher outputs; pass --bundle PATH",
            args.mode.name()
        )));
    }

    let exp = load_experiment(&args.data, args.data.no_standardize)?;
    let teacher_ckpt = load_model(&args.teacher)?;
    let teacher_spec = teacher_ckpt.spec().clone();
    if teacher_spec.n_segments != exp.meta.n_segments
        || teacher_spec.segment_len != exp.meta.segment_len
    {
        return Err(Error::Alignment(format!(
            "teacher checkpoint segments {}x{} do not match dataset {}x{}",
            teacher_spec.n_segments,
            teacher_spec.segment_len,
            exp.meta.n_segments,
            exp.meta.segment_len
        )));
    }

    let proj = ChannelProjection::from_group(&exp.meta, &args.group)?;
    let student_spec = teacher_spec.derive_student(proj.len())?;
    let mut cfg = run_config(teacher_spec, &args.optim);
    cfg.terms = terms;
    cfg.seeds = args.seeds.clone();
    cfg.scalar_comb_bias = args.scalar_comb_bias;
    cfg.student_spec = Some(student_spec.clone());
    cfg.projection = Some(proj.names.clone());
    cfg.validate()?;
    ensure_out_dir(&args.out)?;
    init_jobs(args.jobs);

    let mut poor = poor_view(&exp.split, &proj)?;
    let kind = noise_kind(args.noise_kind);
    if args.noise_amp > 0.0 {
        poor.train = apply_noise(&poor.train, args.noise_amp, kind, args.noise_seed)?;
        poor.valid = apply_noise(&poor.valid, args.noise_amp, kind, args.noise_seed)?;
        poor.test = apply_noise(&poor.test, args.noise_amp, kind, args.noise_seed)?;
    }

    let bundle = match &args.bundle {
        Some(path) => Some(load_bundle(path)?),
        None => None,
    };
    let classes = exp.meta.classes.clone();
    let outcomes = run_students::<F>(
        &student_spec,
        &poor.train,
        &poor.valid,
        &poor.test,
        &classes,
        bundle.as_ref(),
        &cfg,
        args.jobs > 1,
    )?;

    // per-seed checkpoints: retrain is cheap but the artifacts are cheaper
    for outcome in &outcomes {
        let trained: TrainedModel<F> = rdpd::train::train_student(
            &poor.train,
            &poor.valid,
            &classes,
            bundle.as_ref(),
            &student_spec,
            &cfg,
            outcome.seed,
        )?;
        save_model(
            &args.out.join(format!("student_{}_seed{}.ckpt", args.mode.name(), outcome.seed)),
            &trained.model,
            trained.head.as_ref(),
            None,
            &cfg.hash(),
            outcome.seed,
        )?;
    }

    write_results(&args.out, args.mode.name(), &outcomes, &exp.descriptor, &cfg, &json!({
        "command": "train-student",
        "precision": F::PRECISION.to_string(),
        "mode": args.mode.name(),
        "group": args.group,
        "noise_amp": args.noise_amp,
        "noise_seed": args.noise_seed,
        "teacher": args.teacher.display().to_string(),
        "bundle": args.bundle.as_ref().map(|p| p.display().to_string()),
        "student_spec": student_spec,
        "param_count_student": student_spec.param_count(),
        "param_count_teacher": cfg.teacher_spec.param_count(),
    }))?;
    let summary = summarize(&outcomes.iter().map(|o| o.eval.clone()).collect::<Vec<_>>());
    println!(
        "{}: pr_auc {:.4} ± {:.4} over {} seeds ({} train windows)",
        args.mode.name(),
        summary.pr_auc_mean,
        summary.pr_auc_std,
        summary.n_seeds,
        poor.train.len()
    );
    Ok(())
}

fn write_results(
    out: &Path,
    mode: &str,
    outcomes: &[SeedOutcome],
    data_descriptor: &serde_json::Value,
    cfg: &RunConfig,
    extra: &serde_json::Value,
) -> Result<()> {
    let summary = summarize(&outcomes.iter().map(|o| o.eval.clone()).collect::<Vec<_>>());
    let rows: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|o| {
            json!({
                "mode": mode,
                "seed": o.seed,
                "roc_auc": o.eval.roc_auc,
                "pr_auc": o.eval.pr_auc,
                "macro_f1": o.eval.macro_f1,
                "best_epoch": o.best_epoch,
                "best_valid_metric": o.best_valid_metric,
                "per_class": o.eval.per_class,
            })
        })
        .collect();
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    write_text(&out.join("results.txt"), &seed_rows_text(mode, outcomes, &summary))?;
    for o in outcomes {
        write_jsonl(&out.join(format!("student_log_seed{}.jsonl", o.seed)), &o.log)?;
    }
    write_json(
        &out.join("config.json"),
        &json!({
            "data": data_descriptor,
            "run_config": cfg,
            "run_config_hash": cfg.hash(),
            "summary": summary,
            "extra": extra,
        }),
    )?;
    Ok(())
}

// ───── sweep ─────

pub fn sweep_cmd(args: SweepArgs, precision: Precision) -> Result<()> {
    match precision {
        Precision::F64 => sweep_go::<f64>(args),
        Precision::F32 => sweep_go::<f32>(args),
    }
}

fn sweep_go<F: Real>(args: SweepArgs) -> Result<()> {
    let values = if args.values.is_empty() {
        match args.axis {
            AxisArg::Temperature => vec![1.0, 2.0, 5.0, 10.0, 20.0],
            _ => {
                return Err(Error::Config(format!(
                    "--values is required for the {} axis",
                    args.axis.name()
                )))
            }
        }
    } else {
        args.values.clone()
    };
    match args.axis {
        AxisArg::RichFraction => {
            if values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                return Err(Error::Config("rich fractions must lie in (0, 1]".into()));
            }
        }
        AxisArg::NoiseAmp => {
            if values.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Config("noise amplitudes must be >= 0".into()));
            }
        }
        AxisArg::Temperature => {
            if values.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config("temperatures must be > 0".into()));
            }
        }
    }

    let exp = load_experiment(&args.data, args.data.no_standardize)?;
    let teacher_spec = teacher_spec_from_args(&exp.meta, &args.spec)?;
    let proj = ChannelProjection::from_group(&exp.meta, &args.group)?;
    let student_spec = teacher_spec.derive_student(proj.len())?;
    let classes = exp.meta.classes.clone();
    let poor = poor_view(&exp.split, &proj)?;
    ensure_out_dir(&args.out)?;
    init_jobs(args.jobs);

    let base_cfg = {
        let mut cfg = run_config(teacher_spec.clone(), &args.optim);
        cfg.teacher_seed = args.teacher_seed;
        cfg.seeds = args.seeds.clone();
        cfg.student_spec = Some(student_spec.clone());
        cfg.projection = Some(proj.names.clone());
        cfg.validate()?;
        cfg
    };

    // teacher/bundle shared across cells whenever the axis allows it
    let shared_teacher: Option<(TrainedModel<F>, rdpd::distill::DistillBundle)> =
        if args.axis == AxisArg::NoiseAmp {
            let trained: TrainedModel<F> = train_teacher(
                &exp.split.train,
                &exp.split.valid,
                &classes,
                &base_cfg,
                args.teacher_seed,
            )?;
            let refs: Vec<&SegmentedSeries> = exp.split.train.iter().collect();
            let bundle = build_bundle(&trained.model, &refs, base_cfg.temperature)?;
            Some((trained, bundle))
        } else {
            None
        };

    let mut all_rows: Vec<serde_json::Value> = Vec::new();
    let mut text = format!(
        "{:<14} {:>10} {:<10} {:>6} {:>10} {:>10} {:>10}\n",
        "axis", "value", "mode", "seed", "roc_auc", "pr_auc", "macro_f1"
    );

    for &value in &values {
        let mut cfg = base_cfg.clone();
        let (bundle, poor_for_value, teacher_eval) = match args.axis {
            AxisArg::RichFraction => {
                let reduced =
                    rdpd::data::subsample_rich(&exp.split.train, value, args.teacher_seed)?;
                let trained: TrainedModel<F> =
                    train_teacher(&reduced, &exp.split.valid, &classes, &cfg, args.teacher_seed)?;
                let teval =
                    evaluate(&trained.model, None, &exp.split.test, &classes, args.teacher_seed)?;
                let refs: Vec<&SegmentedSeries> = exp.split.train.iter().collect();
                let bundle = build_bundle(&trained.model, &refs, cfg.temperature)?;
                (bundle, poor.clone(), Some(teval))
            }
            AxisArg::NoiseAmp => {
                let (_, bundle) = shared_teacher.as_ref().unwrap();
                let kind = noise_kind(args.noise_kind);
                let noised = SplitDataset {
                    meta: poor.meta.clone(),
                    train: apply_noise(&poor.train, value, kind, args.noise_seed)?,
                    valid: apply_noise(&poor.valid, value, kind, args.noise_seed)?,
                    test: apply_noise(&poor.test, value, kind, args.noise_seed)?,
                };
                (clone_bundle(bundle)?, noised, None)
            }
            AxisArg::Temperature => {
                cfg.temperature = value;
                let trained: TrainedModel<F> = train_teacher(
                    &exp.split.train,
                    &exp.split.valid,
                    &classes,
                    &cfg,
                    args.teacher_seed,
                )?;
                let teval =
                    evaluate(&trained.model, None, &exp.split.test, &classes, args.teacher_seed)?;
                let refs: Vec<&SegmentedSeries> = exp.split.train.iter().collect();
                let bundle = build_bundle(&trained.model, &refs, value)?;
                (bundle, poor.clone(), Some(teval))
            }
        };

        for &mode in &args.modes {
            let mut cell_cfg = cfg.clone();
            cell_cfg.terms = mode.terms();
            let outcomes = run_students::<F>(
                &student_spec,
                &poor_for_value.train,
                &poor_for_value.valid,
                &poor_for_value.test,
                &classes,
                Some(&bundle),
                &cell_cfg,
                args.jobs > 1,
            )?;
            let summary =
                summarize(&outcomes.iter().map(|o| o.eval.clone()).collect::<Vec<_>>());
            let cell_id = sha256_hex(
                format!(
                    "{}:{}:{}:{}:{}",
                    args.axis.name(),
                    value,
                    mode.name(),
                    cell_cfg.hash(),
                    exp.descriptor
                )
                .as_bytes(),
            );
            let cell_id = &cell_id[..16];

            for o in &outcomes {
                let row = json!({
                    "axis": args.axis.name(),
                    "value": value,
                    "mode": mode.name(),
                    "seed": o.seed,
                    "roc_auc": o.eval.roc_auc,
                    "pr_auc": o.eval.pr_auc,
                    "macro_f1": o.eval.macro_f1,
                    "best_epoch": o.best_epoch,
                    "cell": cell_id,
                });
                text.push_str(&format!(
                    "{:<14} {:>10.4} {:<10} {:>6} {:>10.6} {:>10.6} {:>10.6}\n",
                    args.axis.name(),
                    value,
                    mode.name(),
                    o.seed,
                    o.eval.roc_auc,
                    o.eval.pr_auc,
                    o.eval.macro_f1
                ));
                all_rows.push(row);
            }
            text.push_str(&format!(
                "{:<14} {:>10.4} {:<10} {:>6} {:>4.4}±{:>.4} {:>4.4}±{:>.4} {:>4.4}±{:>.4}\n",
                args.axis.name(),
                value,
                mode.name(),
                "mean",
                summary.roc_auc_mean,
                summary.roc_auc_std,
                summary.pr_auc_mean,
                summary.pr_auc_std,
                summary.macro_f1_mean,
                summary.macro_f1_std
            ));
            write_json(
                &args.out.join(format!("cell_{cell_id}.json")),
                &json!({
                    "axis": args.axis.name(),
                    "value": value,
                    "mode": mode.name(),
                    "summary": summary,
                    "teacher_eval": teacher_eval,
                    "outcomes": outcomes,
                    "run_config_hash": cell_cfg.hash(),
                }),
            )?;
        }
    }

    write_jsonl(&args.out.join("sweep_results.jsonl"), &all_rows)?;
    write_text(&args.out.join("sweep_results.txt"), &text)?;
    write_json(
        &args.out.join("config.json"),
        &json!({
            "command": "sweep",
            "precision": F::PRECISION.to_string(),
            "axis": args.axis.name(),
            "values": values,
            "modes": args.modes.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "group": args.group,
            "noise_kind": format!("{:?}", args.noise_kind),
            "noise_seed": args.noise_seed,
            "data": exp.descriptor,
            "run_config": base_cfg,
            "run_config_hash": base_cfg.hash(),
        }),
    )?;
    println!(
        "sweep {}: {} values x {} modes x {} seeds -> {}",
        args.axis.name(),
        values.len(),
        args.modes.len(),
        args.seeds.len(),
        args.out.join("sweep_results.jsonl").display()
    );
    Ok(())
}

/// Bundles are not Clone (they carry an access counter); round-trip the
/// entries instead.
fn clone_bundle(bundle: &rdpd::distill::DistillBundle) -> Result<rdpd::distill::DistillBundle> {
    let mut out = rdpd::distill::DistillBundle::new(bundle.temperature())?;
    for key in bundle.keys() {
        out.insert(key.clone(), bundle.get(key).unwrap().clone())?;
    }
    Ok(out)
}

// ───── dump-attention ─────

pub fn dump_attention_cmd(args: DumpAttentionArgs) -> Result<()> {
    let exp = load_experiment(&args.data, args.data.no_standardize)?;
    let part: &[SegmentedSeries] = match args.split {
        SplitArg::Train => &exp.split.train,
        SplitArg::Valid => &exp.split.valid,
        SplitArg::Test => &exp.split.test,
    };

    let samples: Vec<&SegmentedSeries> = if args.samples.is_empty() {
        part.iter().take(args.n_samples).collect()
    } else {
        let mut chosen = Vec::new();
        for id in &args.samples {
            let key = parse_sample_key(id)?;
            let found = part
                .iter()
                .find(|s| s.key() == key)
                .ok_or_else(|| Error::Data(format!("sample {id} not in the {} split", args.split.name())))?;
            chosen.push(found);
        }
        chosen
    };
    if samples.is_empty() {
        return Err(Error::Data("no samples selected".into()));
    }

    let mut rows = Vec::new();
    let mut text = String::new();
    for ckpt_spec in &args.ckpts {
        let (path, group) = parse_ckpt_spec(ckpt_spec);
        let loaded = load_model(Path::new(path))?;
        let proj = resolve_projection(&exp.meta, &loaded, group, path)?;
        let model_name = Path::new(path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(path)
            .to_string();
        for sample in &samples {
            let projected = rdpd::data::project_channels(sample, &proj)?;
            let (attention, probs) = infer_any(&loaded, &projected)?;
            let total: f64 = attention.iter().sum();
            debug_assert!((total - 1.0).abs() < 1e-6);
            text.push_str(&format!(
                "{:<24} {:<12} att [{}] probs [{}]\n",
                model_name,
                sample.key(),
                attention.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" "),
                probs.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
            ));
            rows.push(json!({
                "model": model_name,
                "ckpt": path,
                "group": proj.names,
                "sample": sample.key().to_string(),
                "label": sample.label,
                "attention": attention,
                "probs": probs,
            }));
        }
    }

    match &args.out {
        Some(dir) => {
            ensure_out_dir(dir)?;
            write_jsonl(&dir.join("attention.jsonl"), &rows)?;
            write_text(&dir.join("attention.txt"), &text)?;
            write_json(
                &dir.join("config.json"),
                &json!({
                    "command": "dump-attention",
                    "data": exp.descriptor,
                    "split": args.split.name(),
                    "ckpts": args.ckpts,
                    "samples": samples.iter().map(|s| s.key().to_string()).collect::<Vec<_>>(),
                }),
            )?;
            println!("wrote {}", dir.join("attention.jsonl").display());
        }
        None => {
            for row in &rows {
                println!("{}", serde_json::to_string(row).unwrap());
            }
            eprint!("{text}");
        }
    }
    Ok(())
}

fn parse_sample_key(id: &str) -> Result<SampleKey> {
    let (subject, index) = id
        .rsplit_once(':')
        .ok_or_else(|| Error::Config(format!("sample id {id:?} is not subject:window")))?;
    let window_index: u32 = index
        .parse()
        .map_err(|_| Error::Config(format!("sample id {id:?} has a non-numeric window index")))?;
    Ok(SampleKey {
        subject_id: subject.to_string(),
        window_index,
    })
}

fn parse_ckpt_spec(spec: &str) -> (&str, Option<&str>) {
    match spec.rsplit_once(':') {
        // a windows-style drive letter is not a group name; keep it simple
        Some((path, group)) if !group.contains('/') && !group.is_empty() && !path.is_empty() => {
            (path, Some(group))
        }
        _ => (spec, None),
    }
}

fn resolve_projection(
    meta: &DatasetMeta,
    loaded: &LoadedModel,
    group: Option<&str>,
    path: &str,
) -> Result<ChannelProjection> {
    let want = loaded.spec().n_channels;
    if let Some(group) = group {
        let proj = ChannelProjection::from_group(meta, group)?;
        if proj.len() != want {
            return Err(Error::Config(format!(
                "{path}: group {group:?} has {} channels, checkpoint expects {want}",
                proj.len()
            )));
        }
        return Ok(proj);
    }
    let mut candidates: Vec<ChannelProjection> = Vec::new();
    if meta.channels.len() == want {
        candidates.push(ChannelProjection::all(meta));
    }
    for name in meta.groups.keys() {
        let proj = ChannelProjection::from_group(meta, name)?;
        if proj.len() == want && !candidates.iter().any(|c| c.indices == proj.indices) {
            candidates.push(proj);
        }
    }
    match candidates.len() {
        1 => Ok(candidates.pop().unwrap()),
        0 => Err(Error::Config(format!(
            "{path}: no channel group has the {want} channels the checkpoint expects"
        ))),
        _ => Err(Error::Config(format!(
            "{path}: several groups have {want} channels; disambiguate with PATH:GROUP"
        ))),
    }
}

fn infer_any(loaded: &LoadedModel, sample: &SegmentedSeries) -> Result<(Vec<f64>, Vec<f64>)> {
    fn go<F: Real>(model: &rdpd::model::Model<F>, sample: &SegmentedSeries) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = model.infer(sample)?;
        let logits: Vec<f64> = out.logits.iter().map(|&v| v.f64()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok((
            out.attention.iter().map(|&v| v.f64()).collect(),
            exps.iter().map(|e| e / sum).collect(),
        ))
    }
    match loaded {
        LoadedModel::F32(c) => go(&c.model, sample),
        LoadedModel::F64(c) => go(&c.model, sample),
    }
}

// ───── eval ─────

pub fn eval_cmd(args: EvalArgs) -> Result<()> {
    let exp = load_experiment(&args.data, args.data.no_standardize)?;
    let part: &[SegmentedSeries] = match args.split {
        SplitArg::Train => &exp.split.train,
        SplitArg::Valid => &exp.split.valid,
        SplitArg::Test => &exp.split.test,
    };
    let loaded = load_model(&args.ckpt)?;
    let proj = ChannelProjection::from_group(&exp.meta, &args.group)?;
    if proj.len() != loaded.spec().n_channels {
        return Err(Error::Config(format!(
            "group {:?} has {} channels, checkpoint expects {}",
            args.group,
            proj.len(),
            loaded.spec().n_channels
        )));
    }
    let projected = project_all(part, &proj)?;
    let classes = exp.meta.classes.clone();
    let eval = match &loaded {
        LoadedModel::F32(c) => evaluate(&c.model, c.head.as_ref(), &projected, &classes, c.rng_seed)?,
        LoadedModel::F64(c) => evaluate(&c.model, c.head.as_ref(), &projected, &classes, c.rng_seed)?,
    };

    let record = json!({
        "command": "eval",
        "ckpt": args.ckpt.display().to_string(),
        "split": args.split.name(),
        "group": args.group,
        "run_config_hash": loaded.run_config_hash(),
        "precision": loaded.precision().to_string(),
        "data": exp.descriptor,
        "eval": eval,
    });
    let text = eval_text(
        &format!("{} on {}", args.ckpt.display(), args.split.name()),
        &eval,
    );
    match &args.out {
        Some(dir) => {
            ensure_out_dir(dir)?;
            write_json(&dir.join("eval.json"), &record)?;
            write_text(&dir.join("eval.txt"), &text)?;
            println!("wrote {}", dir.join("eval.json").display());
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&record).unwrap());
            eprint!("{text}");
        }
    }
    Ok(())
}
