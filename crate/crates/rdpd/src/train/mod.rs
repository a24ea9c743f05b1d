//! Two-phase optimization: train the teacher on the rich view, freeze
//! it, precompute the distill bundle, then train students on the poor
//! view under a selected loss-term set. Mini-batch Adam, per-epoch
//! shuffling, early stopping on a validation metric, multi-seed drivers.

pub mod adam;
pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SegmentedSeries, SplitDataset};
use crate::distill::{
    student_loss, teacher_loss, CombineHead, DistillBundle, LossTermSet, BundleEntry,
};
use crate::error::{Error, Result};
use crate::metrics::{multiclass_aggregate, EvalResult};
use crate::model::{Model, ModelSpec};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::util::{sha256_hex, stable_hash64};
use adam::Adam;

/// Whether `max_iterations` counts epochs or optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationUnit {
    #[default]
    Epochs,
    Steps,
}

/// Validation metric driving early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    #[default]
    PrAuc,
    RocAuc,
}

impl EarlyStopMetric {
    fn pick(&self, eval: &EvalResult) -> f64 {
        match self {
            EarlyStopMetric::PrAuc => eval.pr_auc,
            EarlyStopMetric::RocAuc => eval.roc_auc,
        }
    }
}

/// Everything that determines a training run besides the data itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub terms: LossTermSet,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub iteration_unit: IterationUnit,
    pub early_stop_metric: EarlyStopMetric,
    pub patience: usize,
    /// Student seeds; each reinitializes student parameters and batch order.
    pub seeds: Vec<u64>,
    pub teacher_seed: u64,
    /// Train the teacher with a plain (T=1) softmax instead of the
    /// temperature-T objective.
    pub teacher_t1: bool,
    /// Retrain teacher and bundle per student seed instead of sharing one.
    pub reseed_teacher: bool,
    /// Combine-head bias as a broadcast scalar instead of per-class.
    pub scalar_comb_bias: bool,
    pub teacher_spec: ModelSpec,
    /// Derived from the projection width when absent.
    pub student_spec: Option<ModelSpec>,
    /// Channel names of the poor view (recorded for reproducibility).
    pub projection: Option<Vec<String>>,
}

impl RunConfig {
    pub fn new(teacher_spec: ModelSpec) -> Self {
        RunConfig {
            terms: LossTermSet::RDPD,
            temperature: 5.0,
            lr: 0.001,
            batch_size: 128,
            max_iterations: 200,
            iteration_unit: IterationUnit::Epochs,
            early_stop_metric: EarlyStopMetric::PrAuc,
            patience: 20,
            seeds: (0..10).collect(),
            teacher_seed: 1009,
            teacher_t1: false,
            reseed_teacher: false,
            scalar_comb_bias: false,
            teacher_spec,
            student_spec: None,
            projection: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.terms.validate()?;
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        self.teacher_spec.validate()?;
        if let Some(s) = &self.student_spec {
            s.validate()?;
        }
        Ok(())
    }

    /// Content hash of the full configuration record.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)
    }
}

/// One structured log record per epoch. Disabled terms log 0, so the
/// total always equals the sum of the four term columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_att: f64,
    pub l_hard: f64,
    pub l_soft: f64,
    pub l_comb: f64,
    pub l_total: f64,
    pub valid_metric: f64,
}

/// A trained model plus its training history; parameters are the best
/// validation checkpoint seen, never the final iterate.
#[derive(Debug, Clone)]
pub struct TrainedModel<F: Real> {
    pub model: Model<F>,
    pub head: Option<CombineHead<F>>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

enum Objective<'a> {
    Teacher {
        temperature: f64,
    },
    Student {
        bundle: Option<&'a DistillBundle>,
        terms: LossTermSet,
        temperature: f64,
    },
}

/// Phase one: teacher on the rich view, objective
/// `CE(Y, softmax(O_r, T))`, early-stopped on the validation metric.
pub fn train_teacher<F: Real>(
    train: &[SegmentedSeries],
    valid: &[SegmentedSeries],
    classes: &[String],
    cfg: &RunConfig,
    seed: u64,
) -> Result<TrainedModel<F>> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("teacher training needs nonempty train and valid splits".into()));
    }
    let mut model: Model<F> = Model::init(&cfg.teacher_spec, seed)?;
    let temperature = if cfg.teacher_t1 { 1.0 } else { cfg.temperature };
    let objective = Objective::Teacher { temperature };
    let (log, best_epoch, best_metric) =
        run_training(&mut model, &mut None, train, valid, classes, objective, cfg, seed)?;
    Ok(TrainedModel {
        model,
        head: None,
        log,
        best_epoch,
        best_metric,
    })
}

/// Freezes the teacher's outputs for every given sample: soft labels at
/// temperature `T` plus attention weights, keyed by sample id.
pub fn build_bundle<F: Real>(
    teacher: &Model<F>,
    samples: &[&SegmentedSeries],
    temperature: f64,
) -> Result<DistillBundle> {
    let mut bundle = DistillBundle::new(temperature)?;
    for sample in samples {
        let out = teacher.infer(sample)?;
        let logits: Vec<f64> = out.logits.iter().map(|&v| v.f64()).collect();
        let soft = softmax_f64(&logits, temperature);
        let attention: Vec<f64> = out.attention.iter().map(|&v| v.f64()).collect();
        bundle.insert(sample.key(), BundleEntry { soft, attention })?;
    }
    Ok(bundle)
}

/// Phase two: a student on the poor view under `cfg.terms`. The bundle
/// must cover every training sample whenever a term needs it, and its
/// temperature must match the run's.
pub fn train_student<F: Real>(
    train: &[SegmentedSeries],
    valid: &[SegmentedSeries],
    classes: &[String],
    bundle: Option<&DistillBundle>,
    student_spec: &ModelSpec,
    cfg: &RunConfig,
    seed: u64,
) -> Result<TrainedModel<F>> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("student training needs nonempty train and valid splits".into()));
    }
    if cfg.terms.needs_bundle() {
        let bundle = bundle.ok_or_else(|| {
            Error::Config("the selected loss terms need a distill bundle".into())
        })?;
        if (bundle.temperature() - cfg.temperature).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "bundle was built at T={}, run configured with T={}",
                bundle.temperature(),
                cfg.temperature
            )));
        }
        let keys: Vec<_> = train.iter().map(|s| s.key()).collect();
        bundle.check_covers(keys.iter())?;
    }
    let mut model: Model<F> = Model::init(student_spec, seed)?;
    let mut head = cfg
        .terms
        .comb
        .then(|| CombineHead::<F>::init(student_spec.n_classes, cfg.scalar_comb_bias));
    let objective = Objective::Student {
        bundle,
        terms: cfg.terms,
        temperature: cfg.temperature,
    };
    let (log, best_epoch, best_metric) =
        run_training(&mut model, &mut head, train, valid, classes, objective, cfg, seed)?;
    Ok(TrainedModel {
        model,
        head,
        log,
        best_epoch,
        best_metric,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_training<F: Real>(
    model: &mut Model<F>,
    head: &mut Option<CombineHead<F>>,
    train: &[SegmentedSeries],
    valid: &[SegmentedSeries],
    classes: &[String],
    objective: Objective<'_>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Vec<EpochRecord>, usize, f64)> {
    let mut sizes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    if let Some(h) = head.as_ref() {
        sizes.extend(h.params().iter().map(|t| t.len()));
    }
    let mut optimizer = Adam::<F>::new(cfg.lr, &sizes);
    let mut batch_rng =
        ChaCha20Rng::seed_from_u64(stable_hash64(&[&seed.to_le_bytes(), b"batch-order"]));

    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<Tensor<F>> = Vec::new();
    let mut best_head: Option<CombineHead<F>> = None;
    let mut epochs_since_best = 0usize;
    let mut steps_done = 0usize;

    let max_epochs = match cfg.iteration_unit {
        IterationUnit::Epochs => cfg.max_iterations,
        // generous upper bound; the step counter does the real limiting
        IterationUnit::Steps => cfg.max_iterations,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=max_epochs {
        order.shuffle(&mut batch_rng);
        let mut term_sums = [0.0f64; 5]; // att, hard, soft, comb, total
        let mut seen = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut tape = crate::autodiff::Tape::<F>::new();
            let nodes = model.register(&mut tape)?;
            let head_nodes = head.as_ref().map(|h| h.register(&mut tape));
            let mut totals = Vec::with_capacity(batch.len());

            for &idx in batch {
                let sample = &train[idx];
                let y = sample.one_hot();
                let fwd = model.forward_sample(&mut tape, &nodes, sample)?;
                match &objective {
                    Objective::Teacher { temperature } => {
                        let loss = teacher_loss(&mut tape, fwd.logits, &y, *temperature)?;
                        term_sums[1] += tape.value(loss).f64();
                        term_sums[4] += tape.value(loss).f64();
                        totals.push(loss);
                    }
                    Objective::Student {
                        bundle,
                        terms,
                        temperature,
                    } => {
                        let entry = if terms.needs_bundle() {
                            let key = sample.key();
                            Some(bundle.unwrap().get(&key).ok_or_else(|| {
                                Error::Config(format!("bundle is missing sample {key}"))
                            })?)
                        } else {
                            None
                        };
                        let parts = student_loss(
                            &mut tape,
                            &fwd,
                            &y,
                            entry,
                            head_nodes.as_ref(),
                            terms,
                            *temperature,
                        )?;
                        for (slot, node) in [
                            (0, parts.att),
                            (1, parts.hard),
                            (2, parts.soft),
                            (3, parts.comb),
                        ] {
                            if let Some(node) = node {
                                term_sums[slot] += tape.value(node).f64();
                            }
                        }
                        term_sums[4] += tape.value(parts.total).f64();
                        totals.push(parts.total);
                    }
                }
            }
            seen += batch.len();

            let stacked = tape.concat_scalars(&totals)?;
            let summed = tape.sum_all(stacked);
            let batch_loss = tape.scale(summed, F::from_f64c(1.0 / batch.len() as f64));
            let loss_value = tape.value(batch_loss).f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged to {loss_value} at seed {seed}, epoch {epoch}, step {}",
                    steps_done + 1
                )));
            }
            tape.backward(batch_loss)?;

            export_grads(&tape, &nodes.ordered, model);
            if let (Some(h), Some(hn)) = (head.as_mut(), head_nodes.as_ref()) {
                for (tensor, node) in h.params_mut().into_iter().zip([hn.w1, hn.w2, hn.bias]) {
                    let g = tape
                        .grad(node)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![F::zero(); tensor.len()]);
                    tensor.grad = Some(g);
                }
            }
            let mut params = model.params_mut();
            if let Some(h) = head.as_mut() {
                params.extend(h.params_mut());
            }
            optimizer.step(&mut params).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("{msg} (seed {seed}, epoch {epoch})"))
                }
                other => other,
            })?;
            steps_done += 1;
            if cfg.iteration_unit == IterationUnit::Steps && steps_done >= cfg.max_iterations {
                record_epoch(
                    &mut log, epoch, &term_sums, seen, model, head, valid, classes, cfg, seed,
                    &mut best_metric, &mut best_epoch, &mut best_params, &mut best_head,
                    &mut epochs_since_best,
                )?;
                break 'epochs;
            }
        }

        record_epoch(
            &mut log, epoch, &term_sums, seen, model, head, valid, classes, cfg, seed,
            &mut best_metric, &mut best_epoch, &mut best_params, &mut best_head,
            &mut epochs_since_best,
        )?;
        if epochs_since_best >= cfg.patience {
            break;
        }
    }

    // restore the best validation checkpoint
    if !best_params.is_empty() {
        for (tensor, saved) in model.params_mut().into_iter().zip(best_params) {
            *tensor = saved;
        }
        *head = best_head;
    }
    Ok((log, best_epoch, best_metric))
}

#[allow(clippy::too_many_arguments)]
fn record_epoch<F: Real>(
    log: &mut Vec<EpochRecord>,
    epoch: usize,
    term_sums: &[f64; 5],
    seen: usize,
    model: &Model<F>,
    head: &Option<CombineHead<F>>,
    valid: &[SegmentedSeries],
    classes: &[String],
    cfg: &RunConfig,
    seed: u64,
    best_metric: &mut f64,
    best_epoch: &mut usize,
    best_params: &mut Vec<Tensor<F>>,
    best_head: &mut Option<CombineHead<F>>,
    epochs_since_best: &mut usize,
) -> Result<()> {
    let n = seen.max(1) as f64;
    let eval = evaluate(model, head.as_ref(), valid, classes, seed)?;
    let metric = cfg.early_stop_metric.pick(&eval);
    log.push(EpochRecord {
        epoch,
        l_att: term_sums[0] / n,
        l_hard: term_sums[1] / n,
        l_soft: term_sums[2] / n,
        l_comb: term_sums[3] / n,
        l_total: term_sums[4] / n,
        valid_metric: metric,
    });
    if metric > *best_metric {
        *best_metric = metric;
        *best_epoch = epoch;
        *best_params = model.params().into_iter().cloned().collect();
        for t in best_params.iter_mut() {
            t.grad = None;
        }
        *best_head = head.clone();
        *epochs_since_best = 0;
    } else {
        *epochs_since_best += 1;
    }
    Ok(())
}

fn export_grads<F: Real>(
    tape: &crate::autodiff::Tape<F>,
    ordered: &[crate::autodiff::NodeId],
    model: &mut Model<F>,
) {
    for (tensor, &node) in model.params_mut().into_iter().zip(ordered) {
        let g = tape
            .grad(node)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![F::zero(); tensor.len()]);
        tensor.grad = Some(g);
    }
}

fn softmax_f64(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Per-sample predicted probabilities: the temperature-1 softmax of the
/// model logits, flattened row-major `[sample][class]`.
pub fn predict_probs<F: Real>(model: &Model<F>, data: &[SegmentedSeries]) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(data.len() * model.spec.n_classes);
    for sample in data {
        let out = model.infer(sample)?;
        let logits: Vec<f64> = out.logits.iter().map(|&v| v.f64()).collect();
        probs.extend(softmax_f64(&logits, 1.0));
    }
    Ok(probs)
}

/// Evaluates a model on a split. Predicted probabilities are always the
/// temperature-1 softmax of the logits; the combine head, when present,
/// is a training-time device and deliberately takes no part here.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    _head: Option<&CombineHead<F>>,
    data: &[SegmentedSeries],
    classes: &[String],
    seed: u64,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let probs = predict_probs(model, data)?;
    multiclass_aggregate(&probs, model.spec.n_classes, &labels, classes, seed)
}

/// Result of one student seed: evaluation on test plus the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub eval: EvalResult,
    pub best_epoch: usize,
    pub best_valid_metric: f64,
    pub log: Vec<EpochRecord>,
}

/// Mean and across-seed standard deviation per metric.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SummaryStats {
    pub roc_auc_mean: f64,
    pub roc_auc_std: f64,
    pub pr_auc_mean: f64,
    pub pr_auc_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub n_seeds: usize,
}

pub fn summarize(evals: &[EvalResult]) -> SummaryStats {
    let collect = |f: fn(&EvalResult) -> f64| -> Vec<f64> { evals.iter().map(f).collect() };
    let (roc_m, roc_s) = crate::util::mean_std(&collect(|e| e.roc_auc));
    let (pr_m, pr_s) = crate::util::mean_std(&collect(|e| e.pr_auc));
    let (f1_m, f1_s) = crate::util::mean_std(&collect(|e| e.macro_f1));
    SummaryStats {
        roc_auc_mean: roc_m,
        roc_auc_std: roc_s,
        pr_auc_mean: pr_m,
        pr_auc_std: pr_s,
        macro_f1_mean: f1_m,
        macro_f1_std: f1_s,
        n_seeds: evals.len(),
    }
}

/// Trains and evaluates one student per seed (optionally in parallel;
/// results are identical either way and ordered by `cfg.seeds`).
#[allow(clippy::too_many_arguments)]
pub fn run_students<F: Real>(
    student_spec: &ModelSpec,
    train: &[SegmentedSeries],
    valid: &[SegmentedSeries],
    test: &[SegmentedSeries],
    classes: &[String],
    bundle: Option<&DistillBundle>,
    cfg: &RunConfig,
    parallel: bool,
) -> Result<Vec<SeedOutcome>> {
    let run_one = |&seed: &u64| -> Result<SeedOutcome> {
        let trained: TrainedModel<F> =
            train_student(train, valid, classes, bundle, student_spec, cfg, seed)?;
        let eval = evaluate(&trained.model, trained.head.as_ref(), test, classes, seed)?;
        Ok(SeedOutcome {
            seed,
            eval,
            best_epoch: trained.best_epoch,
            best_valid_metric: trained.best_metric,
            log: trained.log,
        })
    };
    if parallel {
        cfg.seeds.par_iter().map(run_one).collect()
    } else {
        cfg.seeds.iter().map(run_one).collect()
    }
}

/// A rich-view split paired with its poor-view projection.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub rich: SplitDataset,
    pub poor: SplitDataset,
}
