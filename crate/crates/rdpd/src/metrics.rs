//! ROC-AUC (Mann–Whitney), PR-AUC (average precision), and macro-F1 at
//! threshold 0.5, with one-vs-rest macro averaging for multiclass runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Macro ROC-AUC over classes with both outcomes present.
    pub roc_auc: f64,
    /// Macro PR-AUC (average precision) over classes with both outcomes present.
    pub pr_auc: f64,
    /// Macro F1 at threshold 0.5 over all classes.
    pub macro_f1: f64,
    pub per_class: Vec<PerClassEval>,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassEval {
    pub class_index: usize,
    pub class_name: String,
    pub n_positive: usize,
    /// Absent when the class has a single outcome in the labels
    /// (undefined metric, reported as absent rather than 0).
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub f1: f64,
}

/// Mann–Whitney ROC-AUC: the fraction of (positive, negative) pairs
/// ranked correctly, ties counting one half.
pub fn roc_auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "roc_auc undefined: labels contain a single class".into(),
        ));
    }
    // average ranks with ties shared
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc)
}

/// Average precision: the step-wise integral of precision over recall,
/// walking thresholds downwards with tied scores grouped.
pub fn pr_auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "pr_auc undefined: labels contain a single class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut block_tp = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                block_tp += 1;
            }
            j += 1;
        }
        tp += block_tp;
        seen = j;
        if block_tp > 0 {
            let precision = tp as f64 / seen as f64;
            let recall_gain = block_tp as f64 / n_pos as f64;
            ap += precision * recall_gain;
        }
        i = j;
    }
    debug_assert_eq!(seen, scores.len());
    Ok(ap)
}

fn check_binary_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Data("empty score list".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("scores contain NaN/Inf".into()));
    }
    Ok(())
}

/// Macro F1 at threshold 0.5: per class, predict positive iff the class
/// probability exceeds 0.5; F1 counts 0 when precision+recall is 0;
/// averaged over all classes.
pub fn macro_f1(probs: &[f64], n_classes: usize, labels: &[usize]) -> Result<f64> {
    check_multiclass_inputs(probs, n_classes, labels)?;
    let mut total = 0.0;
    for class in 0..n_classes {
        total += f1_for_class(probs, n_classes, labels, class);
    }
    Ok(total / n_classes as f64)
}

fn f1_for_class(probs: &[f64], n_classes: usize, labels: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (i, &label) in labels.iter().enumerate() {
        let predicted = probs[i * n_classes + class] > 0.5;
        let actual = label == class;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn check_multiclass_inputs(probs: &[f64], n_classes: usize, labels: &[usize]) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if probs.len() != labels.len() * n_classes {
        return Err(Error::Shape(format!(
            "{} probabilities for {} samples x {n_classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Data(format!("label {bad} out of range [0,{n_classes})")));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("probabilities contain NaN/Inf".into()));
    }
    Ok(())
}

/// One-vs-rest evaluation: per-class AUCs macro-averaged over classes
/// with both outcomes present (others reported as absent), macro F1 over
/// all classes.
pub fn multiclass_aggregate(
    probs: &[f64],
    n_classes: usize,
    labels: &[usize],
    class_names: &[String],
    seed: u64,
) -> Result<EvalResult> {
    check_multiclass_inputs(probs, n_classes, labels)?;
    if class_names.len() != n_classes {
        return Err(Error::Config(format!(
            "{} class names for {n_classes} classes",
            class_names.len()
        )));
    }

    let mut per_class = Vec::with_capacity(n_classes);
    let mut roc_sum = 0.0;
    let mut pr_sum = 0.0;
    let mut included = 0usize;
    let mut f1_sum = 0.0;
    for class in 0..n_classes {
        let scores: Vec<f64> = (0..labels.len())
            .map(|i| probs[i * n_classes + class])
            .collect();
        let binary: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let n_positive = binary.iter().filter(|&&b| b).count();
        let both_present = n_positive > 0 && n_positive < labels.len();
        let (roc, pr) = if both_present {
            let roc = roc_auc_binary(&scores, &binary)?;
            let pr = pr_auc_binary(&scores, &binary)?;
            roc_sum += roc;
            pr_sum += pr;
            included += 1;
            (Some(roc), Some(pr))
        } else {
            (None, None)
        };
        let f1 = f1_for_class(probs, n_classes, labels, class);
        f1_sum += f1;
        per_class.push(PerClassEval {
            class_index: class,
            class_name: class_names[class].clone(),
            n_positive,
            roc_auc: roc,
            pr_auc: pr,
            f1,
        });
    }
    if included == 0 {
        return Err(Error::Data(
            "no class has both positive and negative samples; AUCs undefined".into(),
        ));
    }
    Ok(EvalResult {
        roc_auc: roc_sum / included as f64,
        pr_auc: pr_sum / included as f64,
        macro_f1: f1_sum / n_classes as f64,
        per_class,
        n_samples: labels.len(),
        seed,
    })
}
