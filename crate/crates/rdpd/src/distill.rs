//! Imitation losses and the combined-label head.
//!
//! The student objective is an unweighted sum of up to four terms:
//! attention KL against the frozen teacher attention, cross-entropy
//! against hard labels, temperature-softened cross-entropy against the
//! teacher's soft labels (scaled by T^2 to keep gradient magnitudes
//! comparable across temperatures), and cross-entropy of a learnable
//! blend of the student's own hard and soft predictions.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, DIST_SUM_TOL};
use crate::data::SampleKey;
use crate::error::{Error, Result};
use crate::model::ForwardNodes;
use crate::real::Real;
use crate::tensor::Tensor;

/// Which loss terms a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTermSet {
    pub att: bool,
    pub hard: bool,
    pub soft: bool,
    pub comb: bool,
}

impl LossTermSet {
    /// Hard labels only.
    pub const DIRECT: LossTermSet = LossTermSet {
        att: false,
        hard: true,
        soft: false,
        comb: false,
    };
    /// Hard + soft labels.
    pub const KD: LossTermSet = LossTermSet {
        att: false,
        hard: true,
        soft: true,
        comb: false,
    };
    /// Hard + soft + combined labels (no attention imitation).
    pub const RDPD_R1: LossTermSet = LossTermSet {
        att: false,
        hard: true,
        soft: true,
        comb: true,
    };
    /// Attention + hard + soft (no combined labels).
    pub const RDPD_R2: LossTermSet = LossTermSet {
        att: true,
        hard: true,
        soft: true,
        comb: false,
    };
    /// All four terms.
    pub const RDPD: LossTermSet = LossTermSet {
        att: true,
        hard: true,
        soft: true,
        comb: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.att || self.hard || self.soft || self.comb) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(())
    }

    /// True when the run needs frozen teacher outputs.
    pub fn needs_bundle(&self) -> bool {
        self.att || self.soft || self.comb
    }
}

/// Frozen teacher outputs for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    /// Teacher soft labels at the bundle temperature, length C.
    pub soft: Vec<f64>,
    /// Teacher attention over segments, length M.
    pub attention: Vec<f64>,
}

/// Per-sample teacher soft labels and attention, computed once after
/// teacher training and never updated afterwards. Reads are counted so
/// that ablations can prove they never touched it.
#[derive(Debug)]
pub struct DistillBundle {
    temperature: f64,
    entries: BTreeMap<SampleKey, BundleEntry>,
    reads: AtomicU64,
}

impl DistillBundle {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "bundle temperature must be > 0, got {temperature}"
            )));
        }
        Ok(DistillBundle {
            temperature,
            entries: BTreeMap::new(),
            reads: AtomicU64::new(0),
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: SampleKey, entry: BundleEntry) -> Result<()> {
        validate_distribution(&entry.soft, "bundle soft labels")?;
        validate_distribution(&entry.attention, "bundle attention")?;
        self.entries.insert(key, entry);
        Ok(())
    }

    /// Fetches a sample's frozen teacher outputs, counting the access.
    pub fn get(&self, key: &SampleKey) -> Option<&BundleEntry> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.entries.get(key)
    }

    /// Number of reads served so far (ablation contract checks).
    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Keys in deterministic order (serialization, coverage checks).
    pub fn keys(&self) -> impl Iterator<Item = &SampleKey> {
        self.entries.keys()
    }

    /// Errors with the missing sample ids if any key lacks an entry.
    pub fn check_covers<'a>(&self, keys: impl Iterator<Item = &'a SampleKey>) -> Result<()> {
        let missing: Vec<String> = keys
            .filter(|k| !self.entries.contains_key(k))
            .map(|k| k.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "bundle is missing {} sample(s): {}",
                missing.len(),
                missing.join(", ")
            )))
        }
    }
}

fn validate_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < -DIST_SUM_TOL) || (sum - 1.0).abs() > DIST_SUM_TOL {
        return Err(Error::Domain(format!(
            "{what} is not a distribution (sum {sum})"
        )));
    }
    Ok(())
}

/// Learnable blend `softmax(w1*P1 + w2*PT + b, 1)`; `b` is per-class by
/// default, with a broadcast-scalar compatibility mode.
#[derive(Debug, Clone)]
pub struct CombineHead<F: Real> {
    pub w1: Tensor<F>,
    pub w2: Tensor<F>,
    pub bias: Tensor<F>,
    pub scalar_bias: bool,
    pub n_classes: usize,
}

impl<F: Real> CombineHead<F> {
    /// Unbiased blend start: w1 = w2 = 0.5, b = 0.
    pub fn init(n_classes: usize, scalar_bias: bool) -> Self {
        let half = F::from_f64c(0.5);
        let bias_shape = if scalar_bias { vec![1] } else { vec![n_classes] };
        CombineHead {
            w1: Tensor::scalar(half),
            w2: Tensor::scalar(half),
            bias: Tensor::zeros(&bias_shape),
            scalar_bias,
            n_classes,
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        vec!["head.w1", "head.w2", "head.bias"]
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        vec![&self.w1, &self.w2, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![&mut self.w1, &mut self.w2, &mut self.bias]
    }

    pub fn register(&self, tape: &mut Tape<F>) -> HeadNodes {
        HeadNodes {
            w1: tape.param(&self.w1),
            w2: tape.param(&self.w2),
            bias: tape.param(&self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub w1: NodeId,
    pub w2: NodeId,
    pub bias: NodeId,
}

/// Teacher objective: cross-entropy of the hard label against the
/// temperature-T softmax of the teacher logits.
pub fn teacher_loss<F: Real>(
    tape: &mut Tape<F>,
    logits: NodeId,
    y: &[f64],
    temperature: f64,
) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "teacher temperature must be > 0, got {temperature}"
        )));
    }
    let y_leaf = one_hot_leaf(tape, y)?;
    let probs = tape.softmax_t(logits, F::from_f64c(temperature))?;
    tape.cross_entropy(y_leaf, probs)
}

/// Attention imitation: `KL(A_student || A_teacher)` with the teacher
/// attention frozen. Student and teacher must segment identically.
pub fn attention_loss<F: Real>(
    tape: &mut Tape<F>,
    student_attention: NodeId,
    teacher_attention: &[f64],
) -> Result<NodeId> {
    let m = tape.data(student_attention).len();
    if m != teacher_attention.len() {
        return Err(Error::Alignment(format!(
            "student attends over {m} segments, teacher over {}; segmentation configs differ",
            teacher_attention.len()
        )));
    }
    let teacher = tape.leaf(
        teacher_attention.iter().map(|&v| F::from_f64c(v)).collect(),
        &[m],
    )?;
    let flat = tape.reshape(student_attention, &[m])?;
    tape.kl_divergence(flat, teacher)
}

/// Hard-label term: cross-entropy of the label against the plain
/// (temperature 1) softmax of the student logits.
pub fn hard_loss<F: Real>(tape: &mut Tape<F>, logits: NodeId, y: &[f64]) -> Result<NodeId> {
    let y_leaf = one_hot_leaf(tape, y)?;
    let probs = tape.softmax_t(logits, F::one())?;
    tape.cross_entropy(y_leaf, probs)
}

/// Soft-label term: `T^2 * CE(P_teacher_T, softmax(logits, T))`. The T^2
/// factor compensates the 1/T^2 gradient attenuation of the softened
/// softmax so the term keeps its weight as T grows.
pub fn soft_loss<F: Real>(
    tape: &mut Tape<F>,
    logits: NodeId,
    teacher_soft: &[f64],
    temperature: f64,
) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "soft-loss temperature must be > 0, got {temperature}"
        )));
    }
    let t = F::from_f64c(temperature);
    let target = tape.leaf(
        teacher_soft.iter().map(|&v| F::from_f64c(v)).collect(),
        &[teacher_soft.len()],
    )?;
    let student_soft = tape.softmax_t(logits, t)?;
    let ce = tape.cross_entropy(target, student_soft)?;
    Ok(tape.scale(ce, t * t))
}

/// Combined label: `softmax(w1*P1 + w2*PT + b, 1)`. Gradients reach the
/// head parameters and both input distributions.
pub fn combined_label<F: Real>(
    tape: &mut Tape<F>,
    p1: NodeId,
    pt: NodeId,
    head: &HeadNodes,
) -> Result<NodeId> {
    let shape = tape.shape(p1).to_vec();
    let a = tape.scalar_mul(head.w1, p1)?;
    let b = tape.scalar_mul(head.w2, pt)?;
    let mix = tape.add(a, b)?;
    let biased = if tape.data(head.bias).len() == 1 {
        // broadcast-scalar bias: adding a constant to every logit leaves
        // the softmax unchanged, kept for head-shape compatibility
        let n: usize = shape.iter().product();
        let ones = tape.leaf(vec![F::one(); n], &shape)?;
        let spread = tape.scalar_mul(head.bias, ones)?;
        tape.add(mix, spread)?
    } else {
        let bias = tape.reshape(head.bias, &shape)?;
        tape.add(mix, bias)?
    };
    tape.softmax_t(biased, F::one())
}

/// Combined-label term: cross-entropy of the hard label against the blend.
pub fn comb_loss<F: Real>(tape: &mut Tape<F>, p_comb: NodeId, y: &[f64]) -> Result<NodeId> {
    let y_leaf = one_hot_leaf(tape, y)?;
    tape.cross_entropy(y_leaf, p_comb)
}

/// Per-term scalar nodes of one sample's student loss. Disabled terms are
/// `None` and allocate nothing on the tape.
#[derive(Debug, Clone, Copy, Default)]
pub struct StudentLossNodes {
    pub att: Option<NodeId>,
    pub hard: Option<NodeId>,
    pub soft: Option<NodeId>,
    pub comb: Option<NodeId>,
    pub total: NodeId,
}

/// Builds the enabled loss terms for one sample and sums them with unit
/// weights. Terms that need teacher outputs require a bundle entry.
pub fn student_loss<F: Real>(
    tape: &mut Tape<F>,
    fwd: &ForwardNodes,
    y: &[f64],
    bundle_entry: Option<&BundleEntry>,
    head: Option<&HeadNodes>,
    terms: &LossTermSet,
    temperature: f64,
) -> Result<StudentLossNodes> {
    terms.validate()?;
    if terms.needs_bundle() && bundle_entry.is_none() {
        return Err(Error::Config(
            "enabled loss terms need teacher outputs but no bundle entry was supplied".into(),
        ));
    }
    if terms.comb && head.is_none() {
        return Err(Error::Config(
            "combined-label term enabled but no combine head supplied".into(),
        ));
    }

    let mut out = StudentLossNodes::default();
    let mut parts: Vec<NodeId> = Vec::with_capacity(4);

    if terms.att {
        let entry = bundle_entry.unwrap();
        let att = attention_loss(tape, fwd.attention, &entry.attention)?;
        out.att = Some(att);
        parts.push(att);
    }
    if terms.hard {
        let hard = hard_loss(tape, fwd.logits, y)?;
        out.hard = Some(hard);
        parts.push(hard);
    }
    if terms.soft {
        let entry = bundle_entry.unwrap();
        let soft = soft_loss(tape, fwd.logits, &entry.soft, temperature)?;
        out.soft = Some(soft);
        parts.push(soft);
    }
    if terms.comb {
        let entry = bundle_entry.unwrap();
        let _ = entry; // the blend uses only the student's own predictions
        let p1 = tape.softmax_t(fwd.logits, F::one())?;
        let pt = tape.softmax_t(fwd.logits, F::from_f64c(temperature))?;
        let p_comb = combined_label(tape, p1, pt, head.unwrap())?;
        let comb = comb_loss(tape, p_comb, y)?;
        out.comb = Some(comb);
        parts.push(comb);
    }

    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    out.total = total;
    Ok(out)
}

fn one_hot_leaf<F: Real>(tape: &mut Tape<F>, y: &[f64]) -> Result<NodeId> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != y.len() {
        return Err(Error::Data(format!("label {y:?} is not one-hot")));
    }
    tape.leaf(y.iter().map(|&v| F::from_f64c(v)).collect(), &[y.len()])
}
