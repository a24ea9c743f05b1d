//! The shared teacher/student architecture: per-segment 1-D convolution
//! with mean pooling, a bidirectional LSTM across segments, self-attention
//! pooling over segment states, and a dense classification head.

use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::SegmentedSeries;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Architecture description; parameter shapes are a pure function of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input channels D.
    pub n_channels: usize,
    /// Segments per window M.
    pub n_segments: usize,
    /// Steps per segment S.
    pub segment_len: usize,
    /// Convolution filters K.
    pub n_filters: usize,
    /// Filter width w.
    pub filter_width: usize,
    pub stride: usize,
    /// Total LSTM width U; each direction runs U/2 units.
    pub n_hidden: usize,
    /// Output classes C.
    pub n_classes: usize,
    /// The dense layer carries a bias unless disabled.
    pub dense_bias: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_channels", self.n_channels),
            ("n_segments", self.n_segments),
            ("segment_len", self.segment_len),
            ("n_filters", self.n_filters),
            ("filter_width", self.filter_width),
            ("stride", self.stride),
            ("n_hidden", self.n_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("spec field {name} must be positive")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config("spec needs at least 2 classes".into()));
        }
        if self.filter_width > self.segment_len {
            return Err(Error::Config(format!(
                "filter width {} exceeds segment length {}",
                self.filter_width, self.segment_len
            )));
        }
        if self.n_hidden % 2 != 0 {
            return Err(Error::Config(format!(
                "n_hidden must be even to split across two LSTM directions, got {}",
                self.n_hidden
            )));
        }
        Ok(())
    }

    /// Convolution output length per segment: floor((S-w)/stride) + 1.
    pub fn conv_out_len(&self) -> usize {
        (self.segment_len - self.filter_width) / self.stride + 1
    }

    /// Exact number of scalar parameters a model with this spec carries.
    pub fn param_count(&self) -> usize {
        let u = self.n_hidden / 2;
        let conv = self.n_filters * self.filter_width * self.n_channels + self.n_filters;
        let per_direction = self.n_filters * 4 * u + u * 4 * u + 4 * u;
        let attention = self.n_hidden;
        let dense = self.n_hidden * self.n_classes
            + if self.dense_bias { self.n_classes } else { 0 };
        conv + 2 * per_direction + attention + dense
    }

    /// Student spec for a poor view of `d_p` channels: filters and hidden
    /// units shrink proportionally to the channel ratio (`K_p/K_r ≈
    /// U_p/U_r ≈ D_p/D_r`), filter width, stride, segmentation, and class
    /// count stay unchanged. Hidden units land on the nearest even value
    /// (ties round up), at least 2.
    pub fn derive_student(&self, d_p: usize) -> Result<ModelSpec> {
        if d_p == 0 {
            return Err(Error::Usage("student channel count must be positive".into()));
        }
        if d_p >= self.n_channels {
            return Err(Error::Usage(format!(
                "student must see fewer channels than the teacher ({d_p} >= {})",
                self.n_channels
            )));
        }
        let ratio = d_p as f64 / self.n_channels as f64;
        let k_p = ((self.n_filters as f64 * ratio).round() as usize).max(1);
        let u_p = ((self.n_hidden as f64 * ratio / 2.0).round() as usize).max(1) * 2;
        Ok(ModelSpec {
            n_channels: d_p,
            n_filters: k_p,
            n_hidden: u_p,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone)]
pub struct LstmDirection<F: Real> {
    /// `[K, 4u]`, gate order i, f, g, o.
    pub w_x: Tensor<F>,
    /// `[u, 4u]`.
    pub w_h: Tensor<F>,
    /// `[4u]`; forget-gate block initialized to 1.
    pub bias: Tensor<F>,
}

/// A fully materialized model: spec plus trained parameters.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub spec: ModelSpec,
    pub conv_w: Tensor<F>,
    pub conv_b: Tensor<F>,
    pub lstm_fwd: LstmDirection<F>,
    pub lstm_bwd: LstmDirection<F>,
    pub att_w: Tensor<F>,
    pub dense_w: Tensor<F>,
    pub dense_b: Option<Tensor<F>>,
}

/// Attention weights and logits of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<F: Real> {
    /// Distribution over the M segments.
    pub attention: Vec<F>,
    /// Unnormalized class scores, length C.
    pub logits: Vec<F>,
}

/// Tape handles for one registration of a model's parameters.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub conv_w: NodeId,
    pub conv_b: NodeId,
    pub fwd: LstmNodes,
    pub bwd: LstmNodes,
    pub att_w: NodeId,
    pub dense_w: NodeId,
    pub dense_b: Option<NodeId>,
    /// Raw parameter nodes in [`Model::param_names`] order, for gradient export.
    pub ordered: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct LstmNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    /// Bias already reshaped to a `[1, 4u]` row.
    pub bias_row: NodeId,
}

/// Attention and logits node handles of one on-tape forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    /// `[M, 1]` distribution over segments.
    pub attention: NodeId,
    /// `[1, C]` logits.
    pub logits: NodeId,
}

fn xavier<F: Real>(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new(F::from_f64c(-bound), F::from_f64c(bound)).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| rng.sample(&dist)).collect();
    Tensor::new(data, shape).unwrap()
}

impl<F: Real> Model<F> {
    /// Deterministic initialization from a seed: uniform
    /// `±sqrt(6/(fan_in+fan_out))` weights, zero biases except the LSTM
    /// forget gates at 1.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (d, k, w) = (spec.n_channels, spec.n_filters, spec.filter_width);
        let u = spec.n_hidden / 2;

        let conv_w = xavier(&mut rng, &[k, w, d], w * d, k);
        let conv_b = Tensor::zeros(&[k]);
        let direction = |rng: &mut ChaCha20Rng| -> LstmDirection<F> {
            let w_x = xavier(rng, &[k, 4 * u], k, 4 * u);
            let w_h = xavier(rng, &[u, 4 * u], u, 4 * u);
            let mut bias = Tensor::zeros(&[4 * u]);
            for i in u..2 * u {
                bias.data[i] = F::one();
            }
            LstmDirection { w_x, w_h, bias }
        };
        let lstm_fwd = direction(&mut rng);
        let lstm_bwd = direction(&mut rng);
        let att_w = xavier(&mut rng, &[spec.n_hidden, 1], spec.n_hidden, 1);
        let dense_w = xavier(&mut rng, &[spec.n_hidden, spec.n_classes], spec.n_hidden, spec.n_classes);
        let dense_b = spec.dense_bias.then(|| Tensor::zeros(&[spec.n_classes]));

        Ok(Model {
            spec: spec.clone(),
            conv_w,
            conv_b,
            lstm_fwd,
            lstm_bwd,
            att_w,
            dense_w,
            dense_b,
        })
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = vec![
            "conv.weight",
            "conv.bias",
            "lstm_fwd.w_x",
            "lstm_fwd.w_h",
            "lstm_fwd.bias",
            "lstm_bwd.w_x",
            "lstm_bwd.w_h",
            "lstm_bwd.bias",
            "attention.weight",
            "dense.weight",
        ];
        if self.dense_b.is_some() {
            names.push("dense.bias");
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut ps = vec![
            &self.conv_w,
            &self.conv_b,
            &self.lstm_fwd.w_x,
            &self.lstm_fwd.w_h,
            &self.lstm_fwd.bias,
            &self.lstm_bwd.w_x,
            &self.lstm_bwd.w_h,
            &self.lstm_bwd.bias,
            &self.att_w,
            &self.dense_w,
        ];
        if let Some(b) = &self.dense_b {
            ps.push(b);
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut ps = vec![
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.lstm_fwd.w_x,
            &mut self.lstm_fwd.w_h,
            &mut self.lstm_fwd.bias,
            &mut self.lstm_bwd.w_x,
            &mut self.lstm_bwd.w_h,
            &mut self.lstm_bwd.bias,
            &mut self.att_w,
            &mut self.dense_w,
        ];
        if let Some(b) = &mut self.dense_b {
            ps.push(b);
        }
        ps
    }

    pub fn param_count(&self) -> usize {
        debug_assert_eq!(
            self.params().iter().map(|t| t.len()).sum::<usize>(),
            self.spec.param_count()
        );
        self.spec.param_count()
    }

    /// Registers every parameter on the tape (once per tape; the handles
    /// are reused across the samples of a batch).
    pub fn register(&self, tape: &mut Tape<F>) -> Result<ModelNodes> {
        let u = self.spec.n_hidden / 2;
        let conv_w = tape.param(&self.conv_w);
        let conv_b = tape.param(&self.conv_b);
        let direction = |tape: &mut Tape<F>, dir: &LstmDirection<F>| -> Result<(NodeId, LstmNodes)> {
            let w_x = tape.param(&dir.w_x);
            let w_h = tape.param(&dir.w_h);
            let bias = tape.param(&dir.bias);
            let bias_row = tape.reshape(bias, &[1, 4 * u])?;
            Ok((bias, LstmNodes { w_x, w_h, bias_row }))
        };
        let (fwd_bias, fwd) = direction(tape, &self.lstm_fwd)?;
        let (bwd_bias, bwd) = direction(tape, &self.lstm_bwd)?;
        let att_w = tape.param(&self.att_w);
        let dense_w = tape.param(&self.dense_w);
        let dense_b = match &self.dense_b {
            Some(b) => Some(tape.param(b)),
            None => None,
        };
        let mut ordered = vec![
            conv_w, conv_b, fwd.w_x, fwd.w_h, fwd_bias, bwd.w_x, bwd.w_h, bwd_bias, att_w, dense_w,
        ];
        if let Some(b) = dense_b {
            ordered.push(b);
        }
        Ok(ModelNodes {
            conv_w,
            conv_b,
            fwd,
            bwd,
            att_w,
            dense_w,
            dense_b,
            ordered,
        })
    }

    /// Puts a sample on the tape as a constant `[M, S, D]` leaf.
    pub fn sample_leaf(&self, tape: &mut Tape<F>, x: &SegmentedSeries) -> Result<NodeId> {
        if x.n_channels != self.spec.n_channels {
            return Err(Error::Shape(format!(
                "sample has {} channels, model expects {}",
                x.n_channels, self.spec.n_channels
            )));
        }
        if x.n_segments != self.spec.n_segments || x.segment_len != self.spec.segment_len {
            return Err(Error::Shape(format!(
                "sample segmentation {}x{} does not match model {}x{}",
                x.n_segments, x.segment_len, self.spec.n_segments, self.spec.segment_len
            )));
        }
        let data: Vec<F> = x.values.iter().map(|&v| F::from_f64c(v)).collect();
        tape.leaf(data, &[x.n_segments, x.segment_len, x.n_channels])
    }

    /// Shared-filter encoding of every segment: conv + mean pool per
    /// segment, stacked to `[M, K]`. Row j depends only on segment j.
    pub fn encode_segments(
        &self,
        tape: &mut Tape<F>,
        nodes: &ModelNodes,
        x_leaf: NodeId,
    ) -> Result<NodeId> {
        let (m, s, d) = (self.spec.n_segments, self.spec.segment_len, self.spec.n_channels);
        let mut rows = Vec::with_capacity(m);
        for j in 0..m {
            let seg = tape.slice(x_leaf, j * s * d, (j + 1) * s * d, &[s, d])?;
            let conv = tape.conv1d(seg, nodes.conv_w, nodes.conv_b, self.spec.stride)?;
            rows.push(tape.mean_rows(conv)?);
        }
        tape.concat_rows(&rows)
    }

    /// Bidirectional LSTM over segment encodings `[M, K] -> [M, U]`:
    /// U/2 units per direction, zero initial states, outputs concatenated
    /// per step.
    pub fn bilstm(&self, tape: &mut Tape<F>, nodes: &ModelNodes, h: NodeId) -> Result<NodeId> {
        let m = self.spec.n_segments;
        let fwd = self.lstm_direction(tape, &nodes.fwd, h, (0..m).collect())?;
        let bwd = self.lstm_direction(tape, &nodes.bwd, h, (0..m).rev().collect())?;
        let mut rows = Vec::with_capacity(m);
        for step in 0..m {
            // the backward pass visited rows in reverse, so its state for
            // row `step` sits at position m-1-step
            rows.push(tape.concat_cols(&[fwd[step], bwd[m - 1 - step]])?);
        }
        tape.concat_rows(&rows)
    }

    /// One direction's state sequence; `order[i]` is the input row visited
    /// at step i and the returned vector is indexed by visit order.
    fn lstm_direction(
        &self,
        tape: &mut Tape<F>,
        dir: &LstmNodes,
        h: NodeId,
        order: Vec<usize>,
    ) -> Result<Vec<NodeId>> {
        let u = self.spec.n_hidden / 2;
        let mut h_prev = tape.leaf(vec![F::zero(); u], &[1, u])?;
        let mut c_prev = tape.leaf(vec![F::zero(); u], &[1, u])?;
        let mut states = Vec::with_capacity(order.len());
        for &row in &order {
            let x_t = tape.slice_row(h, row)?;
            let xw = tape.matmul(x_t, dir.w_x)?;
            let hw = tape.matmul(h_prev, dir.w_h)?;
            let pre = tape.add(xw, hw)?;
            let gates = tape.add(pre, dir.bias_row)?;
            let i_lin = tape.slice(gates, 0, u, &[1, u])?;
            let f_lin = tape.slice(gates, u, 2 * u, &[1, u])?;
            let g_lin = tape.slice(gates, 2 * u, 3 * u, &[1, u])?;
            let o_lin = tape.slice(gates, 3 * u, 4 * u, &[1, u])?;
            let i = tape.sigmoid(i_lin);
            let f = tape.sigmoid(f_lin);
            let g = tape.tanh(g_lin);
            let o = tape.sigmoid(o_lin);
            let keep = tape.mul(f, c_prev)?;
            let write = tape.mul(i, g)?;
            let c = tape.add(keep, write)?;
            let c_act = tape.tanh(c);
            let h_t = tape.mul(o, c_act)?;
            states.push(h_t);
            h_prev = h_t;
            c_prev = c;
        }
        Ok(states)
    }

    /// Full forward pass: returns the `[M,1]` attention distribution and
    /// `[1,C]` logits as tape nodes.
    pub fn forward_from_leaf(
        &self,
        tape: &mut Tape<F>,
        nodes: &ModelNodes,
        x_leaf: NodeId,
    ) -> Result<ForwardNodes> {
        let h = self.encode_segments(tape, nodes, x_leaf)?;
        let q = self.bilstm(tape, nodes, h)?;
        let (attention, pooled) = attend(tape, q, nodes.att_w)?;
        let mut logits = tape.matmul(pooled, nodes.dense_w)?;
        if let Some(b) = nodes.dense_b {
            let b_row = tape.reshape(b, &[1, self.spec.n_classes])?;
            logits = tape.add(logits, b_row)?;
        }
        Ok(ForwardNodes { attention, logits })
    }

    pub fn forward_sample(
        &self,
        tape: &mut Tape<F>,
        nodes: &ModelNodes,
        x: &SegmentedSeries,
    ) -> Result<ForwardNodes> {
        let leaf = self.sample_leaf(tape, x)?;
        self.forward_from_leaf(tape, nodes, leaf)
    }

    /// Evaluation-only forward pass on a private tape.
    pub fn infer(&self, x: &SegmentedSeries) -> Result<ForwardOutput<F>> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let fwd = self.forward_sample(&mut tape, &nodes, x)?;
        Ok(ForwardOutput {
            attention: tape.data(fwd.attention).to_vec(),
            logits: tape.data(fwd.logits).to_vec(),
        })
    }
}

/// Self-attention pooling: `A = softmax(Q W)` over segments (plain
/// softmax, temperature 1) and `G = A^T Q`.
pub fn attend<F: Real>(tape: &mut Tape<F>, q: NodeId, att_w: NodeId) -> Result<(NodeId, NodeId)> {
    let scores = tape.matmul(q, att_w)?;
    let a = tape.softmax_t(scores, F::one())?;
    let m = tape.shape(a)[0];
    let a_row = tape.reshape(a, &[1, m])?;
    let g = tape.matmul(a_row, q)?;
    Ok((a, g))
}
