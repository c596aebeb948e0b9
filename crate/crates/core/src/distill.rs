//! Transformer-layer distillation: attention and hidden-state MSE losses,
//! layer-mapping strategies, student initialization from the teacher, and
//! the frozen-parameter policy.
//!
//! Both losses are masked means: padded query rows and padded key columns
//! (attention), and padded positions (hidden states), never contribute.
//! Per-pair losses are summed, not averaged, over a multi-pair mapping.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::compute::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::model::{AttnSource, EncoderModel, ForwardTrace};

/// Ordered (student_layer, teacher_layer) pairs, 1-indexed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMapping {
    pairs: Vec<(usize, usize)>,
}

impl LayerMapping {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("layer mapping cannot be empty".to_string()));
        }
        for window in pairs.windows(2) {
            if window[1].0 <= window[0].0 {
                return Err(Error::Config(format!(
                    "student layers must be strictly increasing, got {:?} then {:?}",
                    window[0], window[1]
                )));
            }
            if window[1].1 <= window[0].1 {
                return Err(Error::Config(format!(
                    "teacher layers must be strictly increasing, got {:?} then {:?}",
                    window[0], window[1]
                )));
            }
        }
        if pairs.iter().any(|&(s, t)| s == 0 || t == 0) {
            return Err(Error::Config("layer indices are 1-indexed".to_string()));
        }
        Ok(LayerMapping { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Largest indices referenced, (student, teacher).
    pub fn max_layers(&self) -> (usize, usize) {
        self.pairs
            .iter()
            .fold((0, 0), |(ms, mt), &(s, t)| (ms.max(s), mt.max(t)))
    }
}

/// Layer-mapping strategies: match only the top layers, or evenly spaced
/// teacher layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingStrategy {
    Top,
    Uniform,
}

/// top -> [(L_S, L_T)]; uniform -> [(i, i*L_T/L_S)] for i in 1..=L_S,
/// which requires L_T divisible by L_S.
pub fn build_mapping(
    strategy: MappingStrategy,
    student_layers: usize,
    teacher_layers: usize,
) -> Result<LayerMapping> {
    if student_layers == 0 || student_layers > teacher_layers {
        return Err(Error::Config(format!(
            "need 1 <= student layers ({student_layers}) <= teacher layers ({teacher_layers})"
        )));
    }
    match strategy {
        MappingStrategy::Top => LayerMapping::new(vec![(student_layers, teacher_layers)]),
        MappingStrategy::Uniform => {
            if teacher_layers % student_layers != 0 {
                return Err(Error::Config(format!(
                    "uniform mapping requires teacher depth {teacher_layers} divisible by student depth {student_layers}"
                )));
            }
            let stride = teacher_layers / student_layers;
            LayerMapping::new((1..=student_layers).map(|i| (i, i * stride)).collect())
        }
    }
}

/// Everything a distillation run needs to know: which layers to match,
/// which attention tensor to read, what stays frozen, and the loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    pub mapping: LayerMapping,
    pub attn_source: AttnSource,
    pub frozen: BTreeSet<String>,
    pub loss_weights: (f64, f64),
}

impl DistillPlan {
    pub fn new(mapping: LayerMapping, attn_source: AttnSource, frozen: BTreeSet<String>) -> Self {
        DistillPlan {
            mapping,
            attn_source,
            frozen,
            loss_weights: (1.0, 1.0),
        }
    }

    /// Check the plan against the student it will train.
    pub fn validate(&self, student: &EncoderModel, teacher: &EncoderModel) -> Result<()> {
        let (max_s, max_t) = self.mapping.max_layers();
        if max_s > student.config().num_layers {
            return Err(Error::Config(format!(
                "mapping references student layer {max_s} but the student has {}",
                student.config().num_layers
            )));
        }
        if max_t > teacher.config().num_layers {
            return Err(Error::Config(format!(
                "mapping references teacher layer {max_t} but the teacher has {}",
                teacher.config().num_layers
            )));
        }
        for name in &self.frozen {
            if student.param(name).is_none() {
                return Err(Error::Config(format!(
                    "frozen parameter {name} does not exist in the student"
                )));
            }
        }
        let (w_attn, w_hidn) = self.loss_weights;
        if w_attn < 0.0 || w_hidn < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got ({w_attn}, {w_hidn})"
            )));
        }
        Ok(())
    }
}

/// Which parameters stay out of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    Embeddings,
    None,
}

/// embeddings -> the three embedding tables plus the embedding layer-norm
/// gain and bias; none -> empty set.
pub fn frozen_parameter_set(model: &EncoderModel, policy: FreezePolicy) -> BTreeSet<String> {
    match policy {
        FreezePolicy::None => BTreeSet::new(),
        FreezePolicy::Embeddings => model
            .params()
            .keys()
            .filter(|name| name.starts_with("embedding."))
            .cloned()
            .collect(),
    }
}

/// Squared difference between two equally shaped graph tensors, weighted by
/// a constant 0/1 mask, normalized by the mask's total weight.
fn masked_mse(
    g: &mut Graph,
    a: TensorId,
    b: TensorId,
    weights: Vec<f64>,
    shape: Vec<usize>,
) -> Result<TensorId> {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::Data(
            "masked mse: no valid positions to average over".to_string(),
        ));
    }
    let w = g.constant(shape, weights)?;
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, w)?;
    let summed = g.sum(weighted);
    Ok(g.scale(summed, 1.0 / total))
}

fn check_attn_shapes(g: &Graph, attn_s: TensorId, attn_t: TensorId) -> Result<(usize, usize, usize)> {
    let ss = g.shape(attn_s).to_vec();
    let ts = g.shape(attn_t).to_vec();
    if ss.len() != 4 || ts.len() != 4 {
        return Err(Error::Shape {
            context: "attention tensors must be [b,h,n,n]".to_string(),
            lhs: ss,
            rhs: ts,
        });
    }
    if ss[1] != ts[1] {
        return Err(Error::Config(format!(
            "attention head count mismatch: student has {}, teacher has {}; student and teacher must share the head count",
            ss[1], ts[1]
        )));
    }
    if ss != ts {
        return Err(Error::Shape {
            context: "attention tensors must agree in batch and length".to_string(),
            lhs: ss,
            rhs: ts,
        });
    }
    Ok((ss[0], ss[1], ss[2]))
}

/// Mean over heads of the MSE between student and teacher attention
/// matrices, averaging over batch and valid (query, key) cells only.
pub fn attention_loss(
    g: &mut Graph,
    attn_s: TensorId,
    attn_t: TensorId,
    mask: &[u8],
) -> Result<TensorId> {
    let (b, h, n) = check_attn_shapes(g, attn_s, attn_t)?;
    if mask.len() != b * n {
        return Err(Error::Shape {
            context: "attention loss mask must be [b,n]".to_string(),
            lhs: vec![mask.len()],
            rhs: vec![b * n],
        });
    }
    let mut weights = vec![0.0; b * h * n * n];
    for s in 0..b {
        let mrow = &mask[s * n..(s + 1) * n];
        for i in 0..h {
            for q in 0..n {
                if mrow[q] == 0 {
                    continue;
                }
                let base = ((s * h + i) * n + q) * n;
                for (k, &mk) in mrow.iter().enumerate() {
                    if mk == 1 {
                        weights[base + k] = 1.0;
                    }
                }
            }
        }
    }
    masked_mse(g, attn_s, attn_t, weights, vec![b, h, n, n])
}

/// MSE between student and teacher hidden states over batch, valid
/// positions, and the full hidden dimension.
pub fn hidden_loss(
    g: &mut Graph,
    hidden_s: TensorId,
    hidden_t: TensorId,
    mask: &[u8],
) -> Result<TensorId> {
    let ss = g.shape(hidden_s).to_vec();
    let ts = g.shape(hidden_t).to_vec();
    if ss.len() != 3 || ts.len() != 3 {
        return Err(Error::Shape {
            context: "hidden states must be [b,n,d]".to_string(),
            lhs: ss,
            rhs: ts,
        });
    }
    if ss[2] != ts[2] {
        return Err(Error::Config(format!(
            "hidden size mismatch: student {} vs teacher {}; width projections are out of scope, use equal hidden sizes",
            ss[2], ts[2]
        )));
    }
    if ss != ts {
        return Err(Error::Shape {
            context: "hidden states must agree in batch and length".to_string(),
            lhs: ss,
            rhs: ts,
        });
    }
    let (b, n, d) = (ss[0], ss[1], ss[2]);
    if mask.len() != b * n {
        return Err(Error::Shape {
            context: "hidden loss mask must be [b,n]".to_string(),
            lhs: vec![mask.len()],
            rhs: vec![b * n],
        });
    }
    let mut weights = vec![0.0; b * n * d];
    for (pos, &m) in mask.iter().enumerate() {
        if m == 1 {
            for w in &mut weights[pos * d..(pos + 1) * d] {
                *w = 1.0;
            }
        }
    }
    masked_mse(g, hidden_s, hidden_t, weights, vec![b, n, d])
}

/// Weighted sum of the two component losses; defaults (1,1).
pub fn layer_loss(
    g: &mut Graph,
    attn: TensorId,
    hidden: TensorId,
    weights: (f64, f64),
) -> Result<TensorId> {
    let (w_attn, w_hidn) = weights;
    if w_attn < 0.0 || w_hidn < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got ({w_attn}, {w_hidn})"
        )));
    }
    let a = g.scale(attn, w_attn);
    let h = g.scale(hidden, w_hidn);
    g.add(a, h)
}

/// Sum of per-pair layer losses over the plan's mapping, reading the
/// attention tensor selected by the plan. The teacher trace is expected to
/// come from a gradient-disabled binding.
pub fn total_distill_loss(
    g: &mut Graph,
    trace_s: &ForwardTrace,
    trace_t: &ForwardTrace,
    plan: &DistillPlan,
) -> Result<TensorId> {
    let (max_s, max_t) = plan.mapping.max_layers();
    if max_s > trace_s.num_layers() || max_t > trace_t.num_layers() {
        return Err(Error::Internal(format!(
            "mapping references layers ({max_s},{max_t}) beyond traces ({},{})",
            trace_s.num_layers(),
            trace_t.num_layers()
        )));
    }
    if trace_s.mask() != trace_t.mask() {
        return Err(Error::Internal(
            "student and teacher traces were made from different batches".to_string(),
        ));
    }
    let mask = trace_s.mask().to_vec();
    let mut total: Option<TensorId> = None;
    for &(s_layer, t_layer) in plan.mapping.pairs() {
        let attn = attention_loss(
            g,
            trace_s.attn_at(s_layer, plan.attn_source)?,
            trace_t.attn_at(t_layer, plan.attn_source)?,
            &mask,
        )?;
        let hidn = hidden_loss(
            g,
            trace_s.hidden_at(s_layer)?,
            trace_t.hidden_at(t_layer)?,
            &mask,
        )?;
        let pair = layer_loss(g, attn, hidn, plan.loss_weights)?;
        total = Some(match total {
            None => pair,
            Some(acc) => g.add(acc, pair)?,
        });
    }
    total.ok_or_else(|| Error::Internal("empty mapping survived validation".to_string()))
}

/// Initialize a student as a deep copy of the teacher's embeddings and
/// bottom `student_layers` transformer layers.
pub fn init_student_from_teacher(
    teacher: &EncoderModel,
    student_layers: usize,
) -> Result<EncoderModel> {
    teacher.truncate(student_layers)
}

#[cfg(test)]
#[path = "distill_tests.rs"]
mod tests;
