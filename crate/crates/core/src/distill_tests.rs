use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::compute::{Graph, Tensor};
use crate::data::CLS_ID;
use crate::model::{bind, forward, EncoderModel, ModelConfig, SequenceBatch};

/// Scalar-loop oracle for the attention loss: (1/h) sum_i MSE(A_i^S, A_i^T)
/// with the MSE taken over batch and valid (query, key) cells.
fn oracle_attention_loss(
    a_s: &[f64],
    a_t: &[f64],
    b: usize,
    h: usize,
    n: usize,
    mask: &[u8],
) -> f64 {
    let mut per_head_count = 0usize;
    for s in 0..b {
        let row = &mask[s * n..(s + 1) * n];
        let valid: usize = row.iter().map(|&m| m as usize).sum();
        per_head_count += valid * valid;
    }
    let mut total = 0.0;
    for head in 0..h {
        let mut head_sum = 0.0;
        for s in 0..b {
            let row = &mask[s * n..(s + 1) * n];
            for q in 0..n {
                for k in 0..n {
                    if row[q] == 1 && row[k] == 1 {
                        let at = ((s * h + head) * n + q) * n + k;
                        let d = a_s[at] - a_t[at];
                        head_sum += d * d;
                    }
                }
            }
        }
        total += head_sum / per_head_count as f64;
    }
    total / h as f64
}

/// Scalar-loop oracle for the hidden loss: MSE over batch, valid positions
/// and the hidden dimension.
fn oracle_hidden_loss(h_s: &[f64], h_t: &[f64], b: usize, n: usize, d: usize, mask: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for pos in 0..b * n {
        if mask[pos] == 1 {
            for c in 0..d {
                let diff = h_s[pos * d + c] - h_t[pos * d + c];
                sum += diff * diff;
            }
            count += d;
        }
    }
    sum / count as f64
}

fn constant(g: &mut Graph, shape: Vec<usize>, values: Vec<f64>) -> crate::compute::TensorId {
    g.constant(shape, values).unwrap()
}

fn rand_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ── attention loss ─────────────────────────────────────────────────────

#[test]
fn attention_loss_zero_when_equal() {
    let mut g = Graph::new();
    let vals = vec![0.3; 2 * 2 * 2 * 2];
    let a = constant(&mut g, vec![2, 2, 2, 2], vals.clone());
    let b = constant(&mut g, vec![2, 2, 2, 2], vals);
    let loss = attention_loss(&mut g, a, b, &[1, 1, 1, 1]).unwrap();
    assert_eq!(g.item(loss).unwrap(), 0.0);
}

#[test]
fn attention_loss_hand_computed_example() {
    // b=1, h=2, n=2, no padding:
    // head 1: S=[[0,1],[1,0]], T=[[1,1],[1,1]] -> MSE = (1+0+0+1)/4 = 0.5
    // head 2: equal -> 0. Total: (0.5 + 0)/2 = 0.25
    let mut g = Graph::new();
    let a_s = constant(
        &mut g,
        vec![1, 2, 2, 2],
        vec![0.0, 1.0, 1.0, 0.0, 0.7, 0.7, 0.7, 0.7],
    );
    let a_t = constant(
        &mut g,
        vec![1, 2, 2, 2],
        vec![1.0, 1.0, 1.0, 1.0, 0.7, 0.7, 0.7, 0.7],
    );
    let mask = [1u8, 1];
    let loss = attention_loss(&mut g, a_s, a_t, &mask).unwrap();
    assert!((g.item(loss).unwrap() - 0.25).abs() < 1e-15);

    let oracle = oracle_attention_loss(
        &[0.0, 1.0, 1.0, 0.0, 0.7, 0.7, 0.7, 0.7],
        &[1.0, 1.0, 1.0, 1.0, 0.7, 0.7, 0.7, 0.7],
        1,
        2,
        2,
        &mask,
    );
    assert!((oracle - 0.25).abs() < 1e-15);
}

#[test]
fn attention_loss_head_mismatch_is_config_error() {
    let mut g = Graph::new();
    let a = constant(&mut g, vec![1, 2, 2, 2], vec![0.0; 8]);
    let b = constant(&mut g, vec![1, 4, 2, 2], vec![0.0; 16]);
    match attention_loss(&mut g, a, b, &[1, 1]) {
        Err(Error::Config(msg)) => assert!(msg.contains("head count"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn attention_loss_gradient_only_reaches_student() {
    let mut g = Graph::new();
    let student = g.leaf(
        Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4])
            .unwrap()
            .with_requires_grad(),
    );
    let teacher = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap());
    let loss = attention_loss(&mut g, student, teacher, &[1, 1]).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(student).is_some());
    assert!(g.grad(teacher).is_none());
}

#[test]
fn attention_loss_matches_oracle_on_random_padded_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..100 {
        let b = rng.gen_range(1..4);
        let h = rng.gen_range(1..4);
        let n = rng.gen_range(2..5);
        let mut mask = vec![1u8; b * n];
        for s in 0..b {
            let valid = rng.gen_range(1..=n);
            for k in valid..n {
                mask[s * n + k] = 0;
            }
        }
        let a_s = rand_values(&mut rng, b * h * n * n);
        let a_t = rand_values(&mut rng, b * h * n * n);
        let mut g = Graph::new();
        let ts = constant(&mut g, vec![b, h, n, n], a_s.clone());
        let tt = constant(&mut g, vec![b, h, n, n], a_t.clone());
        let loss = attention_loss(&mut g, ts, tt, &mask).unwrap();
        let expect = oracle_attention_loss(&a_s, &a_t, b, h, n, &mask);
        assert!(
            (g.item(loss).unwrap() - expect).abs() < 1e-10,
            "{} vs {expect}",
            g.item(loss).unwrap()
        );
    }
}

// ── hidden loss ────────────────────────────────────────────────────────

#[test]
fn hidden_loss_hand_computed_example() {
    // b=1, n=2 unpadded, d=2: H_S=[[1,2],[3,4]], H_T=[[1,2],[3,2]] -> 1.0
    let mut g = Graph::new();
    let h_s = constant(&mut g, vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let h_t = constant(&mut g, vec![1, 2, 2], vec![1.0, 2.0, 3.0, 2.0]);
    let loss = hidden_loss(&mut g, h_s, h_t, &[1, 1]).unwrap();
    assert!((g.item(loss).unwrap() - 1.0).abs() < 1e-15);

    let same = hidden_loss(&mut g, h_s, h_s, &[1, 1]).unwrap();
    assert_eq!(g.item(same).unwrap(), 0.0);
}

#[test]
fn hidden_loss_ignores_padded_positions() {
    let mut g = Graph::new();
    let h_s = constant(&mut g, vec![1, 2, 2], vec![1.0, 2.0, 99.0, -99.0]);
    let h_t = constant(&mut g, vec![1, 2, 2], vec![1.0, 3.0, 0.0, 0.0]);
    let mask = [1u8, 0];
    let loss_id = hidden_loss(&mut g, h_s, h_t, &mask).unwrap();
    let loss = g.item(loss_id).unwrap();
    // only position 0 counts: ((0)^2 + (1)^2) / 2
    assert!((loss - 0.5).abs() < 1e-15);

    // perturbing padding leaves the loss unchanged
    let h_s2 = constant(&mut g, vec![1, 2, 2], vec![1.0, 2.0, -5.0, 7.0]);
    let loss2_id = hidden_loss(&mut g, h_s2, h_t, &mask).unwrap();
    let loss2 = g.item(loss2_id).unwrap();
    assert_eq!(loss, loss2);
}

#[test]
fn hidden_loss_width_mismatch_mentions_projection() {
    let mut g = Graph::new();
    let h_s = constant(&mut g, vec![1, 2, 2], vec![0.0; 4]);
    let h_t = constant(&mut g, vec![1, 2, 4], vec![0.0; 8]);
    match hidden_loss(&mut g, h_s, h_t, &[1, 1]) {
        Err(Error::Config(msg)) => {
            assert!(msg.contains("projection"), "message should note projections are out of scope: {msg}")
        }
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn hidden_loss_matches_oracle_on_random_padded_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    for _ in 0..100 {
        let b = rng.gen_range(1..4);
        let n = rng.gen_range(2..5);
        let d = rng.gen_range(1..5);
        let mut mask = vec![1u8; b * n];
        for s in 0..b {
            let valid = rng.gen_range(1..=n);
            for k in valid..n {
                mask[s * n + k] = 0;
            }
        }
        let h_s = rand_values(&mut rng, b * n * d);
        let h_t = rand_values(&mut rng, b * n * d);
        let mut g = Graph::new();
        let ts = constant(&mut g, vec![b, n, d], h_s.clone());
        let tt = constant(&mut g, vec![b, n, d], h_t.clone());
        let loss = hidden_loss(&mut g, ts, tt, &mask).unwrap();
        let expect = oracle_hidden_loss(&h_s, &h_t, b, n, d, &mask);
        assert!((g.item(loss).unwrap() - expect).abs() < 1e-10);
    }
}

// ── layer loss ─────────────────────────────────────────────────────────

#[test]
fn layer_loss_additivity_and_weights() {
    let mut g = Graph::new();
    let attn = g.leaf(Tensor::scalar(0.25));
    let hidn = g.leaf(Tensor::scalar(1.0));
    let total = layer_loss(&mut g, attn, hidn, (1.0, 1.0)).unwrap();
    assert!((g.item(total).unwrap() - 1.25).abs() < 1e-15);

    let weighted = layer_loss(&mut g, attn, hidn, (2.0, 0.0)).unwrap();
    assert!((g.item(weighted).unwrap() - 0.5).abs() < 1e-15);

    let zero_attn = g.leaf(Tensor::scalar(0.0));
    let zero_hidn = g.leaf(Tensor::scalar(0.0));
    let zero = layer_loss(&mut g, zero_attn, zero_hidn, (1.0, 1.0)).unwrap();
    assert_eq!(g.item(zero).unwrap(), 0.0);

    assert!(layer_loss(&mut g, attn, hidn, (-1.0, 1.0)).is_err());
}

// ── mappings ───────────────────────────────────────────────────────────

#[test]
fn build_mapping_top_and_uniform() {
    assert_eq!(
        build_mapping(MappingStrategy::Top, 6, 12).unwrap().pairs(),
        &[(6, 12)]
    );
    // uniform rule oracle: i * (L_T / L_S)
    let uniform = build_mapping(MappingStrategy::Uniform, 6, 12).unwrap();
    let expect: Vec<(usize, usize)> = (1..=6).map(|i| (i, i * 2)).collect();
    assert_eq!(uniform.pairs(), expect.as_slice());
    assert_eq!(
        uniform.pairs(),
        &[(1, 2), (2, 4), (3, 6), (4, 8), (5, 10), (6, 12)]
    );

    assert_eq!(
        build_mapping(MappingStrategy::Top, 4, 4).unwrap().pairs(),
        &[(4, 4)]
    );
    assert!(build_mapping(MappingStrategy::Uniform, 5, 12).is_err());
    assert!(build_mapping(MappingStrategy::Top, 6, 4).is_err());
}

#[test]
fn mapping_monotonicity_enforced() {
    assert!(LayerMapping::new(vec![(1, 2), (2, 2)]).is_err());
    assert!(LayerMapping::new(vec![(2, 2), (1, 4)]).is_err());
    assert!(LayerMapping::new(vec![]).is_err());
    assert!(LayerMapping::new(vec![(0, 1)]).is_err());
    let ok = LayerMapping::new(vec![(1, 2), (2, 4)]).unwrap();
    for w in ok.pairs().windows(2) {
        assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1);
    }
}

// ── frozen parameter set ───────────────────────────────────────────────

#[test]
fn frozen_set_policies() {
    let config = ModelConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        ffn_size: 16,
        vocab_size: 12,
        max_seq_len: 4,
        type_vocab: 2,
        dropout_rate: 0.1,
        attn_source: crate::model::AttnSource::Scores,
        num_classes: 3,
    };
    let model = EncoderModel::init_random(&config, 5).unwrap();
    assert!(frozen_parameter_set(&model, FreezePolicy::None).is_empty());
    let frozen = frozen_parameter_set(&model, FreezePolicy::Embeddings);
    assert_eq!(frozen.len(), 5, "three tables plus norm gain and bias");
    for name in &frozen {
        assert!(model.param(name).is_some(), "{name} must resolve");
    }
    let expect: BTreeSet<String> = [
        "embedding.token",
        "embedding.position",
        "embedding.type",
        "embedding.norm.gain",
        "embedding.norm.bias",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    assert_eq!(frozen, expect);
}

// ── total loss over traces ─────────────────────────────────────────────

fn traced_pair(
    teacher_layers: usize,
    student_layers: usize,
    seed: u64,
) -> (Graph, EncoderModel, EncoderModel, SequenceBatch) {
    let config = ModelConfig {
        num_layers: teacher_layers,
        hidden_size: 8,
        num_heads: 2,
        ffn_size: 16,
        vocab_size: 12,
        max_seq_len: 4,
        type_vocab: 2,
        dropout_rate: 0.0,
        attn_source: crate::model::AttnSource::Scores,
        num_classes: 3,
    };
    let teacher = EncoderModel::init_random(&config, seed).unwrap();
    let student = init_student_from_teacher(&teacher, student_layers).unwrap();
    let batch = SequenceBatch::new(
        2,
        4,
        vec![CLS_ID, 5, 6, 7, CLS_ID, 8, 0, 0],
        vec![0; 8],
        vec![1, 1, 1, 1, 1, 1, 0, 0],
    )
    .unwrap();
    (Graph::new(), teacher, student, batch)
}

fn traces_for(
    g: &mut Graph,
    teacher: &EncoderModel,
    student: &EncoderModel,
    batch: &SequenceBatch,
) -> (crate::model::ForwardTrace, crate::model::ForwardTrace) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let none = BTreeSet::new();
    let bt = bind(g, teacher, false, &none);
    let bs = bind(g, student, false, &none);
    let tt = forward(g, &bt, batch, false, &mut rng).unwrap();
    let ts = forward(g, &bs, batch, false, &mut rng).unwrap();
    (tt, ts)
}

#[test]
fn copied_prefix_gives_zero_loss_and_top_mapping_does_not() {
    let (mut g, teacher, student, batch) = traced_pair(4, 2, 71);
    let (trace_t, trace_s) = traces_for(&mut g, &teacher, &student, &batch);

    // mapping [(j, j)] on copied layers -> exact zero
    for j in 1..=2 {
        let plan = DistillPlan::new(
            LayerMapping::new(vec![(j, j)]).unwrap(),
            crate::model::AttnSource::Scores,
            BTreeSet::new(),
        );
        let loss = total_distill_loss(&mut g, &trace_s, &trace_t, &plan).unwrap();
        assert_eq!(g.item(loss).unwrap(), 0.0, "layer {j} is a verbatim copy");
    }

    // the real top mapping compares student layer 2 to teacher layer 4
    let plan = DistillPlan::new(
        build_mapping(MappingStrategy::Top, 2, 4).unwrap(),
        crate::model::AttnSource::Scores,
        BTreeSet::new(),
    );
    let loss = total_distill_loss(&mut g, &trace_s, &trace_t, &plan).unwrap();
    assert!(g.item(loss).unwrap() > 0.0);
}

#[test]
fn uniform_total_equals_sum_of_pair_losses() {
    let (mut g, teacher, student, batch) = traced_pair(4, 2, 73);
    let (trace_t, trace_s) = traces_for(&mut g, &teacher, &student, &batch);
    let plan = DistillPlan::new(
        build_mapping(MappingStrategy::Uniform, 2, 4).unwrap(),
        crate::model::AttnSource::Scores,
        BTreeSet::new(),
    );
    let total_id = total_distill_loss(&mut g, &trace_s, &trace_t, &plan).unwrap();
    let total = g.item(total_id).unwrap();

    let mask = batch.mask().to_vec();
    let mut sum = 0.0;
    for &(s, t) in plan.mapping.pairs() {
        let attn = attention_loss(
            &mut g,
            trace_s.attn_at(s, plan.attn_source).unwrap(),
            trace_t.attn_at(t, plan.attn_source).unwrap(),
            &mask,
        )
        .unwrap();
        let hidn = hidden_loss(
            &mut g,
            trace_s.hidden_at(s).unwrap(),
            trace_t.hidden_at(t).unwrap(),
            &mask,
        )
        .unwrap();
        sum += g.item(attn).unwrap() + g.item(hidn).unwrap();
    }
    assert!((total - sum).abs() < 1e-12);
}

#[test]
fn student_isolation_after_init() {
    let (_, teacher, mut student, _) = traced_pair(4, 2, 79);
    let before = teacher.clone();
    for v in student
        .param_mut("layer.1.attn.query.weight")
        .unwrap()
        .values_mut()
    {
        *v += 1.0;
    }
    assert_eq!(teacher, before, "mutating the student must not touch the teacher");
}

#[test]
fn batch_duplication_leaves_losses_unchanged() {
    let (mut g, teacher, student, batch) = traced_pair(4, 2, 83);
    let plan = DistillPlan::new(
        build_mapping(MappingStrategy::Top, 2, 4).unwrap(),
        crate::model::AttnSource::Scores,
        BTreeSet::new(),
    );
    let (trace_t, trace_s) = traces_for(&mut g, &teacher, &student, &batch);
    let single_id = total_distill_loss(&mut g, &trace_s, &trace_t, &plan).unwrap();
    let single = g.item(single_id).unwrap();

    // duplicate every sequence
    let mut tokens = batch.token_ids().to_vec();
    tokens.extend_from_slice(batch.token_ids());
    let mut types = batch.type_ids().to_vec();
    types.extend_from_slice(batch.type_ids());
    let mut mask = batch.mask().to_vec();
    mask.extend_from_slice(batch.mask());
    let doubled = SequenceBatch::new(4, 4, tokens, types, mask).unwrap();
    let mut g2 = Graph::new();
    let (trace_t2, trace_s2) = traces_for(&mut g2, &teacher, &student, &doubled);
    let double_id = total_distill_loss(&mut g2, &trace_s2, &trace_t2, &plan).unwrap();
    let double = g2.item(double_id).unwrap();
    assert!((single - double).abs() < 1e-12);
}

#[test]
fn gradient_isolation_under_frozen_embeddings() {
    let (_, teacher, student, batch) = traced_pair(4, 2, 89);
    let frozen = frozen_parameter_set(&student, FreezePolicy::Embeddings);
    let plan = DistillPlan::new(
        build_mapping(MappingStrategy::Top, 2, 4).unwrap(),
        crate::model::AttnSource::Scores,
        frozen.clone(),
    );
    plan.validate(&student, &teacher).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let none = BTreeSet::new();
    let bt = bind(&mut g, &teacher, false, &none);
    let bs = bind(&mut g, &student, true, &frozen);
    let tt = forward(&mut g, &bt, &batch, false, &mut rng).unwrap();
    let ts = forward(&mut g, &bs, &batch, false, &mut rng).unwrap();
    let loss = total_distill_loss(&mut g, &ts, &tt, &plan).unwrap();
    g.backward(loss).unwrap();

    for (name, &id) in bt.ids() {
        assert!(g.grad(id).is_none(), "teacher {name} must get no gradient");
    }
    for (name, &id) in bs.ids() {
        if frozen.contains(name) {
            assert!(g.grad(id).is_none(), "frozen {name} must get no gradient");
        } else {
            assert!(g.grad(id).is_some(), "trainable {name} must get a gradient");
        }
    }
}

#[test]
fn plan_validation_catches_bad_references() {
    let (_, teacher, student, _) = traced_pair(4, 2, 97);
    let mut plan = DistillPlan::new(
        LayerMapping::new(vec![(3, 4)]).unwrap(),
        crate::model::AttnSource::Scores,
        BTreeSet::new(),
    );
    assert!(plan.validate(&student, &teacher).is_err(), "student has 2 layers");

    plan.mapping = LayerMapping::new(vec![(2, 5)]).unwrap();
    assert!(plan.validate(&student, &teacher).is_err(), "teacher has 4 layers");

    plan.mapping = LayerMapping::new(vec![(2, 4)]).unwrap();
    plan.frozen.insert("embedding.missing".to_string());
    assert!(plan.validate(&student, &teacher).is_err());
}
