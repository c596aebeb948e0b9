//! Synthetic multilingual corpus and task generation.
//!
//! All languages share one concept grammar (an order-1 Markov chain over
//! concepts) and a fraction of anchor concepts mapped to the same token id
//! in every language. Task labels are computed on concept sequences before
//! any language mapping, so parallel generation across languages yields
//! aligned labels and zero-shot transfer is measurable.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SequenceBatch;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;
/// First token id available to real vocabulary entries.
pub const NUM_SPECIAL: usize = 4;

/// Deterministic seed derivation (splitmix64 over base xor salt).
pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const ANCHOR_SALT: u64 = 0x414e_4348;
const TASK_SALT: u64 = 0x5441_534b;
const SHUFFLE_SALT: u64 = 0x5348_4646;

// ── concept grammar ────────────────────────────────────────────────────

/// Order-1 Markov chain over concepts with a row-stochastic transition
/// matrix. Every entry gets a small floor mass, so the chain is
/// irreducible by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGrammar {
    num_concepts: usize,
    transition: Vec<f64>,
    len_range: (usize, usize),
    seed: u64,
}

/// Random sparse row-stochastic transition, deterministic per seed. The
/// chain is built over antonym pairs and then expanded to concepts with
/// mild multiplicative noise, so the two concepts of a pair are
/// distributional near-twins: masked-language training embeds them close,
/// which is what makes contradiction detection ride on embedding geometry.
/// Every entry keeps a floor mass, so the chain is irreducible.
pub fn gen_grammar(
    seed: u64,
    num_concepts: usize,
    len_range: (usize, usize),
) -> Result<ConceptGrammar> {
    if num_concepts < 8 {
        return Err(Error::Config(format!(
            "num_concepts must be at least 8, got {num_concepts}"
        )));
    }
    if num_concepts % 2 != 0 {
        return Err(Error::Config(
            "num_concepts must be even so the antonym involution pairs every concept".to_string(),
        ));
    }
    if len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(Error::Config(format!(
            "invalid sentence length range {len_range:?}"
        )));
    }
    let c = num_concepts;
    let pairs = c / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Sparse row-stochastic chain over pairs with two communities: a chain
    // wanders inside one community, so a sentence carries an implicit topic
    // that only whole-sentence context reveals. Preferred successors are
    // drawn within the community.
    let community = |pair: usize| pair % 2;
    let preferred = 4.min(pairs / 2).max(1);
    let mut pair_weights = vec![0.0; pairs * pairs];
    for row in 0..pairs {
        let mut chosen = BTreeSet::new();
        while chosen.len() < preferred {
            let cand = rng.gen_range(0..pairs);
            if community(cand) == community(row) {
                chosen.insert(cand);
            }
        }
        for &j in &chosen {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            pair_weights[row * pairs + j] = -u.ln();
        }
    }

    // expand to concepts: each pair member inherits the pair row, jittered
    let floor = 0.5 / c as f64;
    let mut transition = vec![0.0; c * c];
    for row in 0..c {
        let prow = &pair_weights[(row / 2) * pairs..(row / 2 + 1) * pairs];
        let mut weights = vec![floor; c];
        for (q, &w) in prow.iter().enumerate() {
            for member in 0..2 {
                let jitter: f64 = rng.gen_range(0.8..1.2);
                weights[2 * q + member] += 0.5 * w * jitter;
            }
        }
        let sum: f64 = weights.iter().sum();
        for (slot, w) in transition[row * c..(row + 1) * c].iter_mut().zip(&weights) {
            *slot = w / sum;
        }
    }
    Ok(ConceptGrammar {
        num_concepts,
        transition,
        len_range,
        seed,
    })
}

impl ConceptGrammar {
    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len_range(&self) -> (usize, usize) {
        self.len_range
    }

    pub fn transition_row(&self, concept: usize) -> &[f64] {
        &self.transition[concept * self.num_concepts..(concept + 1) * self.num_concepts]
    }

    fn step(&self, current: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = self.transition_row(current);
        let mut u: f64 = rng.gen();
        for (j, &p) in row.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return j;
            }
        }
        self.num_concepts - 1
    }

    /// Sample a concept chain of the given length, uniform start.
    pub fn sample_chain(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut chain = Vec::with_capacity(len);
        let mut current = rng.gen_range(0..self.num_concepts);
        chain.push(current);
        for _ in 1..len {
            current = self.step(current, rng);
            chain.push(current);
        }
        chain
    }

    fn sample_len(&self, rng: &mut ChaCha8Rng, cap: usize) -> usize {
        let (lo, hi) = self.len_range;
        let hi = hi.min(cap);
        let lo = lo.min(hi);
        rng.gen_range(lo..=hi)
    }

    /// Fixed involutive antonym pairing: 2k <-> 2k+1.
    pub fn antonym(&self, concept: usize) -> usize {
        concept ^ 1
    }
}

// ── languages ──────────────────────────────────────────────────────────

/// A language's injective concept-to-token map. Anchor concepts map to the
/// same token id in every language of the grammar family; the rest map into
/// a language-private token range.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSpec {
    lang_id: String,
    lang_index: usize,
    concept_to_token: Vec<usize>,
    anchor_concepts: BTreeSet<usize>,
}

/// Anchor concepts are a pure function of (grammar seed, anchor_fraction):
/// identical for every language derived from the same grammar. Anchors are
/// taken as whole antonym pairs where the count allows, so anchored
/// contradiction pairs stay fully shared across languages.
pub fn anchor_concepts(grammar: &ConceptGrammar, anchor_fraction: f64) -> BTreeSet<usize> {
    let c = grammar.num_concepts();
    let count = (anchor_fraction * c as f64).round() as usize;
    let mut pair_order: Vec<usize> = (0..c / 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(grammar.seed(), ANCHOR_SALT));
    for i in (1..pair_order.len()).rev() {
        let j = rng.gen_range(0..=i);
        pair_order.swap(i, j);
    }
    let mut anchors = BTreeSet::new();
    for pair in pair_order {
        if anchors.len() + 2 <= count {
            anchors.insert(2 * pair);
            anchors.insert(2 * pair + 1);
        } else if anchors.len() < count {
            anchors.insert(2 * pair);
        }
        if anchors.len() >= count {
            break;
        }
    }
    anchors
}

/// Derive one language: shared anchors plus a seeded shuffle of the
/// private concepts into `[vocab_offset, vocab_offset + num_private)`.
pub fn derive_language(
    grammar: &ConceptGrammar,
    lang_index: usize,
    lang_seed: u64,
    anchor_fraction: f64,
    vocab_offset: usize,
    vocab_size: usize,
) -> Result<LanguageSpec> {
    if !(0.0..=1.0).contains(&anchor_fraction) {
        return Err(Error::Config(format!(
            "anchor_fraction must be in [0, 1], got {anchor_fraction}"
        )));
    }
    let c = grammar.num_concepts();
    let anchors = anchor_concepts(grammar, anchor_fraction);
    let num_anchors = anchors.len();
    if vocab_offset < NUM_SPECIAL + num_anchors {
        return Err(Error::Config(format!(
            "vocab_offset {vocab_offset} overlaps specials or anchor range [{}, {})",
            NUM_SPECIAL,
            NUM_SPECIAL + num_anchors
        )));
    }
    let num_private = c - num_anchors;
    if vocab_offset + num_private > vocab_size {
        return Err(Error::Config(format!(
            "vocabulary overflow: language {lang_index} needs tokens up to {} but vocab_size is {vocab_size}",
            vocab_offset + num_private
        )));
    }

    // anchors: token = NUM_SPECIAL + rank in sorted anchor order
    let mut concept_to_token = vec![0usize; c];
    for (rank, &concept) in anchors.iter().enumerate() {
        concept_to_token[concept] = NUM_SPECIAL + rank;
    }
    // private concepts: seeded shuffle of private slots
    let private: Vec<usize> = (0..c).filter(|x| !anchors.contains(x)).collect();
    let mut slots: Vec<usize> = (0..num_private).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(lang_seed);
    for i in (1..slots.len()).rev() {
        let j = rng.gen_range(0..=i);
        slots.swap(i, j);
    }
    for (concept, slot) in private.into_iter().zip(slots) {
        concept_to_token[concept] = vocab_offset + slot;
    }

    Ok(LanguageSpec {
        lang_id: format!("L{lang_index}"),
        lang_index,
        concept_to_token,
        anchor_concepts: anchors,
    })
}

impl LanguageSpec {
    pub fn lang_id(&self) -> &str {
        &self.lang_id
    }

    pub fn lang_index(&self) -> usize {
        self.lang_index
    }

    pub fn anchor_concepts(&self) -> &BTreeSet<usize> {
        &self.anchor_concepts
    }

    pub fn token_for(&self, concept: usize) -> usize {
        self.concept_to_token[concept]
    }

    pub fn map_concepts(&self, concepts: &[usize]) -> Vec<usize> {
        concepts.iter().map(|&c| self.concept_to_token[c]).collect()
    }

    /// All token ids this language can emit (excluding specials).
    pub fn token_set(&self) -> BTreeSet<usize> {
        self.concept_to_token.iter().copied().collect()
    }
}

// ── corpus ─────────────────────────────────────────────────────────────

/// Sample sentences: concept chains mapped through the language, wrapped
/// CLS .. SEP and padded to `seq_len`. Deterministic per (language, seed).
pub fn gen_corpus(
    grammar: &ConceptGrammar,
    language: &LanguageSpec,
    num_sentences: usize,
    seed: u64,
    seq_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if seq_len < 3 {
        return Err(Error::Config(format!(
            "seq_len {seq_len} leaves no room for CLS/SEP"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, language.lang_index() as u64));
    let mut out = Vec::with_capacity(num_sentences);
    for _ in 0..num_sentences {
        let len = grammar.sample_len(&mut rng, seq_len - 2);
        let chain = grammar.sample_chain(len, &mut rng);
        let mut tokens = Vec::with_capacity(seq_len);
        tokens.push(CLS_ID);
        tokens.extend(language.map_concepts(&chain));
        tokens.push(SEP_ID);
        tokens.resize(seq_len, PAD_ID);
        out.push(tokens);
    }
    Ok(out)
}

// ── task generation ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Entail,
    Contradict,
    Neutral,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entail, Label::Contradict, Label::Neutral];

    pub fn index(self) -> usize {
        match self {
            Label::Entail => 0,
            Label::Contradict => 1,
            Label::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Label> {
        Label::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Data(format!("label index {i} outside 0..3")))
    }
}

/// A labeled sentence pair. The label was computed on concept sequences
/// before language mapping, so parallel examples across languages share it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: Label,
}

/// Premise/hypothesis length bounds and the neutral-overlap ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskShape {
    pub premise_len: (usize, usize),
    pub hypothesis_len: (usize, usize),
    pub neutral_max_overlap: f64,
}

impl Default for TaskShape {
    fn default() -> Self {
        TaskShape {
            premise_len: (4, 6),
            hypothesis_len: (2, 4),
            neutral_max_overlap: 0.3,
        }
    }
}

fn concept_example(
    grammar: &ConceptGrammar,
    shape: &TaskShape,
    label: Label,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (plo, phi) = shape.premise_len;
    let (hlo, hhi) = shape.hypothesis_len;
    for _attempt in 0..1000 {
        let p_len = rng.gen_range(plo..=phi);
        let premise = grammar.sample_chain(p_len, rng);
        let premise_set: BTreeSet<usize> = premise.iter().copied().collect();
        let h_len = rng.gen_range(hlo..=hhi.min(p_len));

        match label {
            Label::Entail => {
                let hypothesis = ordered_subsequence(&premise, h_len, rng);
                return Ok((premise, hypothesis));
            }
            Label::Contradict => {
                let mut hypothesis = ordered_subsequence(&premise, h_len, rng);
                // replace one element by its antonym, which must be absent
                // from the premise so the pair cannot also read as entailed
                let mut positions: Vec<usize> = (0..hypothesis.len()).collect();
                for i in (1..positions.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    positions.swap(i, j);
                }
                if let Some(&pos) = positions
                    .iter()
                    .find(|&&p| !premise_set.contains(&grammar.antonym(hypothesis[p])))
                {
                    hypothesis[pos] = grammar.antonym(hypothesis[pos]);
                    return Ok((premise, hypothesis));
                }
                // every candidate antonym collides; resample the premise
            }
            Label::Neutral => {
                let hypothesis = grammar.sample_chain(h_len, rng);
                let hyp_set: BTreeSet<usize> = hypothesis.iter().copied().collect();
                let shared = hyp_set.intersection(&premise_set).count();
                if (shared as f64) / (hyp_set.len() as f64) < shape.neutral_max_overlap {
                    return Ok((premise, hypothesis));
                }
            }
        }
    }
    Err(Error::Internal(format!(
        "task generation failed to satisfy the {label:?} constraint in 1000 attempts"
    )))
}

fn ordered_subsequence(premise: &[usize], len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picks: Vec<usize> = (0..premise.len()).collect();
    for i in (1..picks.len()).rev() {
        let j = rng.gen_range(0..=i);
        picks.swap(i, j);
    }
    let mut chosen: Vec<usize> = picks.into_iter().take(len).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| premise[i]).collect()
}

/// Generate labeled pairs. The concept skeleton and the final order are
/// seeded by `seed` alone, so two languages generated with the same seed
/// carry identical label sequences; classes are balanced to within one.
pub fn gen_task(
    grammar: &ConceptGrammar,
    language: &LanguageSpec,
    num_examples: usize,
    seed: u64,
    shape: &TaskShape,
) -> Result<Vec<TaskExample>> {
    if shape.premise_len.0 == 0
        || shape.premise_len.0 > shape.premise_len.1
        || shape.hypothesis_len.0 == 0
        || shape.hypothesis_len.0 > shape.hypothesis_len.1
    {
        return Err(Error::Config(format!("invalid task shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TASK_SALT));
    let mut examples = Vec::with_capacity(num_examples);
    for i in 0..num_examples {
        let label = Label::ALL[i % 3];
        let (premise, hypothesis) = concept_example(grammar, shape, label, &mut rng)?;
        examples.push(TaskExample {
            premise: language.map_concepts(&premise),
            hypothesis: language.map_concepts(&hypothesis),
            label,
        });
    }
    // language-invariant order shuffle so labels are not periodic
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_SALT));
    for i in (1..examples.len()).rev() {
        let j = order_rng.gen_range(0..=i);
        examples.swap(i, j);
    }
    Ok(examples)
}

// ── batching ───────────────────────────────────────────────────────────

fn epoch_permutation(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, derive_seed(SHUFFLE_SALT, epoch)));
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Strip CLS/SEP/PAD framing from a padded sentence, leaving the body.
pub fn sentence_body(padded: &[usize]) -> &[usize] {
    let end = padded
        .iter()
        .position(|&t| t == SEP_ID)
        .unwrap_or(padded.len());
    &padded[1.min(end)..end]
}

/// Encode two sentence bodies as one CLS a SEP b SEP sequence with segment
/// ids, trimming the second segment first when over budget. This is the
/// segment-pair shape masked-language pretraining also trains on.
pub fn join_segments(
    first: &[usize],
    second: &[usize],
    seq_len: usize,
) -> Result<(Vec<usize>, Vec<usize>, Vec<u8>)> {
    encode_segments(first, second, seq_len)
}

/// Build a batch from already padded single sentences (type ids all 0).
pub fn sentences_to_batch(sentences: &[&[usize]], seq_len: usize) -> Result<SequenceBatch> {
    let b = sentences.len();
    let mut tokens = Vec::with_capacity(b * seq_len);
    let mut mask = Vec::with_capacity(b * seq_len);
    for row in sentences {
        if row.len() != seq_len {
            return Err(Error::Shape {
                context: "sentence length differs from seq_len".to_string(),
                lhs: vec![row.len()],
                rhs: vec![seq_len],
            });
        }
        tokens.extend_from_slice(row);
        mask.extend(row.iter().map(|&t| u8::from(t != PAD_ID)));
    }
    SequenceBatch::new(b, seq_len, tokens, vec![0; b * seq_len], mask)
}

/// Shuffle sentences for one epoch and chunk them into batches.
pub fn batch_sentences(
    sentences: &[Vec<usize>],
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<SequenceBatch>> {
    if sentences.is_empty() || batch_size == 0 {
        return Err(Error::Data("nothing to batch".to_string()));
    }
    let order = epoch_permutation(sentences.len(), seed, epoch);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let rows: Vec<&[usize]> = chunk.iter().map(|&i| sentences[i].as_slice()).collect();
        batches.push(sentences_to_batch(&rows, seq_len)?);
    }
    Ok(batches)
}

/// Encode one pair as CLS premise SEP hypothesis SEP with type ids 0 up to
/// and including the first SEP, 1 afterwards. Overlong pairs are trimmed
/// hypothesis-first down to one token each side.
pub fn encode_pair(
    example: &TaskExample,
    seq_len: usize,
) -> Result<(Vec<usize>, Vec<usize>, Vec<u8>)> {
    encode_segments(&example.premise, &example.hypothesis, seq_len)
}

fn encode_segments(
    premise: &[usize],
    hypothesis: &[usize],
    seq_len: usize,
) -> Result<(Vec<usize>, Vec<usize>, Vec<u8>)> {
    if seq_len < 5 {
        return Err(Error::Config(format!(
            "seq_len {seq_len} cannot hold CLS p SEP h SEP"
        )));
    }
    if premise.is_empty() || hypothesis.is_empty() {
        return Err(Error::Data("cannot encode an empty segment".to_string()));
    }
    let budget = seq_len - 3;
    let mut p = premise.len();
    let mut h = hypothesis.len();
    while p + h > budget {
        if h > 1 && h >= p {
            h -= 1;
        } else if p > 1 {
            p -= 1;
        } else {
            h -= 1;
        }
    }
    let mut tokens = Vec::with_capacity(seq_len);
    tokens.push(CLS_ID);
    tokens.extend_from_slice(&premise[..p]);
    tokens.push(SEP_ID);
    let sep1 = tokens.len() - 1;
    tokens.extend_from_slice(&hypothesis[..h]);
    tokens.push(SEP_ID);
    let used = tokens.len();
    tokens.resize(seq_len, PAD_ID);

    let mut types = vec![0usize; seq_len];
    for t in types.iter_mut().skip(sep1 + 1) {
        *t = 1;
    }
    let mut mask = vec![0u8; seq_len];
    for m in mask.iter_mut().take(used) {
        *m = 1;
    }
    Ok((tokens, types, mask))
}

/// Encode labeled pairs into batches, shuffled per epoch when asked.
pub fn batch_examples(
    examples: &[TaskExample],
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<(SequenceBatch, Vec<i64>)>> {
    if examples.is_empty() || batch_size == 0 {
        return Err(Error::Data("nothing to batch".to_string()));
    }
    let order: Vec<usize> = if shuffle {
        epoch_permutation(examples.len(), seed, epoch)
    } else {
        (0..examples.len()).collect()
    };
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let b = chunk.len();
        let mut tokens = Vec::with_capacity(b * seq_len);
        let mut types = Vec::with_capacity(b * seq_len);
        let mut mask = Vec::with_capacity(b * seq_len);
        let mut labels = Vec::with_capacity(b);
        for &i in chunk {
            let (t, ty, m) = encode_pair(&examples[i], seq_len)?;
            tokens.extend(t);
            types.extend(ty);
            mask.extend(m);
            labels.push(examples[i].label.index() as i64);
        }
        batches.push((SequenceBatch::new(b, seq_len, tokens, types, mask)?, labels));
    }
    Ok(batches)
}

// ── full bundle generation ─────────────────────────────────────────────

const CORPUS_SALT: u64 = 0x434f_5250;
const LANG_SALT: u64 = 0x4c41_4e47;
const TRAIN_SALT: u64 = 0x5452_4e;
const DEV_SALT: u64 = 0x4445_56;
const TEST_SALT: u64 = 0x5453_54;

/// Resolved generation parameters (one source of truth in the run config).
#[derive(Debug, Clone, PartialEq)]
pub struct DataParams {
    pub num_languages: usize,
    pub num_concepts: usize,
    pub anchor_fraction: f64,
    pub corpus_sentences_per_language: usize,
    pub task_train: usize,
    pub task_dev: usize,
    pub task_test: usize,
    pub sentence_len: (usize, usize),
    pub task_shape: TaskShape,
    pub seed: u64,
    pub seq_len: usize,
    pub vocab_size: usize,
}

/// Grammar, languages, corpora, and parallel task splits. Language 0 is the
/// fine-tuning language; train/dev/test are generated for every language
/// with shared task seeds, so labels align across languages.
pub struct DataBundle {
    pub grammar: ConceptGrammar,
    pub languages: Vec<LanguageSpec>,
    pub corpora: Vec<Vec<Vec<usize>>>,
    pub train: Vec<Vec<TaskExample>>,
    pub dev: Vec<Vec<TaskExample>>,
    pub test: Vec<Vec<TaskExample>>,
    pub seq_len: usize,
}

pub fn generate_bundle(p: &DataParams) -> Result<DataBundle> {
    let grammar = gen_grammar(p.seed, p.num_concepts, p.sentence_len)?;
    let anchors = anchor_concepts(&grammar, p.anchor_fraction).len();
    let private = p.num_concepts - anchors;

    let mut languages = Vec::with_capacity(p.num_languages);
    let mut corpora = Vec::with_capacity(p.num_languages);
    let mut train = Vec::with_capacity(p.num_languages);
    let mut dev = Vec::with_capacity(p.num_languages);
    let mut test = Vec::with_capacity(p.num_languages);
    for i in 0..p.num_languages {
        let offset = NUM_SPECIAL + anchors + i * private;
        let lang = derive_language(
            &grammar,
            i,
            derive_seed(p.seed, derive_seed(LANG_SALT, i as u64)),
            p.anchor_fraction,
            offset,
            p.vocab_size,
        )?;
        corpora.push(gen_corpus(
            &grammar,
            &lang,
            p.corpus_sentences_per_language,
            derive_seed(p.seed, CORPUS_SALT),
            p.seq_len,
        )?);
        train.push(gen_task(
            &grammar,
            &lang,
            p.task_train,
            derive_seed(p.seed, TRAIN_SALT),
            &p.task_shape,
        )?);
        dev.push(gen_task(
            &grammar,
            &lang,
            p.task_dev,
            derive_seed(p.seed, DEV_SALT),
            &p.task_shape,
        )?);
        test.push(gen_task(
            &grammar,
            &lang,
            p.task_test,
            derive_seed(p.seed, TEST_SALT),
            &p.task_shape,
        )?);
        languages.push(lang);
    }
    Ok(DataBundle {
        grammar,
        languages,
        corpora,
        train,
        dev,
        test,
        seq_len: p.seq_len,
    })
}

// ── file formats ───────────────────────────────────────────────────────

pub const DATA_SCHEMA_VERSION: u32 = 1;

/// One padded sentence per line, token ids space-separated.
pub fn corpus_to_string(lang: &str, sentences: &[Vec<usize>]) -> String {
    let mut out = format!("schema={DATA_SCHEMA_VERSION}\tkind=corpus\tlang={lang}\n");
    for row in sentences {
        let ids: Vec<String> = row.iter().map(|t| t.to_string()).collect();
        out.push_str(&ids.join(" "));
        out.push('\n');
    }
    out
}

pub fn corpus_from_string(text: &str) -> Result<Vec<Vec<usize>>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty corpus file".to_string()))?;
    check_header(header, "corpus")?;
    lines
        .map(|line| {
            line.split(' ')
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Data(format!("bad token id {t:?}")))
                })
                .collect()
        })
        .collect()
}

/// One example per line: premise TAB hypothesis TAB label, ids space-separated.
pub fn task_to_string(lang: &str, split: &str, examples: &[TaskExample]) -> String {
    let mut out = format!("schema={DATA_SCHEMA_VERSION}\tkind=task\tlang={lang}\tsplit={split}\n");
    for ex in examples {
        let p: Vec<String> = ex.premise.iter().map(|t| t.to_string()).collect();
        let h: Vec<String> = ex.hypothesis.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            p.join(" "),
            h.join(" "),
            ex.label.index()
        ));
    }
    out
}

pub fn task_from_string(text: &str) -> Result<Vec<TaskExample>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty task file".to_string()))?;
    check_header(header, "task")?;
    let parse_ids = |field: &str| -> Result<Vec<usize>> {
        field
            .split(' ')
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Data(format!("bad token id {t:?}")))
            })
            .collect()
    };
    lines
        .map(|line| {
            let mut fields = line.split('\t');
            let premise = parse_ids(
                fields
                    .next()
                    .ok_or_else(|| Error::Data("missing premise field".to_string()))?,
            )?;
            let hypothesis = parse_ids(
                fields
                    .next()
                    .ok_or_else(|| Error::Data("missing hypothesis field".to_string()))?,
            )?;
            let label_idx: usize = fields
                .next()
                .ok_or_else(|| Error::Data("missing label field".to_string()))?
                .parse()
                .map_err(|_| Error::Data("bad label".to_string()))?;
            Ok(TaskExample {
                premise,
                hypothesis,
                label: Label::from_index(label_idx)?,
            })
        })
        .collect()
}

fn check_header(header: &str, expected_kind: &str) -> Result<()> {
    let mut schema = None;
    let mut kind = None;
    for field in header.split('\t') {
        if let Some(v) = field.strip_prefix("schema=") {
            schema = v.parse::<u32>().ok();
        }
        if let Some(v) = field.strip_prefix("kind=") {
            kind = Some(v);
        }
    }
    match (schema, kind) {
        (Some(DATA_SCHEMA_VERSION), Some(k)) if k == expected_kind => Ok(()),
        (Some(v), _) if v != DATA_SCHEMA_VERSION => {
            Err(Error::Data(format!("unsupported data schema version {v}")))
        }
        _ => Err(Error::Data(format!("malformed data header {header:?}"))),
    }
}

#[cfg(test)]
#[path = "data_tests.rs"]
mod tests;
