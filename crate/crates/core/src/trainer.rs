//! Training-data preparation and the contrastive training loop.
//!
//! Raw groups of `(anchor, positive, negatives)` are length-filtered, then
//! either stripped to pairs for in-batch training or completed with random
//! out-of-group negatives for hard-negative training. Updates use a lazy
//! (row-sparse) Adam so rows never touched by a batch keep their values and
//! moments.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, ModelParams, Role, RowGradients, TokenSequence, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::jsonl::{self, Record};
use crate::objectives::{self, in_batch_loss, triplet_group_loss, LossConfig, LossVariant};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub anchor: String,
    pub positive: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletExample {
    pub anchor: String,
    pub positive: String,
    pub negatives: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// Anything whose member texts are subject to the length filter.
pub trait MemberTexts {
    fn member_texts(&self) -> Vec<&str>;
}

impl MemberTexts for PairExample {
    fn member_texts(&self) -> Vec<&str> {
        vec![&self.anchor, &self.positive]
    }
}

impl MemberTexts for TripletExample {
    fn member_texts(&self) -> Vec<&str> {
        let mut out: Vec<&str> = vec![&self.anchor, &self.positive];
        out.extend(self.negatives.iter().map(String::as_str));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[serde(alias = "in-batch")]
    InBatch,
    #[serde(alias = "hard-negative")]
    HardNegative,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::InBatch, Regime::HardNegative];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::InBatch => "in_batch",
            Regime::HardNegative => "hard_negative",
        }
    }

    /// Two-letter tag used in report tables.
    pub fn short(self) -> &'static str {
        match self {
            Regime::InBatch => "IB",
            Regime::HardNegative => "HN",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "in_batch" | "ib" => Ok(Regime::InBatch),
            "hard_negative" | "hn" => Ok(Regime::HardNegative),
            other => Err(Error::InvalidConfig(format!(
                "unknown regime {other:?} (expected in_batch or hard_negative)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub variant: LossVariant,
    pub regime: Regime,
    pub seed: u64,
    pub max_len: usize,
    pub min_len: usize,
    /// Negatives sampled for each group that arrives without any.
    pub negatives_per_group: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 5e-5,
            epochs: 3,
            temperature: 0.1,
            variant: LossVariant::Weighted,
            regime: Regime::InBatch,
            seed: 42,
            max_len: DEFAULT_MAX_LEN,
            min_len: 1,
            negatives_per_group: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || (self.regime == Regime::InBatch && self.batch_size < 2) {
            return bad(format!("batch_size {} too small for {}", self.batch_size, self.regime));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        objectives::validate_temperature(self.temperature)?;
        if self.max_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length bounds [{}, {}]", self.min_len, self.max_len));
        }
        if self.negatives_per_group == 0 {
            return bad("negatives_per_group must be at least 1".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        LossConfig::new(self.temperature, self.variant)
    }
}

/// Independent ChaCha streams derived from one run seed.
#[derive(Debug, Clone, Copy)]
pub enum RngStream {
    Negatives,
    Shuffle { epoch: usize },
}

pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stream {
        RngStream::Negatives => 1,
        RngStream::Shuffle { epoch } => 2 + epoch as u64,
    });
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthFilter<T> {
    pub kept: Vec<T>,
    pub dropped: usize,
}

/// Keeps examples whose every member text has `min_len..=max_len` whitespace
/// tokens, in their original order.
pub fn filter_by_length<T: MemberTexts + Clone>(examples: &[T], min_len: usize, max_len: usize) -> LengthFilter<T> {
    let kept: Vec<T> = examples
        .iter()
        .filter(|ex| {
            ex.member_texts().iter().all(|t| {
                let n = encoder::token_count(t);
                n >= min_len && n <= max_len
            })
        })
        .cloned()
        .collect();
    let dropped = examples.len() - kept.len();
    LengthFilter { kept, dropped }
}

pub fn strip_negatives(triplets: &[TripletExample]) -> Vec<PairExample> {
    triplets
        .iter()
        .map(|t| PairExample {
            anchor: t.anchor.clone(),
            positive: t.positive.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum GroupKey {
    Named(String),
    Index(usize),
}

fn group_key(t: &TripletExample, idx: usize) -> GroupKey {
    match &t.group {
        Some(g) => GroupKey::Named(g.clone()),
        None => GroupKey::Index(idx),
    }
}

/// Adds `per_group` negatives to every example that has none, drawn
/// uniformly without replacement from the distinct texts that never occur in
/// the example's own group. Examples sharing a `group` value form one group;
/// ungrouped examples are groups of their own.
pub fn complete_negatives<R: Rng + ?Sized>(
    triplets: Vec<TripletExample>,
    per_group: usize,
    rng: &mut R,
) -> Result<Vec<TripletExample>> {
    let keys: Vec<GroupKey> = triplets.iter().enumerate().map(|(i, t)| group_key(t, i)).collect();
    let distinct_groups: HashSet<&GroupKey> = keys.iter().collect();
    if distinct_groups.len() < 2 {
        return Err(Error::NoOutOfGroupNegative);
    }

    // Distinct texts in first-occurrence order, with the groups they occur in.
    let mut pool: Vec<&str> = Vec::new();
    let mut owners: Vec<HashSet<&GroupKey>> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (t, key) in triplets.iter().zip(&keys) {
        for text in t.member_texts() {
            let i = *slot.entry(text).or_insert_with(|| {
                pool.push(text);
                owners.push(HashSet::new());
                pool.len() - 1
            });
            owners[i].insert(key);
        }
    }

    let mut candidates: HashMap<&GroupKey, Vec<usize>> = HashMap::new();
    let mut added: Vec<Option<Vec<String>>> = vec![None; triplets.len()];
    for (idx, (t, key)) in triplets.iter().zip(&keys).enumerate() {
        if !t.negatives.is_empty() {
            continue;
        }
        let cands = candidates
            .entry(key)
            .or_insert_with(|| (0..pool.len()).filter(|&i| !owners[i].contains(key)).collect());
        let usable: Vec<usize> = cands.iter().copied().filter(|&i| pool[i] != t.positive).collect();
        if usable.is_empty() {
            return Err(Error::NoOutOfGroupNegative);
        }
        let chosen = usable
            .choose_multiple(rng, per_group.min(usable.len()))
            .map(|&i| pool[i].to_string())
            .collect();
        added[idx] = Some(chosen);
    }
    Ok(triplets
        .into_iter()
        .zip(added)
        .map(|(mut t, extra)| {
            if let Some(extra) = extra {
                t.negatives = extra;
            }
            t
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainingData {
    Pairs(Vec<PairExample>),
    Triplets(Vec<TripletExample>),
}

impl TrainingData {
    pub fn len(&self) -> usize {
        match self {
            TrainingData::Pairs(p) => p.len(),
            TrainingData::Triplets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every text, in example order; the vocabulary is built from these.
    pub fn texts(&self) -> Vec<&str> {
        match self {
            TrainingData::Pairs(p) => p.iter().flat_map(|e| e.member_texts()).collect(),
            TrainingData::Triplets(t) => t.iter().flat_map(|e| e.member_texts()).collect(),
        }
    }

    pub fn check_regime(&self, regime: Regime) -> Result<()> {
        match (self, regime) {
            (TrainingData::Pairs(_), Regime::InBatch) => Ok(()),
            (TrainingData::Triplets(t), Regime::HardNegative) => {
                if t.iter().any(|t| t.negatives.is_empty()) {
                    Err(Error::NoNegatives)
                } else {
                    Ok(())
                }
            }
            (_, Regime::InBatch) => Err(Error::RegimeDataMismatch {
                regime: "in_batch",
                expected: r#"pair ({"anchor": str, "positive": str})"#,
            }),
            (_, Regime::HardNegative) => Err(Error::RegimeDataMismatch {
                regime: "hard_negative",
                expected: r#"triplet ({"anchor": str, "positive": str, "negatives": [str], "group"?: str})"#,
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepStats {
    pub input: usize,
    pub dropped_by_length: usize,
    pub completed_groups: usize,
}

/// Length filter followed by the regime-specific conversion.
pub fn prepare_from_triplets(triplets: &[TripletExample], cfg: &TrainConfig) -> Result<(TrainingData, PrepStats)> {
    let filtered = filter_by_length(triplets, cfg.min_len, cfg.max_len);
    let mut stats = PrepStats {
        input: triplets.len(),
        dropped_by_length: filtered.dropped,
        completed_groups: 0,
    };
    let data = match cfg.regime {
        Regime::InBatch => TrainingData::Pairs(strip_negatives(&filtered.kept)),
        Regime::HardNegative => {
            stats.completed_groups = filtered.kept.iter().filter(|t| t.negatives.is_empty()).count();
            let mut rng = stream_rng(cfg.seed, RngStream::Negatives);
            TrainingData::Triplets(complete_negatives(filtered.kept, cfg.negatives_per_group, &mut rng)?)
        }
    };
    Ok((data, stats))
}

/// Length filter only; the data must already match the regime.
pub fn prepare(data: &TrainingData, cfg: &TrainConfig) -> Result<(TrainingData, PrepStats)> {
    match data {
        TrainingData::Pairs(p) => {
            let f = filter_by_length(p, cfg.min_len, cfg.max_len);
            let stats = PrepStats {
                input: p.len(),
                dropped_by_length: f.dropped,
                completed_groups: 0,
            };
            Ok((TrainingData::Pairs(f.kept), stats))
        }
        TrainingData::Triplets(t) if cfg.regime == Regime::HardNegative => prepare_from_triplets(t, cfg),
        // Mismatched data passes through for check_regime to report.
        TrainingData::Triplets(t) => Ok((
            TrainingData::Triplets(t.clone()),
            PrepStats {
                input: t.len(),
                ..Default::default()
            },
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &ModelParams, config: AdamConfig) -> Self {
        let len = params.table().len();
        Self {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update restricted to rows whose gradient has a nonzero entry.
/// Moments of other rows are left as they were.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &RowGradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let dim = params.dim();
    if grads.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: grads.dim(),
        });
    }
    if state.first_moment.len() != params.table().len() {
        return Err(Error::DimensionMismatch {
            expected: params.table().len(),
            actual: state.first_moment.len(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::GradientOverflow);
    }
    if let Some((id, _)) = grads.iter().find(|(id, _)| *id >= params.vocab_size()) {
        return Err(Error::InvalidTokenId {
            id,
            vocab_size: params.vocab_size(),
        });
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, epsilon } = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (id, g) in grads.iter() {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let base = id * dim;
        let row = params.row_mut(id);
        for k in 0..dim {
            let m = &mut state.first_moment[base + k];
            let v = &mut state.second_moment[base + k];
            *m = beta1 * *m + (1.0 - beta1) * g[k];
            *v = beta2 * *v + (1.0 - beta2) * g[k] * g[k];
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            row[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::GradientOverflow);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean per-anchor loss of each epoch.
    pub loss_history: Vec<f64>,
    /// In-batch size-1 remainders skipped over the whole run.
    pub dropped_remainders: usize,
    pub optimizer_steps: u64,
}

struct TokenizedPair {
    anchor: TokenSequence,
    positive: TokenSequence,
}

struct TokenizedTriplet {
    anchor: TokenSequence,
    positive: TokenSequence,
    negatives: Vec<TokenSequence>,
}

/// Runs `cfg.epochs` epochs. The result depends only on the inputs and
/// `cfg.seed`, not on the size of the rayon pool.
pub fn train(params: ModelParams, data: &TrainingData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    data.check_regime(cfg.regime)?;
    let loss_cfg = cfg.loss_config()?;
    let vocab = params.vocab().clone();
    let tok = |text: &str, role| encoder::tokenize(&vocab, text, role, cfg.max_len);

    let mut trainer = Trainer {
        state: OptimizerState::new(&params),
        params,
        loss_cfg,
        lr: cfg.learning_rate,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut dropped_remainders = 0;

    match data {
        TrainingData::Pairs(pairs) => {
            let examples = pairs
                .iter()
                .map(|p| {
                    Ok(TokenizedPair {
                        anchor: tok(&p.anchor, Role::Query)?,
                        positive: tok(&p.positive, Role::Document)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            for epoch in 0..cfg.epochs {
                let order = shuffled(examples.len(), cfg.seed, epoch);
                let (mut total, mut count) = (0.0, 0usize);
                for chunk in order.chunks(cfg.batch_size) {
                    if chunk.len() < 2 {
                        dropped_remainders += chunk.len();
                        continue;
                    }
                    let batch: Vec<&TokenizedPair> = chunk.iter().map(|&i| &examples[i]).collect();
                    total += trainer.in_batch_step(&batch)? * batch.len() as f64;
                    count += batch.len();
                }
                if count == 0 {
                    return Err(Error::BatchTooSmall(examples.len()));
                }
                history.push(total / count as f64);
            }
            if dropped_remainders > 0 {
                log::warn!("dropped {dropped_remainders} size-1 in-batch remainder example(s)");
            }
        }
        TrainingData::Triplets(triplets) => {
            let examples = triplets
                .iter()
                .map(|t| {
                    Ok(TokenizedTriplet {
                        anchor: tok(&t.anchor, Role::Query)?,
                        positive: tok(&t.positive, Role::Document)?,
                        negatives: t
                            .negatives
                            .iter()
                            .map(|n| tok(n, Role::Document))
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            for epoch in 0..cfg.epochs {
                let order = shuffled(examples.len(), cfg.seed, epoch);
                let mut total = 0.0;
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<&TokenizedTriplet> = chunk.iter().map(|&i| &examples[i]).collect();
                    total += trainer.triplet_step(&batch)? * batch.len() as f64;
                }
                history.push(total / examples.len() as f64);
            }
        }
    }

    Ok(TrainOutcome {
        optimizer_steps: trainer.state.step(),
        params: trainer.params,
        loss_history: history,
        dropped_remainders,
    })
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, RngStream::Shuffle { epoch }));
    order
}

struct Trainer {
    params: ModelParams,
    state: OptimizerState,
    loss_cfg: LossConfig,
    lr: f64,
}

impl Trainer {
    fn in_batch_step(&mut self, batch: &[&TokenizedPair]) -> Result<f64> {
        let params = &self.params;
        let embedded = batch
            .par_iter()
            .map(|ex| Ok((params.encode(&ex.anchor)?, params.encode(&ex.positive)?)))
            .collect::<Result<Vec<_>>>()?;
        let (queries, docs): (Vec<_>, Vec<_>) = embedded.into_iter().unzip();
        let out = in_batch_loss(&queries, &docs, &self.loss_cfg)?;

        let mut grads = RowGradients::new(params.dim());
        for (ex, (qg, dg)) in batch.iter().zip(out.query_grads.iter().zip(&out.doc_grads)) {
            params.accumulate_backward(&ex.anchor, qg, 1.0, &mut grads)?;
            params.accumulate_backward(&ex.positive, dg, 1.0, &mut grads)?;
        }
        optimizer_step(&mut self.params, &grads, &mut self.state, self.lr)?;
        Ok(out.loss)
    }

    fn triplet_step(&mut self, batch: &[&TokenizedTriplet]) -> Result<f64> {
        let params = &self.params;
        let cfg = &self.loss_cfg;
        // Per-example work runs in parallel; the reduction below is in batch
        // order so results do not depend on scheduling.
        let per_example = batch
            .par_iter()
            .map(|ex| {
                let anchor = params.encode(&ex.anchor)?;
                let positive = params.encode(&ex.positive)?;
                let negatives = ex
                    .negatives
                    .iter()
                    .map(|n| params.encode(n))
                    .collect::<Result<Vec<_>>>()?;
                let out = triplet_group_loss(&anchor, &positive, &negatives, cfg)?;
                let mut g = RowGradients::new(params.dim());
                params.accumulate_backward(&ex.anchor, &out.anchor_grad, 1.0, &mut g)?;
                params.accumulate_backward(&ex.positive, &out.positive_grad, 1.0, &mut g)?;
                for (seq, ng) in ex.negatives.iter().zip(&out.negative_grads) {
                    params.accumulate_backward(seq, ng, 1.0, &mut g)?;
                }
                Ok((out.loss, g))
            })
            .collect::<Result<Vec<_>>>()?;

        let scale = 1.0 / batch.len() as f64;
        let mut grads = RowGradients::new(params.dim());
        let mut loss = 0.0;
        for (l, g) in &per_example {
            loss += l;
            grads.merge(g, scale);
        }
        optimizer_step(&mut self.params, &grads, &mut self.state, self.lr)?;
        Ok(loss * scale)
    }
}

fn pair_from_record(rec: &Record) -> Result<PairExample> {
    Ok(PairExample {
        anchor: rec.string("anchor")?,
        positive: rec.string("positive")?,
    })
}

fn triplet_from_record(rec: &Record) -> Result<TripletExample> {
    Ok(TripletExample {
        anchor: rec.string("anchor")?,
        positive: rec.string("positive")?,
        negatives: rec.string_list("negatives")?,
        group: rec.optional_string("group")?,
    })
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairExample>> {
    jsonl::read_records(path)?.iter().map(pair_from_record).collect()
}

pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<TripletExample>> {
    jsonl::read_records(path)?.iter().map(triplet_from_record).collect()
}

/// Reads a pair or triplet file; a `negatives` key on the first record marks
/// a triplet file, and every later record must then match.
pub fn read_training_data(path: impl AsRef<Path>) -> Result<TrainingData> {
    let records = jsonl::read_records(path)?;
    match records.first() {
        None => Err(Error::EmptyCorpus),
        Some(first) if first.has("negatives") => Ok(TrainingData::Triplets(
            records.iter().map(triplet_from_record).collect::<Result<_>>()?,
        )),
        Some(_) => Ok(TrainingData::Pairs(
            records
                .iter()
                .map(|r| {
                    if r.has("negatives") {
                        Err(r.error("triplet record in a pair file"))
                    } else {
                        pair_from_record(r)
                    }
                })
                .collect::<Result<_>>()?,
        )),
    }
}

pub fn write_pairs(pairs: &[PairExample], path: impl AsRef<Path>) -> Result<()> {
    jsonl::write_jsonl(path, pairs)
}

pub fn write_triplets(triplets: &[TripletExample], path: impl AsRef<Path>) -> Result<()> {
    jsonl::write_jsonl(path, triplets)
}
