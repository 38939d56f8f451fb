//! Retrieval and reranking evaluation, and the temperature sweep.
//!
//! Retrieval ranks the whole corpus by cosine similarity to each query and
//! records where the gold document lands; accuracy@k is the fraction of
//! queries whose gold rank is at most k. Reranking orders each instance's
//! references and scores the order with average precision.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{RerankInstance, RetrievalCorpus};
use crate::encoder::{self, EmbeddingVector, ModelParams, Role, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::{cosine_similarity, LossVariant};
use crate::trainer::{self, Regime, TrainConfig, TripletExample};

pub const DEFAULT_K_VALUES: [usize; 3] = [5, 10, 20];

/// Anything that can embed text in a given role.
pub trait TextEncoder: Sync {
    fn embed(&self, text: &str, role: Role) -> Result<EmbeddingVector>;
}

/// The lookup-table encoder at a fixed truncation length.
#[derive(Debug, Clone, Copy)]
pub struct PooledEncoder<'a> {
    pub params: &'a ModelParams,
    pub max_len: usize,
}

impl<'a> PooledEncoder<'a> {
    pub fn new(params: &'a ModelParams, max_len: usize) -> Self {
        Self { params, max_len }
    }
}

impl TextEncoder for PooledEncoder<'_> {
    fn embed(&self, text: &str, role: Role) -> Result<EmbeddingVector> {
        self.params.embed(text, role, self.max_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc<I> {
    pub id: I,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult<I> {
    /// Highest score first; equal scores in ascending id order.
    pub entries: Vec<ScoredDoc<I>>,
    /// Set when more results were requested than the corpus holds.
    pub k_exceeds_corpus: bool,
}

fn rank_order<I: Ord>(a: &ScoredDoc<&I>, b: &ScoredDoc<&I>) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(b.id))
}

/// Exact top-k by cosine similarity over `(id, embedding)` pairs.
pub fn top_k<I, V>(query: &[f64], corpus: &[(I, V)], k: usize) -> Result<RankedResult<I>>
where
    I: Ord + Clone,
    V: AsRef<[f64]>,
{
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut scored = corpus
        .iter()
        .map(|(id, v)| {
            Ok(ScoredDoc {
                id,
                score: cosine_similarity(query, v.as_ref())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k_exceeds_corpus = k > scored.len();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(RankedResult {
        entries: scored
            .into_iter()
            .map(|s| ScoredDoc {
                id: s.id.clone(),
                score: s.score,
            })
            .collect(),
        k_exceeds_corpus,
    })
}

/// `(1/P) Σ precision@i` over the positions `i` of the `P` positives.
pub fn average_precision(ranked_labels: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &relevant) in ranked_labels.iter().enumerate() {
        if relevant {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::UndefinedAp);
    }
    Ok(sum / hits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyAtK {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub query_id: String,
    pub gold_doc_id: String,
    /// 1-based rank of the gold document.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub model_id: String,
    pub corpus_size: usize,
    pub query_count: usize,
    /// Ascending in k.
    pub accuracy: Vec<AccuracyAtK>,
    /// Mean of 1/rank over queries. Reported alongside accuracy@k as a
    /// single-number summary; not one of the benchmark's headline metrics.
    pub mean_reciprocal_rank: f64,
    pub per_query: Vec<QueryHit>,
}

impl RetrievalReport {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.accuracy.iter().find(|a| a.k == k).map(|a| a.accuracy)
    }
}

fn normalized_k_values(k_values: &[usize]) -> Result<Vec<usize>> {
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(Error::InvalidConfig("k values must be non-empty and at least 1".into()));
    }
    Ok(ks)
}

fn embed_all<E: TextEncoder>(model: &E, texts: &[&str], role: Role) -> Result<Vec<EmbeddingVector>> {
    texts.par_iter().map(|t| model.embed(t, role)).collect()
}

pub fn accuracy_at_k<E: TextEncoder>(
    model: &E,
    corpus: &RetrievalCorpus,
    k_values: &[usize],
    model_id: &str,
) -> Result<RetrievalReport> {
    corpus.validate()?;
    let ks = normalized_k_values(k_values)?;
    if corpus.queries.is_empty() || corpus.documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let doc_texts: Vec<&str> = corpus.documents.iter().map(|d| d.text.as_str()).collect();
    let docs = embed_all(model, &doc_texts, Role::Document)?;
    let doc_ids: Vec<&str> = corpus.documents.iter().map(|d| d.doc_id.as_str()).collect();

    let per_query = corpus
        .queries
        .par_iter()
        .map(|q| {
            let qe = model.embed(&q.text, Role::Query)?;
            let gold = doc_ids
                .iter()
                .position(|id| *id == q.gold_doc_id)
                .expect("validated gold id");
            let gold_score = cosine_similarity(&qe, &docs[gold])?;
            let mut ahead = 0usize;
            for (j, d) in docs.iter().enumerate() {
                if j == gold {
                    continue;
                }
                let s = cosine_similarity(&qe, d)?;
                if s > gold_score || (s == gold_score && doc_ids[j] < doc_ids[gold]) {
                    ahead += 1;
                }
            }
            Ok(QueryHit {
                query_id: q.query_id.clone(),
                gold_doc_id: q.gold_doc_id.clone(),
                rank: ahead + 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_query.len() as f64;
    let accuracy = ks
        .iter()
        .map(|&k| AccuracyAtK {
            k,
            accuracy: per_query.iter().filter(|h| h.rank <= k).count() as f64 / n,
        })
        .collect();
    let mean_reciprocal_rank = per_query.iter().map(|h| 1.0 / h.rank as f64).sum::<f64>() / n;
    Ok(RetrievalReport {
        model_id: model_id.to_string(),
        corpus_size: corpus.documents.len(),
        query_count: corpus.queries.len(),
        accuracy,
        mean_reciprocal_rank,
        per_query,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankReport {
    pub model_id: String,
    #[serde(rename = "map")]
    pub mean_average_precision: f64,
    pub per_query_ap: Vec<f64>,
    pub instance_count: usize,
}

/// Average precision of one instance: references ranked by similarity to the
/// query, ties in reference order (positives listed first).
pub fn rerank_instance_ap<E: TextEncoder>(model: &E, instance: &RerankInstance) -> Result<f64> {
    instance.validate()?;
    let query = model.embed(&instance.query, Role::Query)?;
    let refs: Vec<(usize, EmbeddingVector)> = instance
        .references()
        .enumerate()
        .map(|(i, (text, _))| Ok((i, model.embed(text, Role::Document)?)))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = instance.references().map(|(_, l)| l).collect();
    let ranked = top_k(&query, &refs, refs.len())?;
    let ranked_labels: Vec<bool> = ranked.entries.iter().map(|e| labels[e.id]).collect();
    average_precision(&ranked_labels)
}

pub fn evaluate_rerank<E: TextEncoder>(
    model: &E,
    instances: &[RerankInstance],
    model_id: &str,
) -> Result<RerankReport> {
    if instances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_query_ap = instances
        .par_iter()
        .map(|inst| rerank_instance_ap(model, inst))
        .collect::<Result<Vec<_>>>()?;
    let map = per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64;
    Ok(RerankReport {
        model_id: model_id.to_string(),
        mean_average_precision: map,
        instance_count: per_query_ap.len(),
        per_query_ap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub temperatures: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub variants: Vec<LossVariant>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            temperatures: vec![0.1, 0.4, 0.7],
            regimes: Regime::ALL.to_vec(),
            variants: LossVariant::ALL.to_vec(),
        }
    }
}

impl SweepGrid {
    /// Grid points in a fixed order: temperature, then regime, then variant.
    pub fn points(&self) -> Vec<(f64, Regime, LossVariant)> {
        let mut out = Vec::new();
        for &t in &self.temperatures {
            for &r in &self.regimes {
                for &v in &self.variants {
                    out.push((t, r, v));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    /// Temperature, regime and variant are overridden per grid point.
    pub base: TrainConfig,
    pub dim: usize,
    pub min_freq: usize,
    pub k_values: Vec<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            dim: encoder::DEFAULT_DIM,
            min_freq: 1,
            k_values: DEFAULT_K_VALUES.to_vec(),
        }
    }
}

pub struct SweepData<'a> {
    /// Raw training groups; each grid point prepares them for its regime.
    pub triplets: &'a [TripletExample],
    pub retrieval: &'a RetrievalCorpus,
    pub rerank: &'a [RerankInstance],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub temperature: f64,
    pub regime: Regime,
    pub variant: LossVariant,
    pub loss_history: Vec<f64>,
    #[serde(rename = "map")]
    pub mean_average_precision: f64,
    pub accuracy: Vec<AccuracyAtK>,
    pub mean_reciprocal_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub seed: u64,
    pub settings: SweepSettings,
    pub grid: SweepGrid,
    pub train_groups: usize,
    pub retrieval_queries: usize,
    pub rerank_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metadata: SweepMetadata,
    pub entries: Vec<SweepEntry>,
}

fn point_label(t: f64, r: Regime, v: LossVariant) -> String {
    format!("tau={t} regime={r} variant={v}")
}

fn run_point(
    init: &ModelParams,
    data: &SweepData<'_>,
    settings: &SweepSettings,
    (temperature, regime, variant): (f64, Regime, LossVariant),
) -> Result<SweepEntry> {
    let cfg = TrainConfig {
        temperature,
        regime,
        variant,
        ..settings.base
    };
    let (prepared, _) = trainer::prepare_from_triplets(data.triplets, &cfg)?;
    let outcome = trainer::train(init.clone(), &prepared, &cfg)?;
    let model = PooledEncoder::new(&outcome.params, cfg.max_len);
    let id = point_label(temperature, regime, variant);
    let retrieval = accuracy_at_k(&model, data.retrieval, &settings.k_values, &id)?;
    let rerank = evaluate_rerank(&model, data.rerank, &id)?;
    Ok(SweepEntry {
        temperature,
        regime,
        variant,
        loss_history: outcome.loss_history,
        mean_average_precision: rerank.mean_average_precision,
        accuracy: retrieval.accuracy,
        mean_reciprocal_rank: retrieval.mean_reciprocal_rank,
    })
}

/// Runs every grid point that succeeds and returns the collected report
/// together with the first failure, if any. Every point trains from the same
/// seeded initialisation.
pub fn sweep_temperature_partial(
    settings: &SweepSettings,
    grid: &SweepGrid,
    data: &SweepData<'_>,
) -> Result<(SweepReport, Option<Error>)> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let texts: Vec<&str> = data
        .triplets
        .iter()
        .flat_map(trainer::MemberTexts::member_texts)
        .collect();
    let vocab = Vocabulary::build(&texts, settings.min_freq)?;
    let init = ModelParams::init(vocab, settings.dim, settings.base.seed)?;

    let results: Vec<Result<SweepEntry>> = points
        .par_iter()
        .map(|&p| {
            run_point(&init, data, settings, p).map_err(|e| Error::GridPoint {
                point: point_label(p.0, p.1, p.2),
                source: Box::new(e),
            })
        })
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(e) if first_error.is_none() => first_error = Some(e),
            Err(e) => log::error!("{e}"),
        }
    }
    let report = SweepReport {
        metadata: SweepMetadata {
            seed: settings.base.seed,
            settings: settings.clone(),
            grid: grid.clone(),
            train_groups: data.triplets.len(),
            retrieval_queries: data.retrieval.queries.len(),
            rerank_instances: data.rerank.len(),
        },
        entries,
    };
    Ok((report, first_error))
}

pub fn sweep_temperature(settings: &SweepSettings, grid: &SweepGrid, data: &SweepData<'_>) -> Result<SweepReport> {
    match sweep_temperature_partial(settings, grid, data)? {
        (report, None) => Ok(report),
        (_, Some(err)) => Err(err),
    }
}

/// For each regime/variant pair, flags any temperature step where reranking
/// mAP went up. Empty when mAP never increases with temperature.
pub fn rerank_trend_warnings(report: &SweepReport) -> Vec<String> {
    let mut warnings = Vec::new();
    for &regime in &report.metadata.grid.regimes {
        for &variant in &report.metadata.grid.variants {
            let mut series: Vec<(f64, f64)> = report
                .entries
                .iter()
                .filter(|e| e.regime == regime && e.variant == variant)
                .map(|e| (e.temperature, e.mean_average_precision))
                .collect();
            series.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in series.windows(2) {
                if w[1].1 > w[0].1 {
                    warnings.push(format!(
                        "{regime}/{variant}: rerank mAP rose from {:.4} at tau={} to {:.4} at tau={}",
                        w[0].1, w[0].0, w[1].1, w[1].0
                    ));
                }
            }
        }
    }
    warnings
}

fn variant_label(v: LossVariant) -> &'static str {
    match v {
        LossVariant::InfoNce => "InfoNCE",
        LossVariant::Weighted => "Weighted",
    }
}

fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, " | {cell:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    let total: usize = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn render_retrieval_table(reports: &[RetrievalReport]) -> String {
    let ks: Vec<usize> = reports
        .first()
        .map(|r| r.accuracy.iter().map(|a| a.k).collect())
        .unwrap_or_default();
    let mut header = vec!["Model".to_string()];
    header.extend(ks.iter().map(|k| format!("k={k}")));
    header.push("MRR".into());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.model_id.clone()];
            row.extend(ks.iter().map(|&k| r.accuracy_at(k).map(pct).unwrap_or_default()));
            row.push(pct(r.mean_reciprocal_rank));
            row
        })
        .collect();
    render_table(&header, &rows)
}

pub fn render_rerank_table(reports: &[RerankReport]) -> String {
    let header = vec!["Model".to_string(), "Instances".into(), "mAP".into()];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.model_id.clone(),
                r.instance_count.to_string(),
                pct(r.mean_average_precision),
            ]
        })
        .collect();
    render_table(&header, &rows)
}

/// Rows are objective/method pairs, columns are metrics per temperature.
pub fn render_sweep_table(report: &SweepReport) -> String {
    let ks = &report.metadata.settings.k_values;
    let mut header = vec!["Objective".to_string(), "Method".into(), "tau".into(), "mAP".into()];
    header.extend(ks.iter().map(|k| format!("acc@{k}")));
    header.push("MRR".into());
    let mut entries: Vec<&SweepEntry> = report.entries.iter().collect();
    entries.sort_by(|a, b| {
        (a.variant as u8, a.regime as u8)
            .cmp(&(b.variant as u8, b.regime as u8))
            .then(a.temperature.total_cmp(&b.temperature))
    });
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            let mut row = vec![
                variant_label(e.variant).to_string(),
                e.regime.short().to_string(),
                e.temperature.to_string(),
                pct(e.mean_average_precision),
            ];
            for k in ks {
                let acc = e.accuracy.iter().find(|a| a.k == *k).map(|a| a.accuracy);
                row.push(acc.map(pct).unwrap_or_default());
            }
            row.push(pct(e.mean_reciprocal_rank));
            row
        })
        .collect();
    render_table(&header, &rows)
}

/// Long-format CSV: `tau,regime,variant,metric,value`.
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("tau,regime,variant,metric,value\n");
    for e in &report.entries {
        let mut row = |metric: &str, value: f64| {
            let _ = writeln!(out, "{},{},{},{metric},{value}", e.temperature, e.regime, e.variant);
        };
        row("map", e.mean_average_precision);
        for a in &e.accuracy {
            row(&format!("accuracy@{}", a.k), a.accuracy);
        }
        row("mrr", e.mean_reciprocal_rank);
    }
    out
}

/// Any report file produced by this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnyReport {
    Sweep(SweepReport),
    Retrieval(RetrievalReport),
    Rerank(RerankReport),
}

impl AnyReport {
    pub fn render(&self) -> String {
        match self {
            AnyReport::Sweep(r) => render_sweep_table(r),
            AnyReport::Retrieval(r) => render_retrieval_table(std::slice::from_ref(r)),
            AnyReport::Rerank(r) => render_rerank_table(std::slice::from_ref(r)),
        }
    }
}
