//! Benchmark construction and task files.
//!
//! * QA pairs become a retrieval corpus: documents deduplicated by exact text,
//!   each question a query whose gold is its document.
//! * NLI pairs become reranking instances: premises that occur at least twice
//!   are queries, entailed hypotheses are positives and every other label is a
//!   negative.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{self, Record};
use crate::trainer::TripletExample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QADocumentPair {
    pub question: String,
    pub document: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment,
    Contradiction,
    Neutral,
    Other,
}

impl NliLabel {
    pub const ALL: [NliLabel; 4] = [
        NliLabel::Entailment,
        NliLabel::Contradiction,
        NliLabel::Neutral,
        NliLabel::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Contradiction => "contradiction",
            NliLabel::Neutral => "neutral",
            NliLabel::Other => "other",
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NliLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        NliLabel::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| {
            let allowed: Vec<_> = NliLabel::ALL.iter().map(|l| l.as_str()).collect();
            format!("unknown label {s:?} (allowed: {})", allowed.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub gold_doc_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RetrievalCorpus {
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
}

impl RetrievalCorpus {
    /// Checks id uniqueness, gold references and non-empty texts.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.documents.len());
        for doc in &self.documents {
            if !ids.insert(doc.doc_id.as_str()) {
                return Err(Error::InvalidTask(format!("duplicate doc_id {:?}", doc.doc_id)));
            }
            if doc.text.trim().is_empty() {
                return Err(Error::InvalidTask(format!("document {:?} has empty text", doc.doc_id)));
            }
        }
        for q in &self.queries {
            if q.text.trim().is_empty() {
                return Err(Error::InvalidTask(format!("query {:?} has empty text", q.query_id)));
            }
            if !ids.contains(q.gold_doc_id.as_str()) {
                return Err(Error::InvalidTask(format!(
                    "query {:?} points at unknown document {:?}",
                    q.query_id, q.gold_doc_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankInstance {
    pub query: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

impl RerankInstance {
    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::InvalidTask(format!(
                "rerank instance {:?} needs at least one positive and one negative",
                self.query
            )));
        }
        let pos: HashSet<&str> = self.positives.iter().map(String::as_str).collect();
        if let Some(dup) = self.negatives.iter().find(|n| pos.contains(n.as_str())) {
            return Err(Error::InvalidTask(format!(
                "reference {dup:?} is both positive and negative for {:?}",
                self.query
            )));
        }
        Ok(())
    }

    /// References in evaluation order (positives first) with their labels.
    pub fn references(&self) -> impl Iterator<Item = (&str, bool)> {
        self.positives
            .iter()
            .map(|t| (t.as_str(), true))
            .chain(self.negatives.iter().map(|t| (t.as_str(), false)))
    }
}

pub fn build_retrieval_task(pairs: &[QADocumentPair]) -> Result<RetrievalCorpus> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut corpus = RetrievalCorpus::default();
    let mut by_text: HashMap<&str, usize> = HashMap::new();
    for (i, pair) in pairs.iter().enumerate() {
        if pair.question.trim().is_empty() || pair.document.trim().is_empty() {
            return Err(Error::InvalidTask(format!(
                "pair {i} has an empty question or document"
            )));
        }
        let next = by_text.len();
        let doc_idx = *by_text.entry(pair.document.as_str()).or_insert_with(|| {
            corpus.documents.push(Document {
                doc_id: format!("d{next:06}"),
                text: pair.document.clone(),
            });
            next
        });
        corpus.queries.push(Query {
            query_id: format!("q{i:06}"),
            text: pair.question.clone(),
            gold_doc_id: corpus.documents[doc_idx].doc_id.clone(),
        });
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankBuildOptions {
    /// A premise must occur at least this many times to become a query.
    pub min_duplicates: usize,
    /// Minimum positives + negatives per emitted instance.
    pub min_refs: usize,
}

impl Default for RerankBuildOptions {
    fn default() -> Self {
        Self {
            min_duplicates: 2,
            min_refs: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankBuildStats {
    pub distinct_premises: usize,
    pub below_min_duplicates: usize,
    pub dropped_no_positive: usize,
    pub dropped_no_negative: usize,
    pub dropped_min_refs: usize,
    /// Hypotheses seen with both an entailment and a non-entailment label for
    /// the same premise; removed from both lists.
    pub conflicting_references: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RerankTask {
    pub instances: Vec<RerankInstance>,
    pub stats: RerankBuildStats,
}

pub fn build_rerank_task(pairs: &[NliPair], opts: RerankBuildOptions) -> RerankTask {
    struct Group<'a> {
        premise: &'a str,
        count: usize,
        positives: Vec<&'a str>,
        negatives: Vec<&'a str>,
    }
    let mut order: Vec<Group<'_>> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for pair in pairs {
        let slot = *index.entry(pair.premise.as_str()).or_insert_with(|| {
            order.push(Group {
                premise: &pair.premise,
                count: 0,
                positives: Vec::new(),
                negatives: Vec::new(),
            });
            order.len() - 1
        });
        let g = &mut order[slot];
        g.count += 1;
        let list = if pair.label == NliLabel::Entailment {
            &mut g.positives
        } else {
            &mut g.negatives
        };
        if !list.contains(&pair.hypothesis.as_str()) {
            list.push(&pair.hypothesis);
        }
    }

    let mut stats = RerankBuildStats {
        distinct_premises: order.len(),
        ..Default::default()
    };
    let mut instances = Vec::new();
    for g in order {
        if g.count < opts.min_duplicates {
            stats.below_min_duplicates += 1;
            continue;
        }
        let pos: HashSet<&str> = g.positives.iter().copied().collect();
        let neg: HashSet<&str> = g.negatives.iter().copied().collect();
        let conflicts = pos.intersection(&neg).count();
        stats.conflicting_references += conflicts;
        let positives: Vec<String> = g
            .positives
            .iter()
            .filter(|t| !neg.contains(*t))
            .map(|t| t.to_string())
            .collect();
        let negatives: Vec<String> = g
            .negatives
            .iter()
            .filter(|t| !pos.contains(*t))
            .map(|t| t.to_string())
            .collect();
        if positives.is_empty() {
            stats.dropped_no_positive += 1;
        } else if negatives.is_empty() {
            stats.dropped_no_negative += 1;
        } else if positives.len() + negatives.len() < opts.min_refs {
            stats.dropped_min_refs += 1;
        } else {
            instances.push(RerankInstance {
                query: g.premise.to_string(),
                positives,
                negatives,
            });
        }
    }
    RerankTask { instances, stats }
}

/// Shape of the generated clustered corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_clusters: usize,
    pub docs_per_cluster: usize,
    /// Held-out evaluation queries per cluster.
    pub queries_per_cluster: usize,
    pub seed: u64,
    /// Training anchors generated for each document.
    pub train_queries_per_doc: usize,
    pub topic_words_per_cluster: usize,
    pub filler_words: usize,
    pub doc_topic_tokens: usize,
    pub doc_filler_tokens: usize,
    pub query_topic_tokens: usize,
    pub query_filler_tokens: usize,
    /// Out-of-cluster negatives attached to each triplet.
    pub negatives_per_triplet: usize,
    /// Every n-th triplet is emitted without negatives (0 disables), leaving
    /// work for negative completion.
    pub bare_triplet_every: usize,
}

impl SyntheticConfig {
    pub fn new(n_clusters: usize, docs_per_cluster: usize, queries_per_cluster: usize, seed: u64) -> Self {
        Self {
            n_clusters,
            docs_per_cluster,
            queries_per_cluster,
            seed,
            train_queries_per_doc: 4,
            topic_words_per_cluster: 10,
            filler_words: 60,
            doc_topic_tokens: 4,
            doc_filler_tokens: 8,
            query_topic_tokens: 2,
            query_filler_tokens: 4,
            negatives_per_triplet: 3,
            bare_triplet_every: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// Held-out queries paired with their gold documents.
    pub qa_pairs: Vec<QADocumentPair>,
    /// Training groups keyed by cluster, with out-of-cluster negatives.
    pub triplets: Vec<TripletExample>,
    /// Held-out queries as premises: same-cluster documents entailed, other
    /// clusters' documents under the remaining labels.
    pub nli_pairs: Vec<NliPair>,
}

/// Template corpus where a cluster's queries and documents draw on that
/// cluster's topic words, and clusters only share filler words.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.n_clusters < 2 {
        return Err(Error::InvalidConfig(
            "synthetic corpus needs at least 2 clusters".into(),
        ));
    }
    if cfg.docs_per_cluster == 0 || cfg.queries_per_cluster == 0 || cfg.train_queries_per_doc == 0 {
        return Err(Error::InvalidConfig("synthetic corpus sizes must be at least 1".into()));
    }
    if cfg.topic_words_per_cluster == 0
        || cfg.doc_topic_tokens == 0
        || cfg.query_topic_tokens == 0
        || (cfg.filler_words == 0 && (cfg.doc_filler_tokens > 0 || cfg.query_filler_tokens > 0))
    {
        return Err(Error::InvalidConfig(
            "synthetic vocabulary sizes must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topic = |c: usize, k: usize| format!("c{c:02}w{k:02}");
    let text = |rng: &mut ChaCha8Rng, c: usize, n_topic: usize, n_filler: usize| {
        let mut tokens: Vec<String> = Vec::with_capacity(n_topic + n_filler);
        for _ in 0..n_topic {
            tokens.push(topic(c, rng.gen_range(0..cfg.topic_words_per_cluster)));
        }
        for _ in 0..n_filler {
            tokens.push(format!("f{:03}", rng.gen_range(0..cfg.filler_words)));
        }
        tokens.shuffle(rng);
        tokens.join(" ")
    };

    let docs: Vec<Vec<String>> = (0..cfg.n_clusters)
        .map(|c| {
            (0..cfg.docs_per_cluster)
                .map(|_| text(&mut rng, c, cfg.doc_topic_tokens, cfg.doc_filler_tokens))
                .collect()
        })
        .collect();
    let other_doc = |rng: &mut ChaCha8Rng, c: usize| {
        let mut other = rng.gen_range(0..cfg.n_clusters - 1);
        if other >= c {
            other += 1;
        }
        docs[other][rng.gen_range(0..cfg.docs_per_cluster)].clone()
    };

    let mut triplets = Vec::new();
    for (c, cluster_docs) in docs.iter().enumerate() {
        for doc in cluster_docs {
            for _ in 0..cfg.train_queries_per_doc {
                let anchor = text(&mut rng, c, cfg.query_topic_tokens, cfg.query_filler_tokens);
                let negatives: Vec<String> = (0..cfg.negatives_per_triplet).map(|_| other_doc(&mut rng, c)).collect();
                let bare = cfg.bare_triplet_every > 0 && triplets.len() % cfg.bare_triplet_every == 0;
                triplets.push(TripletExample {
                    anchor,
                    positive: doc.clone(),
                    negatives: if bare { Vec::new() } else { negatives },
                    group: Some(format!("cluster{c:02}")),
                });
            }
        }
    }

    let mut qa_pairs = Vec::new();
    let mut nli_pairs = Vec::new();
    let neg_labels = [NliLabel::Contradiction, NliLabel::Neutral, NliLabel::Other];
    for (c, cluster_docs) in docs.iter().enumerate() {
        for j in 0..cfg.queries_per_cluster {
            let question = text(&mut rng, c, cfg.query_topic_tokens, cfg.query_filler_tokens);
            let gold = j * cfg.docs_per_cluster / cfg.queries_per_cluster;
            qa_pairs.push(QADocumentPair {
                question: question.clone(),
                document: cluster_docs[gold].clone(),
            });
            let alt = (gold + 1) % cfg.docs_per_cluster;
            for k in [gold, alt] {
                nli_pairs.push(NliPair {
                    premise: question.clone(),
                    hypothesis: cluster_docs[k].clone(),
                    label: NliLabel::Entailment,
                });
            }
            for label in neg_labels {
                nli_pairs.push(NliPair {
                    premise: question.clone(),
                    hypothesis: other_doc(&mut rng, c),
                    label,
                });
            }
        }
    }
    Ok(SyntheticCorpus {
        qa_pairs,
        triplets,
        nli_pairs,
    })
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RetrievalLine<'a> {
    Document {
        doc_id: &'a str,
        text: &'a str,
    },
    Query {
        query_id: &'a str,
        text: &'a str,
        gold_doc_id: &'a str,
    },
}

/// Either evaluation task, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Retrieval(RetrievalCorpus),
    Rerank(Vec<RerankInstance>),
}

pub fn retrieval_task_to_string(corpus: &RetrievalCorpus) -> Result<String> {
    let docs = corpus.documents.iter().map(|d| RetrievalLine::Document {
        doc_id: &d.doc_id,
        text: &d.text,
    });
    let queries = corpus.queries.iter().map(|q| RetrievalLine::Query {
        query_id: &q.query_id,
        text: &q.text,
        gold_doc_id: &q.gold_doc_id,
    });
    jsonl::to_jsonl_string(docs.chain(queries))
}

pub fn rerank_task_to_string(instances: &[RerankInstance]) -> Result<String> {
    jsonl::to_jsonl_string(instances)
}

pub fn write_task(task: &Task, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match task {
        Task::Retrieval(c) => retrieval_task_to_string(c)?,
        Task::Rerank(r) => rerank_task_to_string(r)?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_retrieval_task(corpus: &RetrievalCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, retrieval_task_to_string(corpus)?).map_err(|e| Error::io(path, e))
}

pub fn write_rerank_task(instances: &[RerankInstance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, rerank_task_to_string(instances)?).map_err(|e| Error::io(path, e))
}

fn retrieval_from_records(records: &[Record]) -> Result<RetrievalCorpus> {
    let mut corpus = RetrievalCorpus::default();
    for rec in records {
        match rec.string("kind")?.as_str() {
            "document" => corpus.documents.push(Document {
                doc_id: rec.string("doc_id")?,
                text: rec.string("text")?,
            }),
            "query" => corpus.queries.push(Query {
                query_id: rec.string("query_id")?,
                text: rec.string("text")?,
                gold_doc_id: rec.string("gold_doc_id")?,
            }),
            other => return Err(rec.error(format!("unknown kind {other:?} (allowed: document, query)"))),
        }
    }
    corpus.validate()?;
    Ok(corpus)
}

fn rerank_from_records(records: &[Record]) -> Result<Vec<RerankInstance>> {
    records
        .iter()
        .map(|rec| {
            let inst = RerankInstance {
                query: rec.string("query")?,
                positives: rec.string_list("positives")?,
                negatives: rec.string_list("negatives")?,
            };
            inst.validate().map_err(|e| rec.error(e.to_string()))?;
            Ok(inst)
        })
        .collect()
}

pub fn parse_retrieval_task(text: &str) -> Result<RetrievalCorpus> {
    retrieval_from_records(&jsonl::parse_records(text)?)
}

pub fn parse_rerank_task(text: &str) -> Result<Vec<RerankInstance>> {
    rerank_from_records(&jsonl::parse_records(text)?)
}

pub fn read_retrieval_task(path: impl AsRef<Path>) -> Result<RetrievalCorpus> {
    retrieval_from_records(&jsonl::read_records(path)?)
}

pub fn read_rerank_task(path: impl AsRef<Path>) -> Result<Vec<RerankInstance>> {
    rerank_from_records(&jsonl::read_records(path)?)
}

/// Reads either task type; records carrying a `kind` field are a retrieval
/// corpus.
pub fn read_task(path: impl AsRef<Path>) -> Result<Task> {
    let records = jsonl::read_records(path)?;
    match records.first() {
        Some(first) if first.has("kind") => Ok(Task::Retrieval(retrieval_from_records(&records)?)),
        _ => Ok(Task::Rerank(rerank_from_records(&records)?)),
    }
}

fn nli_from_records(records: &[Record]) -> Result<Vec<NliPair>> {
    records
        .iter()
        .map(|rec| {
            let premise = rec.string("premise")?;
            let hypothesis = rec.string("hypothesis")?;
            let label = rec.string("label")?.parse::<NliLabel>().map_err(|e| rec.error(e))?;
            Ok(NliPair {
                premise,
                hypothesis,
                label,
            })
        })
        .collect()
}

fn qa_from_records(records: &[Record]) -> Result<Vec<QADocumentPair>> {
    records
        .iter()
        .map(|rec| {
            Ok(QADocumentPair {
                question: rec.string("question")?,
                document: rec.string("document")?,
            })
        })
        .collect()
}

pub fn parse_nli_pairs(text: &str) -> Result<Vec<NliPair>> {
    nli_from_records(&jsonl::parse_records(text)?)
}

pub fn read_nli_pairs(path: impl AsRef<Path>) -> Result<Vec<NliPair>> {
    nli_from_records(&jsonl::read_records(path)?)
}

pub fn parse_qa_pairs(text: &str) -> Result<Vec<QADocumentPair>> {
    qa_from_records(&jsonl::parse_records(text)?)
}

pub fn read_qa_pairs(path: impl AsRef<Path>) -> Result<Vec<QADocumentPair>> {
    qa_from_records(&jsonl::read_records(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qa(q: &str, d: &str) -> QADocumentPair {
        QADocumentPair {
            question: q.into(),
            document: d.into(),
        }
    }

    fn nli(p: &str, h: &str, label: NliLabel) -> NliPair {
        NliPair {
            premise: p.into(),
            hypothesis: h.into(),
            label,
        }
    }

    #[test]
    fn retrieval_distinct_documents() {
        let c = build_retrieval_task(&[qa("q1", "d1"), qa("q2", "d2"), qa("q3", "d3")]).unwrap();
        assert_eq!(c.documents.len(), 3);
        assert_eq!(c.queries.len(), 3);
        c.validate().unwrap();
    }

    #[test]
    fn retrieval_dedups_shared_document() {
        let c = build_retrieval_task(&[qa("q1", "shared"), qa("q2", "shared")]).unwrap();
        assert_eq!(c.documents.len(), 1);
        assert_eq!(c.queries[0].gold_doc_id, c.queries[1].gold_doc_id);
    }

    #[test]
    fn retrieval_rejects_empty() {
        assert!(matches!(build_retrieval_task(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn rerank_single_group() {
        let task = build_rerank_task(
            &[
                nli("P", "h1", NliLabel::Entailment),
                nli("P", "h2", NliLabel::Contradiction),
            ],
            RerankBuildOptions::default(),
        );
        assert_eq!(
            task.instances,
            vec![RerankInstance {
                query: "P".into(),
                positives: vec!["h1".into()],
                negatives: vec!["h2".into()],
            }]
        );
    }

    #[test]
    fn rerank_drops_singletons_and_one_sided_groups() {
        let task = build_rerank_task(
            &[
                nli("once", "h", NliLabel::Entailment),
                nli("E", "a", NliLabel::Entailment),
                nli("E", "b", NliLabel::Entailment),
                nli("N", "a", NliLabel::Neutral),
                nli("N", "b", NliLabel::Other),
            ],
            RerankBuildOptions::default(),
        );
        assert!(task.instances.is_empty());
        assert_eq!(task.stats.below_min_duplicates, 1);
        assert_eq!(task.stats.dropped_no_negative, 1);
        assert_eq!(task.stats.dropped_no_positive, 1);
    }

    #[test]
    fn rerank_removes_conflicting_references() {
        let task = build_rerank_task(
            &[
                nli("P", "x", NliLabel::Entailment),
                nli("P", "x", NliLabel::Neutral),
                nli("P", "y", NliLabel::Entailment),
                nli("P", "z", NliLabel::Contradiction),
            ],
            RerankBuildOptions::default(),
        );
        assert_eq!(task.stats.conflicting_references, 1);
        assert_eq!(task.instances[0].positives, vec!["y"]);
        assert_eq!(task.instances[0].negatives, vec!["z"]);
        task.instances[0].validate().unwrap();
    }

    #[test]
    fn synthetic_is_deterministic_and_separated() {
        let cfg = SyntheticConfig::new(16, 8, 4, 7);
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.qa_pairs.len(), 64);
        let cluster_of = |text: &str| -> HashSet<String> {
            text.split_whitespace()
                .filter(|t| t.starts_with('c'))
                .map(|t| t[..3].to_string())
                .collect()
        };
        for t in &a.triplets {
            let own = cluster_of(&t.anchor);
            assert_eq!(own, cluster_of(&t.positive));
            for n in &t.negatives {
                assert!(own.is_disjoint(&cluster_of(n)));
            }
        }
        let other = generate_synthetic_corpus(&SyntheticConfig::new(16, 8, 4, 8)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synthetic_needs_two_clusters() {
        assert!(generate_synthetic_corpus(&SyntheticConfig::new(1, 8, 4, 7)).is_err());
    }

    #[test]
    fn missing_label_is_line_numbered() {
        let mut text = String::new();
        for _ in 0..6 {
            text.push_str("{\"premise\": \"p\", \"hypothesis\": \"h\", \"label\": \"neutral\"}\n");
        }
        text.push_str("{\"premise\": \"p\", \"hypothesis\": \"h\"}\n");
        let err = parse_nli_pairs(&text).unwrap_err();
        assert_eq!(err.to_string(), "line 7: missing label");
    }

    #[test]
    fn unknown_label_lists_allowed() {
        let err = parse_nli_pairs("{\"premise\": \"p\", \"hypothesis\": \"h\", \"label\": \"maybe\"}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("\"maybe\""), "{err}");
        assert!(err.contains("entailment, contradiction, neutral, other"), "{err}");
    }

    #[test]
    fn retrieval_round_trip() {
        let c = build_retrieval_task(&[qa("q1", "d \"1\""), qa("q2", "d2"), qa("q3", "d \"1\"")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_task(&Task::Retrieval(c.clone()), &path).unwrap();
        assert_eq!(read_task(&path).unwrap(), Task::Retrieval(c));
    }

    #[test]
    fn read_rejects_dangling_gold() {
        let text = "{\"kind\":\"document\",\"doc_id\":\"a\",\"text\":\"x\"}\n{\"kind\":\"query\",\"query_id\":\"q\",\"text\":\"y\",\"gold_doc_id\":\"b\"}\n";
        assert!(parse_retrieval_task(text).is_err());
    }
}
