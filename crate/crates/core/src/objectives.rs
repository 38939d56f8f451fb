//! Contrastive objectives over cosine similarity scores.
//!
//! With `z = s / τ` and `p⁺` the softmax mass of the positive among itself
//! plus the negatives:
//!
//! * InfoNCE: `L = -ln p⁺`
//! * weighted: `L = -ln p⁺ · (1 - p⁺)`
//!
//! Both gradients w.r.t. the raw scores share a direction; the weighted one is
//! the InfoNCE gradient scaled by `w(p⁺) = (1 - p⁺) - p⁺ ln p⁺`, which is below
//! one exactly when `p⁺ > 1/e`.

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[serde(alias = "infonce", alias = "info_nce")]
    InfoNce,
    Weighted,
}

impl LossVariant {
    pub const ALL: [LossVariant; 2] = [LossVariant::InfoNce, LossVariant::Weighted];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::InfoNce => "infonce",
            LossVariant::Weighted => "weighted",
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "infonce" | "info_nce" | "info-nce" => Ok(LossVariant::InfoNce),
            "weighted" | "ours" => Ok(LossVariant::Weighted),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss variant {other:?} (expected infonce or weighted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    temperature: f64,
    variant: LossVariant,
}

impl LossConfig {
    pub fn new(temperature: f64, variant: LossVariant) -> Result<Self> {
        validate_temperature(temperature)?;
        Ok(Self { temperature, variant })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn variant(&self) -> LossVariant {
        self.variant
    }
}

pub(crate) fn validate_temperature(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("temperature must be > 0, got {tau}")))
    }
}

/// One positive score and at least one negative score for a single anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores {
    positive: f64,
    negatives: Vec<f64>,
}

impl SimilarityScores {
    pub fn new(positive: f64, negatives: Vec<f64>) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::NoNegatives);
        }
        if !positive.is_finite() || negatives.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("similarity scores must be finite".into()));
        }
        Ok(Self { positive, negatives })
    }

    pub fn positive(&self) -> f64 {
        self.positive
    }

    pub fn negatives(&self) -> &[f64] {
        &self.negatives
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub p_plus: f64,
    /// dL/ds⁺
    pub grad_positive: f64,
    /// dL/ds⁻ⱼ, aligned with the input negatives.
    pub grad_negatives: Vec<f64>,
}

/// Softmax pieces, all computed relative to the max logit.
struct Softmax {
    p_plus: f64,
    /// `1 - p⁺`, summed from the negative probabilities so it keeps
    /// precision when `p⁺` is close to one.
    one_minus_p: f64,
    ln_p_plus: f64,
    neg_probs: Vec<f64>,
}

fn softmax(scores: &SimilarityScores, tau: f64) -> Softmax {
    let z_pos = scores.positive / tau;
    let z_max = scores.negatives.iter().map(|s| s / tau).fold(z_pos, f64::max);
    let e_pos = (z_pos - z_max).exp();
    let e_neg: Vec<f64> = scores.negatives.iter().map(|s| (s / tau - z_max).exp()).collect();
    let neg_sum: f64 = e_neg.iter().sum();
    let total = e_pos + neg_sum;
    let ln_p_plus = if z_pos >= z_max {
        // e_pos == 1 here.
        -neg_sum.ln_1p()
    } else {
        (z_pos - z_max) - total.ln()
    };
    Softmax {
        p_plus: e_pos / total,
        one_minus_p: neg_sum / total,
        ln_p_plus,
        neg_probs: e_neg.into_iter().map(|e| e / total).collect(),
    }
}

/// Softmax probability of the positive pair at temperature `tau`.
pub fn positive_probability(scores: &SimilarityScores, tau: f64) -> Result<f64> {
    validate_temperature(tau)?;
    Ok(softmax(scores, tau).p_plus)
}

/// Probabilities of every negative, aligned with `scores.negatives()`.
pub fn negative_probabilities(scores: &SimilarityScores, tau: f64) -> Result<Vec<f64>> {
    validate_temperature(tau)?;
    Ok(softmax(scores, tau).neg_probs)
}

pub fn infonce_loss(scores: &SimilarityScores, tau: f64) -> Result<LossOutput> {
    validate_temperature(tau)?;
    let sm = softmax(scores, tau);
    Ok(LossOutput {
        loss: -sm.ln_p_plus,
        p_plus: sm.p_plus,
        grad_positive: -sm.one_minus_p / tau,
        grad_negatives: sm.neg_probs.iter().map(|p| p / tau).collect(),
    })
}

pub fn weighted_loss(scores: &SimilarityScores, tau: f64) -> Result<LossOutput> {
    validate_temperature(tau)?;
    let sm = softmax(scores, tau);
    let infonce = -sm.ln_p_plus;
    // dL/dp⁺ = -(1-p)/p + ln p; folding dp⁺/ds into it leaves the InfoNCE
    // gradient times this factor.
    let damping = sm.one_minus_p - sm.p_plus * sm.ln_p_plus;
    Ok(LossOutput {
        loss: infonce * sm.one_minus_p,
        p_plus: sm.p_plus,
        grad_positive: -damping * sm.one_minus_p / tau,
        grad_negatives: sm.neg_probs.iter().map(|p| damping * p / tau).collect(),
    })
}

/// `(1 - p) - p ln p`: the factor by which the weighted objective scales the
/// InfoNCE score gradient.
pub fn gradient_damping(p_plus: f64) -> f64 {
    (1.0 - p_plus) - p_plus * p_plus.ln()
}

pub fn loss(scores: &SimilarityScores, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.variant {
        LossVariant::InfoNce => infonce_loss(scores, cfg.temperature),
        LossVariant::Weighted => weighted_loss(scores, cfg.temperature),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

fn nonzero_norm(v: &[f64]) -> Result<f64> {
    let n = norm(v);
    if n > 0.0 && n.is_finite() {
        Ok(n)
    } else {
        Err(Error::ZeroVector)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (nonzero_norm(a)?, nonzero_norm(b)?);
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity with both vectors' norms cached.
struct Unit<'a> {
    v: &'a [f64],
    norm: f64,
}

impl<'a> Unit<'a> {
    fn new(v: &'a [f64]) -> Result<Self> {
        Ok(Self {
            v,
            norm: nonzero_norm(v)?,
        })
    }

    fn cosine(&self, other: &Unit<'_>) -> f64 {
        dot(self.v, other.v) / (self.norm * other.norm)
    }
}

/// Adds `upstream · ∂cos(a,b)/∂a` into `grad_a` and the `b` counterpart into
/// `grad_b`, given the precomputed cosine `s`.
fn cosine_backward(a: &Unit<'_>, b: &Unit<'_>, s: f64, upstream: f64, grad_a: &mut [f64], grad_b: &mut [f64]) {
    let inv_ab = 1.0 / (a.norm * b.norm);
    let sa = s / (a.norm * a.norm);
    let sb = s / (b.norm * b.norm);
    for k in 0..a.v.len() {
        grad_a[k] += upstream * (b.v[k] * inv_ab - sa * a.v[k]);
        grad_b[k] += upstream * (a.v[k] * inv_ab - sb * b.v[k]);
    }
}

/// Mean in-batch loss and gradients w.r.t. every query and document embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct InBatchLoss {
    pub loss: f64,
    /// Per-anchor probability of the matching document.
    pub p_plus: Vec<f64>,
    pub query_grads: Vec<Vec<f64>>,
    pub doc_grads: Vec<Vec<f64>>,
}

/// Query `i` is scored against every document; document `i` is its positive
/// and all other documents in the batch are negatives. Duplicated documents
/// are not removed.
pub fn in_batch_loss<Q, D>(queries: &[Q], docs: &[D], cfg: &LossConfig) -> Result<InBatchLoss>
where
    Q: AsRef<[f64]>,
    D: AsRef<[f64]>,
{
    let n = queries.len();
    if n < 2 || docs.len() < 2 {
        return Err(Error::BatchTooSmall(n.min(docs.len())));
    }
    if docs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: docs.len(),
        });
    }
    let dim = queries[0].as_ref().len();
    for v in queries.iter().map(AsRef::as_ref).chain(docs.iter().map(AsRef::as_ref)) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
    }
    let qs = queries
        .iter()
        .map(|q| Unit::new(q.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let ds = docs.iter().map(|d| Unit::new(d.as_ref())).collect::<Result<Vec<_>>>()?;

    let mut query_grads = vec![vec![0.0; dim]; n];
    let mut doc_grads = vec![vec![0.0; dim]; n];
    let mut p_plus = Vec::with_capacity(n);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, q) in qs.iter().enumerate() {
        let sims: Vec<f64> = ds.iter().map(|d| q.cosine(d)).collect();
        let negatives: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sims[j]).collect();
        let out = loss(&SimilarityScores::new(sims[i], negatives)?, cfg)?;
        total += out.loss;
        p_plus.push(out.p_plus);

        let mut neg = out.grad_negatives.iter();
        for (j, d) in ds.iter().enumerate() {
            let upstream = if j == i {
                out.grad_positive
            } else {
                *neg.next().expect("one gradient per negative")
            } * inv_n;
            let (qg, dg) = (&mut query_grads[i], &mut doc_grads[j]);
            cosine_backward(q, d, sims[j], upstream, qg, dg);
        }
    }
    Ok(InBatchLoss {
        loss: total * inv_n,
        p_plus,
        query_grads,
        doc_grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub p_plus: f64,
    pub anchor_grad: Vec<f64>,
    pub positive_grad: Vec<f64>,
    pub negative_grads: Vec<Vec<f64>>,
}

/// Loss of one anchor against its positive and its own negatives.
pub fn triplet_group_loss<N: AsRef<[f64]>>(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[N],
    cfg: &LossConfig,
) -> Result<TripletLoss> {
    if negatives.is_empty() {
        return Err(Error::NoNegatives);
    }
    check_dims(anchor, positive)?;
    for n in negatives {
        check_dims(anchor, n.as_ref())?;
    }
    let a = Unit::new(anchor)?;
    let p = Unit::new(positive)?;
    let ns = negatives
        .iter()
        .map(|n| Unit::new(n.as_ref()))
        .collect::<Result<Vec<_>>>()?;

    let s_pos = a.cosine(&p);
    let s_neg: Vec<f64> = ns.iter().map(|n| a.cosine(n)).collect();
    let out = loss(&SimilarityScores::new(s_pos, s_neg.clone())?, cfg)?;

    let dim = anchor.len();
    let mut anchor_grad = vec![0.0; dim];
    let mut positive_grad = vec![0.0; dim];
    cosine_backward(&a, &p, s_pos, out.grad_positive, &mut anchor_grad, &mut positive_grad);
    let mut negative_grads = vec![vec![0.0; dim]; ns.len()];
    for ((n, s), (g, upstream)) in ns
        .iter()
        .zip(&s_neg)
        .zip(negative_grads.iter_mut().zip(&out.grad_negatives))
    {
        cosine_backward(&a, n, *s, *upstream, &mut anchor_grad, g);
    }
    Ok(TripletLoss {
        loss: out.loss,
        p_plus: out.p_plus,
        anchor_grad,
        positive_grad,
        negative_grads,
    })
}

/// Cosine similarity between two embeddings.
pub fn embedding_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_similarity(a, b)
}
