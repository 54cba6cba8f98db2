//! Training objectives: prototypical-network loss over prototypes, global
//! cross-entropy, the support/augmented-support contrastive loss and their
//! weighted combinations.
//!
//! Graph builders take stacked embedding matrices whose rows are grouped by
//! episode speaker: `counts[n]` consecutive rows belong to speaker `n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{softmax_row, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SquaredEuclidean,
    /// `1 - cos(a, b)`.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                1.0 - dot / (na * nb)
            }
        }
    }

    /// Pairwise distance matrix between the rows of `a` and `b`.
    pub fn pairwise(self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        Ok(match self {
            Metric::SquaredEuclidean => g.sq_dist(a, b)?,
            Metric::Cosine => {
                let c = g.cos_sim(a, b)?;
                let n = g.neg(c);
                g.add_scalar(n, 1.0)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub metric: Metric,
    /// L2-normalize embeddings before the metric-based losses.
    pub normalize_embeddings: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            metric: Metric::SquaredEuclidean,
            normalize_embeddings: true,
        }
    }
}

fn segments(counts: &[usize]) -> Result<Vec<(usize, usize)>> {
    let mut start = 0;
    let mut segs = Vec::with_capacity(counts.len());
    for (n, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Degenerate(format!("speaker {n} has an empty set")));
        }
        segs.push((start, c));
        start += c;
    }
    Ok(segs)
}

fn check_rows(g: &Graph, v: Var, counts: &[usize], what: &str) -> Result<()> {
    let rows = g.value(v).dims2().0;
    let expected: usize = counts.iter().sum();
    if rows != expected {
        return Err(Error::Misaligned(format!(
            "{what}: {rows} rows, grouping expects {expected}"
        )));
    }
    Ok(())
}

/// Per-speaker means of the support embeddings: `[N, dim]`.
pub fn prototypes_graph(g: &mut Graph, support: Var, counts: &[usize]) -> Result<Var> {
    check_rows(g, support, counts, "support")?;
    let segs = segments(counts)?;
    Ok(g.segment_mean(support, &segs)?)
}

/// Mean over speakers of the mean over that speaker's queries of
/// `-log p(correct speaker)`, where `p` is a softmax over negative metric
/// distances to the prototypes.
pub fn pn_loss(
    g: &mut Graph,
    support: Var,
    support_counts: &[usize],
    query: Var,
    query_counts: &[usize],
    metric: Metric,
) -> Result<Var> {
    let n = support_counts.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "prototypical loss needs at least 2 speakers, got {n}"
        )));
    }
    if query_counts.len() != n {
        return Err(Error::Misaligned(format!(
            "{n} support groups but {} query groups",
            query_counts.len()
        )));
    }
    check_rows(g, query, query_counts, "query")?;
    segments(query_counts)?;
    let centroids = prototypes_graph(g, support, support_counts)?;
    let dist = metric.pairwise(g, query, centroids)?;
    let logits = g.neg(dist);
    let logp = g.log_softmax_rows(logits);
    let (labels, weights) = speaker_rows(query_counts);
    let picked = g.pick(logp, &labels)?;
    Ok(g.weighted_sum(picked, &weights)?)
}

/// Row labels and `-1 / (N · count_n)` averaging weights for a grouping.
fn speaker_rows(counts: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = counts.len() as f64;
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for (s, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            labels.push(s);
            weights.push(-1.0 / (n * c as f64));
        }
    }
    (labels, weights)
}

/// Mean negative log posterior of the true global label under the classifier.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = g.value(logits).dims2();
    if labels.len() != rows {
        return Err(Error::Misaligned(format!(
            "{rows} logit rows, {} labels",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick(logp, labels)?;
    let mean = g.mean(picked);
    Ok(g.neg(mean))
}

/// Contrastive loss between each original embedding and its augmented
/// counterpart. The softmax for row `i` runs over the distances from
/// original `i` to every augmented embedding in the episode, so the other
/// augmented rows act as negatives. Row terms are averaged per speaker, then
/// over speakers.
pub fn contrastive_loss(
    g: &mut Graph,
    original: Var,
    augmented: Var,
    counts: &[usize],
    metric: Metric,
) -> Result<Var> {
    if g.value(original).shape() != g.value(augmented).shape() {
        return Err(Error::Misaligned(format!(
            "original {:?} and augmented {:?} embeddings differ in shape",
            g.value(original).shape(),
            g.value(augmented).shape()
        )));
    }
    check_rows(g, original, counts, "contrastive")?;
    segments(counts)?;
    let dist = metric.pairwise(g, original, augmented)?;
    let logits = g.neg(dist);
    let logp = g.log_softmax_rows(logits);
    let rows: usize = counts.iter().sum();
    let diag: Vec<usize> = (0..rows).collect();
    let picked = g.pick(logp, &diag)?;
    let (_, weights) = speaker_rows(counts);
    Ok(g.weighted_sum(picked, &weights)?)
}

/// `ce + λ · pn`
pub fn combined_cp(g: &mut Graph, ce: Var, pn: Var, lambda: f64) -> Result<Var> {
    let w = g.scale(pn, lambda);
    Ok(g.add(ce, w)?)
}

/// `ce + λ · (pn + contra)`
pub fn combined_cpc(g: &mut Graph, ce: Var, pn: Var, contra: Var, lambda: f64) -> Result<Var> {
    let s = g.add(pn, contra)?;
    let w = g.scale(s, lambda);
    Ok(g.add(ce, w)?)
}

pub fn combined_cp_value(ce: f64, pn: f64, lambda: f64) -> f64 {
    ce + lambda * pn
}

pub fn combined_cpc_value(ce: f64, pn: f64, contra: f64, lambda: f64) -> f64 {
    ce + lambda * (pn + contra)
}

/// Arithmetic mean of each group of vectors.
pub fn prototypes(groups: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let (m, counts) = stack(&mut g, groups)?;
    let c = prototypes_graph(&mut g, m, &counts)?;
    Ok(rows_of(g.value(c)))
}

/// Posterior over the centroids for one query embedding.
pub fn query_posterior(query: &[f64], centroids: &[Vec<f64>], metric: Metric) -> Vec<f64> {
    let logits: Vec<f64> = centroids
        .iter()
        .map(|c| -metric.distance(query, c))
        .collect();
    softmax_row(&logits)
}

/// Per-speaker support and query embeddings of one episode.
#[derive(Clone, Debug, Default)]
pub struct EpisodeEmbeddings {
    pub support: Vec<Vec<Vec<f64>>>,
    pub query: Vec<Vec<Vec<f64>>>,
}

pub fn pn_loss_value(e: &EpisodeEmbeddings, metric: Metric) -> Result<f64> {
    let mut g = Graph::new();
    let (s, sc) = stack(&mut g, &e.support)?;
    let (q, qc) = stack(&mut g, &e.query)?;
    let l = pn_loss(&mut g, s, &sc, q, &qc, metric)?;
    Ok(g.scalar(l))
}

pub fn contrastive_loss_value(
    original: &[Vec<Vec<f64>>],
    augmented: &[Vec<Vec<f64>>],
    metric: Metric,
) -> Result<f64> {
    let oc: Vec<usize> = original.iter().map(Vec::len).collect();
    let ac: Vec<usize> = augmented.iter().map(Vec::len).collect();
    if oc != ac {
        return Err(Error::Misaligned(format!("group sizes {oc:?} vs {ac:?}")));
    }
    let mut g = Graph::new();
    let (o, counts) = stack(&mut g, original)?;
    let (a, _) = stack(&mut g, augmented)?;
    let l = contrastive_loss(&mut g, o, a, &counts, metric)?;
    Ok(g.scalar(l))
}

pub fn ce_loss_value(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let (l, _) = stack(&mut g, &[logits.to_vec()])?;
    let v = ce_loss(&mut g, l, labels)?;
    Ok(g.scalar(v))
}

/// Stacks grouped vectors into one constant matrix.
pub(crate) fn stack(g: &mut Graph, groups: &[Vec<Vec<f64>>]) -> Result<(Var, Vec<usize>)> {
    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let dim = groups
        .iter()
        .flatten()
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::Degenerate("no vectors".into()))?;
    let mut data = Vec::new();
    for v in groups.iter().flatten() {
        if v.len() != dim {
            return Err(Error::Misaligned(format!(
                "vector of length {} among length {dim}",
                v.len()
            )));
        }
        data.extend_from_slice(v);
    }
    let rows = data.len() / dim;
    Ok((g.constant(Tensor::matrix(rows, dim, data)?), counts))
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.dims2().0).map(|r| t.row(r).to_vec()).collect()
}
