//! Ranking and classification metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Class;
use crate::error::{Error, Result};
use crate::mixsp::ParamCount;

/// 1-based ranks with ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(metric: &'static str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!(
            "{metric}: inputs have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::undefined(
            metric,
            format!("needs at least 2 points, got {}", x.len()),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{metric}: non-finite input")));
    }
    Ok(())
}

fn product_moment(metric: &'static str, x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::undefined(metric, "an input is constant"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("pearson", x, y)?;
    product_moment("pearson", x, y)
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("spearman", x, y)?;
    product_moment("spearman", &average_ranks(x), &average_ranks(y))
}

/// Spearman within each gold class; each side fails independently.
pub fn per_class_spearman(
    pred: &[f64],
    gold: &[f64],
    classes: &[Class],
) -> (Result<f64>, Result<f64>) {
    let subset = |c: Class| -> Result<f64> {
        if pred.len() != classes.len() || gold.len() != classes.len() {
            return Err(Error::Argument(
                "per-class spearman: inputs differ in length".into(),
            ));
        }
        let (p, g): (Vec<f64>, Vec<f64>) = classes
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == c)
            .map(|(i, _)| (pred[i], gold[i]))
            .unzip();
        spearman(&p, &g).map_err(|e| Error::undefined("spearman", format!("{c} class: {e}")))
    };
    (subset(Class::Upper), subset(Class::Lower))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub score: f64,
    #[serde(with = "relevance")]
    pub relevant: bool,
}

mod relevance {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(D::Error::custom(format!(
                "relevance must be 0 or 1, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
}

/// Read reranking queries, one JSON object per line.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Average precision of candidates sorted by descending score (stable, so
/// ties keep input order). `None` when nothing is relevant.
pub fn average_precision(candidates: &[Candidate]) -> Option<f64> {
    let mut order: Vec<&Candidate> = candidates.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, c) in order.iter().enumerate() {
        if c.relevant {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub scored: usize,
    /// Queries without a relevant candidate, left out of the mean.
    pub skipped: usize,
}

pub fn map(queries: &[Query]) -> Result<MapResult> {
    let aps: Vec<f64> = queries
        .iter()
        .filter_map(|q| average_precision(&q.candidates))
        .collect();
    let skipped = queries.len() - aps.len();
    if aps.is_empty() {
        return Err(Error::undefined(
            "map",
            format!("none of {} queries has a relevant candidate", queries.len()),
        ));
    }
    Ok(MapResult {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        scored: aps.len(),
        skipped,
    })
}

/// Mann–Whitney AUC: share of (positive, negative) pairs ranked correctly,
/// ties counting half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::undefined("auc", "labels contain a single class"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled count of wins plus ties, exact in integers
    let mut twice: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..=j];
        let p = group.iter().filter(|&&k| labels[k]).count() as u64;
        let n = group.len() as u64 - p;
        twice += p * (2 * negatives_below + n);
        negatives_below += n;
        i = j + 1;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterAccuracy {
    /// Share of sentences routed to their pair's gold bin.
    pub per_sentence: f64,
    /// Share of pairs whose two sentences are both routed correctly.
    pub per_pair: f64,
}

pub fn router_accuracy(chosen: &[[usize; 2]], gold_bins: &[usize]) -> Result<RouterAccuracy> {
    if chosen.len() != gold_bins.len() {
        return Err(Error::Argument(format!(
            "router accuracy: {} decisions but {} labels",
            chosen.len(),
            gold_bins.len()
        )));
    }
    if chosen.is_empty() {
        return Err(Error::undefined("router accuracy", "no pairs"));
    }
    let mut sentences = 0usize;
    let mut pairs = 0usize;
    for (c, g) in chosen.iter().zip(gold_bins) {
        let right = c.iter().filter(|x| *x == g).count();
        sentences += right;
        pairs += usize::from(right == 2);
    }
    Ok(RouterAccuracy {
        per_sentence: sentences as f64 / (2 * chosen.len()) as f64,
        per_pair: pairs as f64 / chosen.len() as f64,
    })
}

/// Evaluation summary. Metrics that could not be computed are `None` with a
/// reason under `errors`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub spearman_overall: Option<f64>,
    pub spearman_upper: Option<f64>,
    pub spearman_lower: Option<f64>,
    pub pearson: Option<f64>,
    pub router_accuracy: Option<f64>,
    pub router_accuracy_pairs: Option<f64>,
    pub map: Option<f64>,
    pub auc: Option<f64>,
    pub overlap: Option<f64>,
    /// `alignment` over projected vectors of upper-class pairs.
    pub alignment_z: Option<f64>,
    /// `uniformity` over all projected vectors.
    pub uniformity_z: Option<f64>,
    pub param_count: Option<ParamCount>,
    pub skipped_pairs: usize,
    pub errors: BTreeMap<String, String>,
}

impl EvalReport {
    /// Record `r` into `slot`, or its error under `name`.
    pub fn record(&mut self, name: &str, r: Result<f64>) -> Option<f64> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.insert(name.to_string(), e.to_string());
                None
            }
        }
    }
}
