//! Sentence-pair corpora: TSV loading, class labelling, splitting, and a
//! synthetic corpus generator with known latent geometry.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Top of the similarity scale.
pub const MAX_SCORE: f64 = 5.0;
/// Gold scores at or above this value are upper-range.
pub const UPPER_THRESHOLD: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    Upper,
    Lower,
}

impl Class {
    pub fn of_score(score: f64) -> Class {
        if score >= UPPER_THRESHOLD {
            Class::Upper
        } else {
            Class::Lower
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Class::Upper => f.write_str("upper"),
            Class::Lower => f.write_str("lower"),
        }
    }
}

/// Partition of `[0, 5]` into half-open bins, the last closed at 5.
///
/// Stored as the interior boundaries in ascending order. Bin 0 is the top
/// (most similar) bin, so under the default scheme bin 0 is upper-range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinScheme {
    boundaries: Vec<f64>,
}

impl Default for BinScheme {
    fn default() -> Self {
        BinScheme {
            boundaries: vec![UPPER_THRESHOLD],
        }
    }
}

impl BinScheme {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::Config("a bin scheme needs at least two bins".into()));
        }
        if boundaries.iter().any(|b| !(*b > 0.0 && *b < MAX_SCORE)) {
            return Err(Error::Config(format!(
                "bin boundaries must lie strictly inside (0, {MAX_SCORE}), got {boundaries:?}"
            )));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "bin boundaries must be strictly increasing, got {boundaries:?}"
            )));
        }
        Ok(BinScheme { boundaries })
    }

    /// `[0,1), [1,2), [2,3), [3,4), [4,5]`.
    pub fn unit_bins() -> Self {
        BinScheme {
            boundaries: vec![1.0, 2.0, 3.0, 4.0],
        }
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bin_of(&self, score: f64) -> usize {
        self.boundaries.iter().filter(|&&b| score < b).count()
    }

    /// `(low, high)` of bin `i`, top bin first.
    pub fn range(&self, i: usize) -> (f64, f64) {
        let k = self.boundaries.len();
        let hi = if i == 0 {
            MAX_SCORE
        } else {
            self.boundaries[k - i]
        };
        let lo = if i == k {
            0.0
        } else {
            self.boundaries[k - 1 - i]
        };
        (lo, hi)
    }
}

/// Two tokenised sentences with a gold similarity score in `[0, 5]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    pub sent1: Vec<usize>,
    pub sent2: Vec<usize>,
    pub gold_score: f64,
    pub class: Class,
    /// Index under the corpus [`BinScheme`].
    pub bin: usize,
    /// `gold_score / 5`.
    pub y_sim: f64,
}

impl SentencePair {
    pub fn new(
        id: impl Into<String>,
        sent1: Vec<usize>,
        sent2: Vec<usize>,
        gold_score: f64,
        scheme: &BinScheme,
    ) -> Result<Self> {
        if !(0.0..=MAX_SCORE).contains(&gold_score) {
            return Err(Error::Domain(format!(
                "gold score {gold_score} is outside [0, {MAX_SCORE}]"
            )));
        }
        if sent1.is_empty() || sent2.is_empty() {
            return Err(Error::EmptySequence("sentence pair"));
        }
        Ok(SentencePair {
            id: id.into(),
            sent1,
            sent2,
            gold_score,
            class: Class::of_score(gold_score),
            bin: scheme.bin_of(gold_score),
            y_sim: gold_score / MAX_SCORE,
        })
    }

    /// Recompute `bin` under another scheme.
    pub fn relabel(&mut self, scheme: &BinScheme) {
        self.bin = scheme.bin_of(self.gold_score);
    }
}

/// Token vocabulary; the line number in a vocabulary file is the token id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Vocab::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab::new();
        for t in tokens {
            let t = t.into();
            if vocab.index.contains_key(&t) {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
            vocab.insert(&t);
        }
        Ok(vocab)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(text.lines().map(str::to_string))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub vocab: Vocab,
    pub pairs: Vec<SentencePair>,
    pub scheme: BinScheme,
    pub seed: Option<u64>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn count(&self, class: Class) -> usize {
        self.pairs.iter().filter(|p| p.class == class).count()
    }

    /// Re-derive every pair's bin under `scheme`.
    pub fn with_scheme(mut self, scheme: BinScheme) -> Self {
        for p in &mut self.pairs {
            p.relabel(&scheme);
        }
        self.scheme = scheme;
        self
    }

    fn subset(&self, name: &str, pairs: Vec<SentencePair>) -> Corpus {
        Corpus {
            name: name.to_string(),
            vocab: self.vocab.clone(),
            pairs,
            scheme: self.scheme.clone(),
            seed: self.seed,
        }
    }

    /// Parse `sent1<TAB>sent2<TAB>score[<TAB>id]` records.
    ///
    /// With a fixed `vocab` unknown tokens are parse errors; without one the
    /// vocabulary is built in order of first appearance. Blank lines are
    /// skipped. Pairs without an id column get their 0-based record index.
    pub fn parse_tsv(
        text: &str,
        source: &str,
        vocab: Option<Vocab>,
        scheme: &BinScheme,
    ) -> Result<Corpus> {
        let fixed = vocab.is_some();
        let mut vocab = vocab.unwrap_or_default();
        let mut pairs = Vec::new();
        let parse_err = |line: usize, column: usize, message: String| Error::Parse {
            path: source.to_string(),
            line,
            column,
            message,
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() < 3 || fields.len() > 4 {
                return Err(parse_err(
                    line,
                    1,
                    format!(
                        "expected 3 or 4 tab-separated fields, found {}",
                        fields.len()
                    ),
                ));
            }
            let mut sents = [Vec::new(), Vec::new()];
            for (col, sent) in sents.iter_mut().enumerate() {
                for tok in fields[col].split_whitespace() {
                    let id = if fixed {
                        vocab.id(tok).ok_or_else(|| {
                            parse_err(
                                line,
                                col + 1,
                                format!("token `{tok}` is not in the vocabulary"),
                            )
                        })?
                    } else {
                        vocab.insert(tok)
                    };
                    sent.push(id);
                }
                if sent.is_empty() {
                    return Err(parse_err(line, col + 1, "empty sentence".into()));
                }
            }
            let score: f64 = fields[2].trim().parse().map_err(|_| {
                parse_err(
                    line,
                    3,
                    format!("score `{}` is not a decimal number", fields[2]),
                )
            })?;
            if !(0.0..=MAX_SCORE).contains(&score) {
                return Err(parse_err(
                    line,
                    3,
                    format!("score {score} is outside [0, {MAX_SCORE}]"),
                ));
            }
            let id = match fields.get(3) {
                Some(id) => id.trim().to_string(),
                None => pairs.len().to_string(),
            };
            let [s1, s2] = sents;
            pairs.push(SentencePair::new(id, s1, s2, score, scheme)?);
        }
        Ok(Corpus {
            name: source.to_string(),
            vocab,
            pairs,
            scheme: scheme.clone(),
            seed: None,
        })
    }

    pub fn load_tsv(
        path: impl AsRef<Path>,
        vocab: Option<Vocab>,
        scheme: &BinScheme,
    ) -> Result<Corpus> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Corpus::parse_tsv(&text, &path.display().to_string(), vocab, scheme)
    }

    /// Render as TSV with the id column; scores use shortest round-trip
    /// decimal so re-loading reproduces them exactly.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                self.vocab.render(&p.sent1),
                self.vocab.render(&p.sent2),
                p.gold_score,
                p.id
            ));
        }
        out
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Plain sentence strings (both sides of every pair), for n-gram audits.
    pub fn sentences(&self) -> Vec<String> {
        self.pairs
            .iter()
            .flat_map(|p| [self.vocab.render(&p.sent1), self.vocab.render(&p.sent2)])
            .collect()
    }
}

/// Deterministically shuffle and cut `corpus` into consecutive parts.
///
/// Part sizes are `floor(f * n)` with the remainder handed out to the
/// earliest parts, so they always cover the corpus exactly.
pub fn split(corpus: &Corpus, fractions: &[f64], seed: u64) -> Result<Vec<Corpus>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::Argument(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    let n = corpus.len();
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| (f * n as f64 + 1e-9).floor() as usize)
        .collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    for s in sizes.iter_mut() {
        if rest == 0 {
            break;
        }
        *s += 1;
        rest -= 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Argument(format!(
            "cannot split {n} pairs into fractions {fractions:?} without an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let names = ["train", "dev", "test"];
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (k, size) in sizes.into_iter().enumerate() {
        let pairs = order[start..start + size]
            .iter()
            .map(|&i| corpus.pairs[i].clone())
            .collect();
        let name = names
            .get(k)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("part{k}"));
        parts.push(corpus.subset(&name, pairs));
        start += size;
    }
    Ok(parts)
}

/// Parameters of [`synth_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Standard deviation of the additive gold-score noise.
    pub noise: f64,
    /// Share of pairs drawn from the upper-range mixture component.
    pub upper_share: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_pairs: 2000,
            dim: 16,
            vocab_size: 512,
            seed: 0,
            noise: 0.15,
            upper_share: 0.45,
            min_len: 6,
            max_len: 12,
        }
    }
}

/// The generator's ground truth: token and sentence directions.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGeometry {
    /// Generator settings that reproduce this geometry.
    pub config: SynthConfig,
    pub dim: usize,
    /// `V` unit vectors, one per token id.
    pub token_dirs: Vec<Vec<f64>>,
    /// Per pair id, the two latent sentence directions.
    pub pair_latents: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl LatentGeometry {
    pub fn latent_cosine(&self, pair_id: &str) -> Option<f64> {
        self.pair_latents.get(pair_id).map(|(a, b)| cosine(a, b))
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Noise-free gold score of a pair whose latent directions have cosine `cos`.
pub fn score_from_cosine(cos: f64) -> f64 {
    (MAX_SCORE * (0.5 + 0.5 * cos)).clamp(0.0, MAX_SCORE)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A unit vector at exactly cosine `cos` from the unit vector `anchor`.
fn rotate_towards(rng: &mut ChaCha8Rng, anchor: &[f64], cos: f64) -> Vec<f64> {
    loop {
        let mut v = random_unit(rng, anchor.len());
        let proj: f64 = v.iter().zip(anchor).map(|(x, a)| x * a).sum();
        v.iter_mut().zip(anchor).for_each(|(x, a)| *x -= proj * a);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            continue;
        }
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        return anchor
            .iter()
            .zip(&v)
            .map(|(a, x)| cos * a + sin * x / n)
            .collect();
    }
}

/// Greedy token multiset whose mean direction tracks `dir`: each step adds
/// one of the three tokens that best align the running sum with `dir`.
fn sentence_for(rng: &mut ChaCha8Rng, tokens: &[Vec<f64>], dir: &[f64], len: usize) -> Vec<usize> {
    let dim = dir.len();
    let mut sum = vec![0.0; dim];
    let mut ids = Vec::with_capacity(len);
    for _ in 0..len {
        let mut best: Vec<(f64, usize)> = tokens
            .iter()
            .enumerate()
            .map(|(id, t)| {
                let cand: Vec<f64> = sum.iter().zip(t).map(|(s, x)| s + x).collect();
                (cosine(&cand, dir), id)
            })
            .collect();
        best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let pick = best[rng.random_range(0..3.min(best.len()))].1;
        sum.iter_mut().zip(&tokens[pick]).for_each(|(s, x)| *s += x);
        ids.push(pick);
    }
    ids
}

/// Generate a corpus whose gold scores are noisy monotone functions of the
/// cosine between two latent sentence directions.
///
/// Pairs come from a two-component mixture: an upper component with noise-free
/// score uniform on `[4, 5]` and a lower one uniform on `[0, 4)`. The share of
/// upper pairs is fixed exactly (`upper_share`, kept within `[0.25, 0.75]`), and
/// noise draws that would move a pair across the class boundary are redrawn,
/// so both classes always hold at least a quarter of the pairs.
pub fn synth_corpus(config: &SynthConfig) -> Result<(Corpus, LatentGeometry)> {
    let SynthConfig {
        n_pairs,
        dim,
        vocab_size,
        seed,
        noise,
        upper_share,
        min_len,
        max_len,
    } = *config;
    if n_pairs < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 pairs, got {n_pairs}"
        )));
    }
    if dim < 2 {
        return Err(Error::Argument(format!(
            "latent dimension must be at least 2, got {dim}"
        )));
    }
    if vocab_size < dim {
        return Err(Error::Argument(format!(
            "vocabulary size {vocab_size} is smaller than the dimension {dim}"
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Argument(format!(
            "noise must be a finite non-negative number, got {noise}"
        )));
    }
    if !(0.25..=0.75).contains(&upper_share) {
        return Err(Error::Argument(format!(
            "upper share must lie in [0.25, 0.75], got {upper_share}"
        )));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Argument(format!(
            "sentence length range {min_len}..={max_len} is empty"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let token_dirs: Vec<Vec<f64>> = (0..vocab_size)
        .map(|_| random_unit(&mut rng, dim))
        .collect();
    let vocab = Vocab::from_tokens((0..vocab_size).map(|i| format!("t{i}")))?;
    let scheme = BinScheme::default();

    let quarter = n_pairs.div_ceil(4);
    let n_upper =
        ((upper_share * n_pairs as f64).round() as usize).clamp(quarter, n_pairs - quarter);
    let mut is_upper: Vec<bool> = (0..n_pairs).map(|i| i < n_upper).collect();
    is_upper.shuffle(&mut rng);

    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let width = n_pairs.to_string().len();
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut pair_latents = HashMap::with_capacity(n_pairs);
    for (i, upper) in is_upper.into_iter().enumerate() {
        let clean = if upper {
            rng.random_range(UPPER_THRESHOLD..=MAX_SCORE)
        } else {
            rng.random_range(0.0..UPPER_THRESHOLD)
        };
        let cos = 2.0 * clean / MAX_SCORE - 1.0;
        let l1 = random_unit(&mut rng, dim);
        let l2 = rotate_towards(&mut rng, &l1, cos);
        let mut gold = score_from_cosine(cosine(&l1, &l2));
        if noise > 0.0 {
            let clean = gold;
            loop {
                gold = (clean + normal.sample(&mut rng)).clamp(0.0, MAX_SCORE);
                if (gold >= UPPER_THRESHOLD) == upper {
                    break;
                }
            }
        } else if upper {
            gold = gold.max(UPPER_THRESHOLD);
        } else if gold >= UPPER_THRESHOLD {
            gold = UPPER_THRESHOLD - 1e-9;
        }
        let len1 = rng.random_range(min_len..=max_len);
        let len2 = rng.random_range(min_len..=max_len);
        let s1 = sentence_for(&mut rng, &token_dirs, &l1, len1);
        let s2 = sentence_for(&mut rng, &token_dirs, &l2, len2);
        let id = format!("p{i:0width$}");
        pairs.push(SentencePair::new(id.clone(), s1, s2, gold, &scheme)?);
        pair_latents.insert(id, (l1, l2));
    }

    let corpus = Corpus {
        name: format!("synthetic-{seed}"),
        vocab,
        pairs,
        scheme,
        seed: Some(seed),
    };
    let geometry = LatentGeometry {
        config: config.clone(),
        dim,
        token_dirs,
        pair_latents,
    };
    Ok((corpus, geometry))
}

/// `key=value` sidecar describing a synthetic corpus.
pub fn synth_metadata(config: &SynthConfig) -> String {
    format!(
        "seed={}\ndim={}\nvocab_size={}\npairs={}\nnoise={}\nupper_share={}\nmin_len={}\nmax_len={}\n",
        config.seed,
        config.dim,
        config.vocab_size,
        config.n_pairs,
        config.noise,
        config.upper_share,
        config.min_len,
        config.max_len
    )
}

impl SynthConfig {
    /// Inverse of [`synth_metadata`]. Missing keys keep their defaults.
    pub fn from_metadata(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut cfg = SynthConfig::default();
        fn field<T: std::str::FromStr>(
            kv: &HashMap<String, String>,
            key: &str,
            slot: &mut T,
        ) -> Result<()> {
            if let Some(v) = kv.get(key) {
                *slot = v.parse().map_err(|_| {
                    Error::Config(format!("metadata `{key}` has unparseable value `{v}`"))
                })?;
            }
            Ok(())
        }
        field(&kv, "seed", &mut cfg.seed)?;
        field(&kv, "dim", &mut cfg.dim)?;
        field(&kv, "vocab_size", &mut cfg.vocab_size)?;
        field(&kv, "pairs", &mut cfg.n_pairs)?;
        field(&kv, "noise", &mut cfg.noise)?;
        field(&kv, "upper_share", &mut cfg.upper_share)?;
        field(&kv, "min_len", &mut cfg.min_len)?;
        field(&kv, "max_len", &mut cfg.max_len)?;
        Ok(cfg)
    }
}

/// Parse a `key=value` text file, ignoring blank lines and `#` comments.
pub fn parse_key_values(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: "metadata".into(),
            line: i + 1,
            column: 1,
            message: format!("expected key=value, found `{line}`"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
