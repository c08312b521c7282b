//! Pair encoders producing `(h_cls, h_x1, h_x2)`.
//!
//! Three interchangeable implementations sit behind [`Encoder`]: a small
//! trainable bag-of-embeddings model, a read-only store of precomputed
//! vectors, and a test double that emits the synthetic generator's latents.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{LatentGeometry, SentencePair};
use crate::diffkit::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub h_cls: Vec<f64>,
    pub h_x1: Vec<f64>,
    pub h_x2: Vec<f64>,
}

impl EncodedPair {
    pub fn new(h_cls: Vec<f64>, h_x1: Vec<f64>, h_x2: Vec<f64>) -> Result<Self> {
        let d = h_cls.len();
        for (what, v) in [("h_x1", &h_x1), ("h_x2", &h_x2)] {
            if v.len() != d {
                return Err(Error::Dimension {
                    what: what.into(),
                    expected: d,
                    found: v.len(),
                });
            }
        }
        if d == 0 {
            return Err(Error::EmptySequence("encoded pair"));
        }
        if [&h_cls, &h_x1, &h_x2]
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Domain(
                "encoded pair contains a non-finite value".into(),
            ));
        }
        Ok(EncodedPair { h_cls, h_x1, h_x2 })
    }

    pub fn dim(&self) -> usize {
        self.h_cls.len()
    }
}

/// Tape handles for an encoded pair.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub h_cls: Var,
    pub h_x1: Var,
    pub h_x2: Var,
}

pub(crate) fn uniform_tensor<R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    bound: f64,
) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let values = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, values).expect("shape matches value count")
}

/// Bag-of-embeddings stand-in for a pretrained pair encoder.
///
/// `m_j` is the mean embedding of sentence `j`;
/// `h_xj = tanh(W_ctx m_j + b_ctx)` and `h_cls = tanh(W_cls (m_1 + m_2) + b_cls)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    /// `V×d`.
    pub embedding: Tensor,
    pub w_ctx: Tensor,
    pub b_ctx: Tensor,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
    pub trainable: bool,
}

/// Tape leaves of a [`ToyEncoder`].
#[derive(Clone, Copy, Debug)]
pub struct ToyVars {
    pub embedding: Var,
    pub w_ctx: Var,
    pub b_ctx: Var,
    pub w_cls: Var,
    pub b_cls: Var,
}

impl ToyEncoder {
    pub const PARAM_NAMES: [&'static str; 5] = [
        "encoder.embedding",
        "encoder.w_ctx",
        "encoder.b_ctx",
        "encoder.w_cls",
        "encoder.b_cls",
    ];

    /// Unit-norm random embedding rows; dense layers uniform in `±1/sqrt(d)`.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        vocab_size: usize,
        dim: usize,
        trainable: bool,
    ) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::Argument(format!(
                "encoder needs a positive vocabulary and dimension, got V={vocab_size}, d={dim}"
            )));
        }
        let mut rows = Vec::with_capacity(vocab_size * dim);
        for _ in 0..vocab_size {
            let mut row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
            rows.extend(row);
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(ToyEncoder {
            embedding: Tensor::matrix(vocab_size, dim, rows)?,
            w_ctx: uniform_tensor(rng, vec![dim, dim], bound),
            b_ctx: uniform_tensor(rng, vec![dim], bound),
            w_cls: uniform_tensor(rng, vec![dim, dim], bound),
            b_cls: uniform_tensor(rng, vec![dim], bound),
            trainable,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embedding.shape()[1]
    }

    /// Check that every tensor agrees with `V×d`.
    pub fn validate(&self) -> Result<()> {
        let d = match self.embedding.shape() {
            [_, d] => *d,
            other => {
                return Err(Error::Checkpoint(format!(
                    "embedding table must be a matrix, got shape {other:?}"
                )))
            }
        };
        for (name, t, shape) in [
            ("encoder.w_ctx", &self.w_ctx, vec![d, d]),
            ("encoder.b_ctx", &self.b_ctx, vec![d]),
            ("encoder.w_cls", &self.w_cls, vec![d, d]),
            ("encoder.b_cls", &self.b_cls, vec![d]),
        ] {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            (Self::PARAM_NAMES[0], &self.embedding),
            (Self::PARAM_NAMES[1], &self.w_ctx),
            (Self::PARAM_NAMES[2], &self.b_ctx),
            (Self::PARAM_NAMES[3], &self.w_cls),
            (Self::PARAM_NAMES[4], &self.b_cls),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            (Self::PARAM_NAMES[0], &mut self.embedding),
            (Self::PARAM_NAMES[1], &mut self.w_ctx),
            (Self::PARAM_NAMES[2], &mut self.b_ctx),
            (Self::PARAM_NAMES[3], &mut self.w_cls),
            (Self::PARAM_NAMES[4], &mut self.b_cls),
        ]
    }

    /// Total scalar count, whether or not the encoder is trainable.
    pub fn size(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Record the parameters; differentiable iff `differentiable`.
    pub fn register(&self, tape: &mut Tape, differentiable: bool) -> ToyVars {
        let mut put = |t: &Tensor| {
            if differentiable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        ToyVars {
            embedding: put(&self.embedding),
            w_ctx: put(&self.w_ctx),
            b_ctx: put(&self.b_ctx),
            w_cls: put(&self.w_cls),
            b_cls: put(&self.b_cls),
        }
    }

    pub fn encode_on_tape(
        tape: &mut Tape,
        vars: &ToyVars,
        sent1: &[usize],
        sent2: &[usize],
    ) -> Result<EncodedVars> {
        let mean = |tape: &mut Tape, ids: &[usize]| -> Result<Var> {
            if ids.is_empty() {
                return Err(Error::EmptySequence("sentence"));
            }
            let rows = tape.gather_rows(vars.embedding, ids)?;
            tape.mean_pool(rows)
        };
        let m1 = mean(tape, sent1)?;
        let m2 = mean(tape, sent2)?;
        let a1 = tape.linear(vars.w_ctx, vars.b_ctx, m1)?;
        let h_x1 = tape.tanh(a1);
        let a2 = tape.linear(vars.w_ctx, vars.b_ctx, m2)?;
        let h_x2 = tape.tanh(a2);
        let both = tape.add(m1, m2)?;
        let ac = tape.linear(vars.w_cls, vars.b_cls, both)?;
        let h_cls = tape.tanh(ac);
        Ok(EncodedVars { h_cls, h_x1, h_x2 })
    }

    pub fn encode(&self, sent1: &[usize], sent2: &[usize]) -> Result<EncodedPair> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let e = Self::encode_on_tape(&mut tape, &vars, sent1, sent2)?;
        EncodedPair::new(
            tape.value(e.h_cls).to_vec(),
            tape.value(e.h_x1).to_vec(),
            tape.value(e.h_x2).to_vec(),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    id: String,
    cls: Vec<f64>,
    x1: Vec<f64>,
    x2: Vec<f64>,
}

/// Read-only map from pair id to a precomputed encoding, persisted as
/// JSON lines `{"id", "cls", "x1", "x2"}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenStore {
    /// File the store was loaded from, if any.
    pub origin: Option<PathBuf>,
    dim: Option<usize>,
    entries: HashMap<String, EncodedPair>,
    order: Vec<String>,
}

impl FrozenStore {
    pub fn new() -> Self {
        FrozenStore::default()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, pair: EncodedPair) -> Result<()> {
        let id = id.into();
        match self.dim {
            Some(d) if d != pair.dim() => {
                return Err(Error::Dimension {
                    what: format!("stored encoding `{id}`"),
                    expected: d,
                    found: pair.dim(),
                })
            }
            _ => self.dim = Some(pair.dim()),
        }
        if self.entries.insert(id.clone(), pair).is_none() {
            self.order.push(id);
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&EncodedPair> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::MissingId(id.to_string()))
    }

    /// Load a store; when `expected_dim` is given every record must match it.
    pub fn load(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = FrozenStore::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StoreRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            let pair = EncodedPair::new(rec.cls, rec.x1, rec.x2)?;
            if let Some(d) = expected_dim {
                if pair.dim() != d {
                    return Err(Error::Dimension {
                        what: format!("stored encoding `{}`", rec.id),
                        expected: d,
                        found: pair.dim(),
                    });
                }
            }
            store.insert(rec.id, pair)?;
        }
        store.origin = Some(path.to_path_buf());
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for id in &self.order {
            let p = &self.entries[id];
            let rec = StoreRecord {
                id: id.clone(),
                cls: p.h_cls.clone(),
                x1: p.h_x1.clone(),
                x2: p.h_x2.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Test double: `h_xj` is the latent direction of sentence `j` and `h_cls`
/// the normalised midpoint of the two.
pub fn encode_synthetic(geometry: &LatentGeometry, pair_id: &str) -> Result<EncodedPair> {
    let (l1, l2) = geometry
        .pair_latents
        .get(pair_id)
        .ok_or_else(|| Error::MissingId(pair_id.to_string()))?;
    let mid: Vec<f64> = l1.iter().zip(l2).map(|(a, b)| 0.5 * (a + b)).collect();
    let n = mid.iter().map(|x| x * x).sum::<f64>().sqrt();
    // antipodal latents have no midpoint direction
    let h_cls = if n > 1e-12 {
        mid.into_iter().map(|x| x / n).collect()
    } else {
        vec![0.0; l1.len()]
    };
    EncodedPair::new(h_cls, l1.clone(), l2.clone())
}

/// Encoders behind one contract.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Toy(ToyEncoder),
    Frozen(FrozenStore),
    Synthetic(LatentGeometry),
}

impl Encoder {
    pub fn dim(&self) -> Option<usize> {
        match self {
            Encoder::Toy(t) => Some(t.dim()),
            Encoder::Frozen(s) => s.dim(),
            Encoder::Synthetic(g) => Some(g.dim),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Encoder::Toy(_) => "toy",
            Encoder::Frozen(_) => "frozen",
            Encoder::Synthetic(_) => "synthetic",
        }
    }

    /// Whether training may update encoder parameters.
    pub fn is_trainable(&self) -> bool {
        matches!(self, Encoder::Toy(t) if t.trainable)
    }

    pub fn encode(&self, pair: &SentencePair) -> Result<EncodedPair> {
        match self {
            Encoder::Toy(t) => t.encode(&pair.sent1, &pair.sent2),
            Encoder::Frozen(s) => s.get(&pair.id).cloned(),
            Encoder::Synthetic(g) => encode_synthetic(g, &pair.id),
        }
    }
}

/// Encode every pair of `pairs` into a store.
pub fn build_store(encoder: &Encoder, pairs: &[SentencePair]) -> Result<FrozenStore> {
    let mut store = FrozenStore::new();
    for p in pairs {
        store.insert(p.id.clone(), encoder.encode(p)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthConfig};
    use crate::diffkit::grad_check_tensors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(v: usize, d: usize) -> ToyEncoder {
        ToyEncoder::init(&mut ChaCha8Rng::seed_from_u64(3), v, d, true).unwrap()
    }

    #[test]
    fn zero_mixer_gives_zero_context() {
        let mut enc = toy(2, 2);
        enc.embedding = Tensor::identity(2);
        enc.w_ctx = Tensor::zeros(vec![2, 2]);
        enc.b_ctx = Tensor::zeros(vec![2]);
        let out = enc.encode(&[0], &[1]).unwrap();
        assert_eq!(out.h_x1, vec![0.0, 0.0]);
        assert_eq!(out.h_x2, vec![0.0, 0.0]);
    }

    #[test]
    fn identical_sentences_identical_context() {
        let enc = toy(10, 4);
        let out = enc.encode(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!(out.h_x1, out.h_x2);
    }

    #[test]
    fn token_order_does_not_matter() {
        let enc = toy(10, 4);
        let a = enc.encode(&[1, 2, 3], &[4, 5]).unwrap();
        let b = enc.encode(&[3, 1, 2], &[5, 4]).unwrap();
        for (x, y) in a
            .h_x1
            .iter()
            .zip(&b.h_x1)
            .chain(a.h_cls.iter().zip(&b.h_cls))
        {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_vocabulary_is_an_indexing_error() {
        let enc = toy(5, 3);
        assert!(matches!(
            enc.encode(&[5], &[0]),
            Err(Error::OutOfVocabulary {
                id: 5,
                vocab_size: 5
            })
        ));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let enc = toy(6, 3);
        let target = Tensor::vector(vec![0.3, -0.2, 0.1]);
        let err = grad_check_tensors(
            |tape, v| {
                let vars = ToyVars {
                    embedding: v[0],
                    w_ctx: v[1],
                    b_ctx: v[2],
                    w_cls: v[3],
                    b_cls: v[4],
                };
                let e = ToyEncoder::encode_on_tape(tape, &vars, &[0, 1, 1], &[2, 5])?;
                let t = tape.constant(&target);
                let s = tape.add(e.h_x1, e.h_cls)?;
                let s = tape.add(s, e.h_x2)?;
                let d = tape.mul(s, t)?;
                let d = tape.sum(d);
                Ok(tape.square(d))
            },
            &[
                enc.embedding.clone(),
                enc.w_ctx.clone(),
                enc.b_ctx.clone(),
                enc.w_cls.clone(),
                enc.b_cls.clone(),
            ],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn store_identity_and_round_trip() {
        let mut store = FrozenStore::new();
        let triple = EncodedPair::new(vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        store.insert("a", triple.clone()).unwrap();
        store
            .insert(
                "b",
                EncodedPair::new(
                    vec![0.1 + 0.2, 1e-300],
                    vec![-0.0, 7.0],
                    vec![1.0 / 3.0, 2.0],
                )
                .unwrap(),
            )
            .unwrap();
        assert_eq!(store.get("a").unwrap(), &triple);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        store.save(&path).unwrap();
        let back = FrozenStore::load(&path, Some(2)).unwrap();
        assert_eq!(back.origin.as_deref(), Some(path.as_path()));
        assert_eq!(back.len(), store.len());
        for id in ["a", "b"] {
            let (x, y) = (store.get(id).unwrap(), back.get(id).unwrap());
            for (p, q) in x
                .h_cls
                .iter()
                .chain(&x.h_x1)
                .zip(y.h_cls.iter().chain(&y.h_x1))
            {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        assert!(matches!(back.get("zzz"), Err(Error::MissingId(id)) if id == "zzz"));
        assert!(matches!(
            FrozenStore::load(&path, Some(3)),
            Err(Error::Dimension {
                expected: 3,
                found: 2,
                ..
            })
        ));
    }

    #[test]
    fn synthetic_double() {
        let (corpus, geo) = synth_corpus(&SynthConfig {
            n_pairs: 20,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut g = geo.clone();
        let l = g.pair_latents[&corpus.pairs[0].id].0.clone();
        let mut orth = vec![0.0; l.len()];
        orth[0] = l[1];
        orth[1] = -l[0];
        g.pair_latents.insert("same".into(), (l.clone(), l.clone()));
        g.pair_latents.insert("orth".into(), (l.clone(), orth));
        let same = encode_synthetic(&g, "same").unwrap();
        assert_eq!(same.h_x1, same.h_x2);
        for (a, b) in same.h_cls.iter().zip(&same.h_x1) {
            assert!((a - b).abs() < 1e-12);
        }
        let o = encode_synthetic(&g, "orth").unwrap();
        let dot: f64 = o.h_x1.iter().zip(&o.h_x2).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);

        let enc = Encoder::Synthetic(geo.clone());
        let again = Encoder::Synthetic(
            synth_corpus(&SynthConfig {
                n_pairs: 20,
                ..SynthConfig::default()
            })
            .unwrap()
            .1,
        );
        for p in &corpus.pairs {
            assert_eq!(enc.encode(p).unwrap(), again.encode(p).unwrap());
        }
        let store = build_store(&enc, &corpus.pairs).unwrap();
        assert_eq!(store.len(), 20);
    }
}
