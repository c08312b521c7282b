//! The classify-and-rank head.
//!
//! A router `G1` assigns each sentence representation to a score bin, the
//! selected bin's projector maps it into that bin's subspace scaled by the
//! router's confidence `β`, and a scorer `G2` reads both projected vectors.
//! Comparator heads (soft mixture, single shared projector) reuse the same
//! machinery through [`HeadConfig`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinScheme, SentencePair};
use crate::diffkit::{bce_value, softmax_values, Tape, Tensor, Var};
use crate::encoder::{uniform_tensor, EncodedPair, EncodedVars, Encoder, ToyEncoder, ToyVars};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Only the router's argmax projector, scaled by `β`.
    Argmax,
    /// Probability-weighted sum over all projectors.
    WeightedAverage,
    /// No router; one projector shared by every sentence.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInput {
    /// `h_cls + h_xj` per sentence.
    ClsPlusCtx,
    /// `h_xj` alone.
    CtxOnly,
    /// `h_x1 + h_x2`, the same input for both sentences.
    PairCtx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Binary cross-entropy between `y_sim` and the scorer's sigmoid output.
    Bce,
    /// Squared error between `cos(z_x1, z_x2)` and `y_sim`; no scorer.
    CosineMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub bin_scheme: BinScheme,
    pub selection: Selection,
    pub router_input: RouterInput,
    pub objective: Objective,
    pub alpha1: f64,
    pub alpha2: f64,
    pub use_clf_loss: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            bin_scheme: BinScheme::default(),
            selection: Selection::Argmax,
            router_input: RouterInput::ClsPlusCtx,
            objective: Objective::Bce,
            alpha1: 7e-4,
            alpha2: 1e-4,
            use_clf_loss: true,
        }
    }
}

/// Named head presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mixsp,
    /// Shared projector trained through the cosine of the two sentences.
    Ft,
    /// Soft mixture of projectors without classification supervision.
    Moe,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixsp" => Ok(Variant::Mixsp),
            "ft" => Ok(Variant::Ft),
            "moe" => Ok(Variant::Moe),
            other => Err(Error::Argument(format!(
                "unknown variant `{other}` (expected mixsp, ft or moe)"
            ))),
        }
    }
}

impl HeadConfig {
    pub fn variant(v: Variant) -> Self {
        let base = HeadConfig::default();
        match v {
            Variant::Mixsp => base,
            Variant::Ft => HeadConfig {
                selection: Selection::Shared,
                objective: Objective::CosineMse,
                use_clf_loss: false,
                ..base
            },
            Variant::Moe => HeadConfig {
                selection: Selection::WeightedAverage,
                use_clf_loss: false,
                ..base
            },
        }
    }

    pub fn k_bins(&self) -> usize {
        self.bin_scheme.len()
    }

    pub fn has_router(&self) -> bool {
        self.selection != Selection::Shared
    }

    pub fn n_projectors(&self) -> usize {
        if self.has_router() {
            self.k_bins()
        } else {
            1
        }
    }

    pub fn has_scorer(&self) -> bool {
        self.objective == Objective::Bce
    }

    /// Whether the classification term contributes to the objective.
    pub fn clf_active(&self) -> bool {
        self.has_router() && self.use_clf_loss
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative weight, got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Affine layer `W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, out: usize, fan_in: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: uniform_tensor(rng, vec![out, fan_in], bound),
            b: uniform_tensor(rng, vec![out], bound),
        }
    }

    pub fn zeros(out: usize, fan_in: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![out, fan_in]),
            b: Tensor::zeros(vec![out]),
        }
    }

    pub fn identity(d: usize) -> Self {
        Linear {
            w: Tensor::identity(d),
            b: Tensor::zeros(vec![d]),
        }
    }

    pub fn size(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn register(&self, tape: &mut Tape, differentiable: bool) -> LinearVars {
        if differentiable {
            LinearVars {
                w: tape.param(&self.w),
                b: tape.param(&self.b),
            }
        } else {
            LinearVars {
                w: tape.constant(&self.w),
                b: tape.constant(&self.b),
            }
        }
    }

    fn expect_shape(&self, name: &str, out: usize, fan_in: usize) -> Result<()> {
        if self.w.shape() != [out, fan_in] || self.b.shape() != [out] {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shapes {:?}/{:?}, expected [{out}, {fan_in}]/[{out}]",
                self.w.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

/// Router, projectors and scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `G1: d -> k`, absent for [`Selection::Shared`].
    pub router: Option<Linear>,
    /// `d -> d` each; index 0 is the top bin.
    pub projectors: Vec<Linear>,
    /// `G2: 2d -> 1`, absent for [`Objective::CosineMse`].
    pub scorer: Option<Linear>,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, config: &HeadConfig, dim: usize) -> Self {
        let router = config
            .has_router()
            .then(|| Linear::init(rng, config.k_bins(), dim));
        let projectors = (0..config.n_projectors())
            .map(|_| Linear::init(rng, dim, dim))
            .collect();
        let scorer = config.has_scorer().then(|| Linear::init(rng, 1, 2 * dim));
        HeadParams {
            router,
            projectors,
            scorer,
        }
    }

    pub fn dim(&self) -> usize {
        self.projectors[0].w.shape()[1]
    }

    pub fn validate(&self, config: &HeadConfig, dim: usize) -> Result<()> {
        match (&self.router, config.has_router()) {
            (Some(r), true) => r.expect_shape("router", config.k_bins(), dim)?,
            (None, false) => {}
            (present, _) => {
                return Err(Error::Checkpoint(format!(
                    "router {} but the head configuration {} one",
                    if present.is_some() {
                        "present"
                    } else {
                        "missing"
                    },
                    if config.has_router() {
                        "needs"
                    } else {
                        "has no"
                    }
                )))
            }
        }
        if self.projectors.len() != config.n_projectors() {
            return Err(Error::Checkpoint(format!(
                "{} projectors stored, configuration needs {}",
                self.projectors.len(),
                config.n_projectors()
            )));
        }
        for (c, p) in self.projectors.iter().enumerate() {
            p.expect_shape(&format!("projector{c}"), dim, dim)?;
        }
        match (&self.scorer, config.has_scorer()) {
            (Some(s), true) => s.expect_shape("scorer", 1, 2 * dim)?,
            (None, false) => {}
            _ => {
                return Err(Error::Checkpoint(
                    "scorer presence disagrees with the objective".into(),
                ))
            }
        }
        Ok(())
    }

    /// `(name, tensor)` for every head parameter, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(r) = &self.router {
            out.push(("router.w".to_string(), &r.w));
            out.push(("router.b".to_string(), &r.b));
        }
        for (c, p) in self.projectors.iter().enumerate() {
            out.push((format!("projector{c}.w"), &p.w));
            out.push((format!("projector{c}.b"), &p.b));
        }
        if let Some(s) = &self.scorer {
            out.push(("scorer.w".to_string(), &s.w));
            out.push(("scorer.b".to_string(), &s.b));
        }
        out
    }
}

/// Per-sentence routing outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub p_hat: [Vec<f64>; 2],
    pub chosen: [usize; 2],
    pub beta: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPair {
    pub z_x1: Vec<f64>,
    pub z_x2: Vec<f64>,
    pub decisions: RouteDecision,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Which parameter groups are differentiated on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub router: bool,
    pub projectors: bool,
    pub scorer: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        router: true,
        projectors: true,
        scorer: true,
    };
    pub const NONE: Trainable = Trainable {
        encoder: false,
        router: false,
        projectors: false,
        scorer: false,
    };
}

/// Tape leaves of a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: Option<ToyVars>,
    pub router: Option<LinearVars>,
    pub projectors: Vec<LinearVars>,
    pub scorer: Option<LinearVars>,
}

/// Tape nodes of one forward pass over a pair.
#[derive(Clone, Debug)]
pub struct SampleGraph {
    pub encoded: EncodedVars,
    /// Routing distributions; `None` without a router.
    pub p_hat: [Option<Var>; 2],
    pub chosen: [usize; 2],
    pub z: [Var; 2],
    /// Sigmoid score, or the cosine under [`Objective::CosineMse`].
    pub prediction: Var,
    pub rl: Var,
    pub clf: Option<Var>,
    /// `α1·L_RL + α2·L_Clf` for this sample.
    pub total: Var,
}

/// Encoder plus head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: HeadConfig,
    pub encoder: Encoder,
    pub head: HeadParams,
}

/// Trainable scalar counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub router: usize,
    pub projectors: usize,
    pub scorer: usize,
    pub total: usize,
}

/// What the model says about one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub projected: ProjectedPair,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: HeadConfig, encoder: Encoder) -> Result<Self> {
        config.validate()?;
        let dim = encoder
            .dim()
            .ok_or_else(|| Error::Config("encoder dimension is unknown (empty store)".into()))?;
        let head = HeadParams::init(rng, &config, dim);
        Ok(Model {
            config,
            encoder,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.head.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let dim = self.dim();
        if let Some(d) = self.encoder.dim() {
            if d != dim {
                return Err(Error::Dimension {
                    what: "encoder output".into(),
                    expected: dim,
                    found: d,
                });
            }
        }
        if let Encoder::Toy(t) = &self.encoder {
            t.validate()?;
        }
        self.head.validate(&self.config, dim)
    }

    pub fn param_count(&self) -> ParamCount {
        let encoder = match &self.encoder {
            Encoder::Toy(t) if t.trainable => t.size(),
            _ => 0,
        };
        let router = self.head.router.as_ref().map_or(0, Linear::size);
        let projectors = self.head.projectors.iter().map(Linear::size).sum();
        let scorer = self.head.scorer.as_ref().map_or(0, Linear::size);
        ParamCount {
            encoder,
            router,
            projectors,
            scorer,
            total: encoder + router + projectors + scorer,
        }
    }

    /// Every parameter tensor by name, including a frozen encoder's.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Encoder::Toy(t) = &self.encoder {
            out.extend(t.tensors().into_iter().map(|(n, t)| (n.to_string(), t)));
        }
        out.extend(self.head.tensors());
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if let Encoder::Toy(t) = &mut self.encoder {
            out.extend(t.tensors_mut().into_iter().map(|(n, t)| (n.to_string(), t)));
        }
        if let Some(r) = &mut self.head.router {
            out.push(("router.w".into(), &mut r.w));
            out.push(("router.b".into(), &mut r.b));
        }
        for (c, p) in self.head.projectors.iter_mut().enumerate() {
            out.push((format!("projector{c}.w"), &mut p.w));
            out.push((format!("projector{c}.b"), &mut p.b));
        }
        if let Some(s) = &mut self.head.scorer {
            out.push(("scorer.w".into(), &mut s.w));
            out.push(("scorer.b".into(), &mut s.b));
        }
        out
    }

    /// Record all parameters, differentiating the groups in `train`. A frozen
    /// or file-backed encoder is never differentiated.
    pub fn register(&self, tape: &mut Tape, train: Trainable) -> ModelVars {
        let encoder = match &self.encoder {
            Encoder::Toy(t) => Some(t.register(tape, train.encoder && t.trainable)),
            _ => None,
        };
        ModelVars {
            encoder,
            router: self
                .head
                .router
                .as_ref()
                .map(|r| r.register(tape, train.router)),
            projectors: self
                .head
                .projectors
                .iter()
                .map(|p| p.register(tape, train.projectors))
                .collect(),
            scorer: self
                .head
                .scorer
                .as_ref()
                .map(|s| s.register(tape, train.scorer)),
        }
    }

    /// `(name, var)` pairs matching [`Model::named_tensors`].
    pub fn var_names(vars: &ModelVars) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        if let Some(e) = &vars.encoder {
            let vs = [e.embedding, e.w_ctx, e.b_ctx, e.w_cls, e.b_cls];
            out.extend(
                ToyEncoder::PARAM_NAMES
                    .iter()
                    .map(|n| n.to_string())
                    .zip(vs),
            );
        }
        if let Some(r) = &vars.router {
            out.push(("router.w".into(), r.w));
            out.push(("router.b".into(), r.b));
        }
        for (c, p) in vars.projectors.iter().enumerate() {
            out.push((format!("projector{c}.w"), p.w));
            out.push((format!("projector{c}.b"), p.b));
        }
        if let Some(s) = &vars.scorer {
            out.push(("scorer.w".into(), s.w));
            out.push(("scorer.b".into(), s.b));
        }
        out
    }

    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        pair: &SentencePair,
    ) -> Result<EncodedVars> {
        match (&self.encoder, &vars.encoder) {
            (Encoder::Toy(_), Some(ev)) => {
                ToyEncoder::encode_on_tape(tape, ev, &pair.sent1, &pair.sent2)
            }
            _ => {
                let e = self.encoder.encode(pair)?;
                constant_encoding(tape, &e, self.dim())
            }
        }
    }

    /// Full forward pass for one labelled pair.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        pair: &SentencePair,
    ) -> Result<SampleGraph> {
        let enc = self.encode_on_tape(tape, vars, pair)?;
        head_on_tape(tape, &self.config, vars, enc, pair.bin, pair.y_sim)
    }

    pub fn encode(&self, pair: &SentencePair) -> Result<EncodedPair> {
        let e = self.encoder.encode(pair)?;
        if e.dim() != self.dim() {
            return Err(Error::Dimension {
                what: format!("encoding of pair `{}`", pair.id),
                expected: self.dim(),
                found: e.dim(),
            });
        }
        Ok(e)
    }

    pub fn predict(&self, pair: &SentencePair) -> Result<Prediction> {
        let encoded = self.encode(pair)?;
        self.predict_encoded(&encoded)
    }

    pub fn predict_encoded(&self, encoded: &EncodedPair) -> Result<Prediction> {
        let decisions = route(&self.head, &self.config, encoded)?;
        let projected = project(&self.head, &self.config, encoded, &decisions)?;
        let score = match self.config.objective {
            Objective::Bce => score(&self.head, &projected)?,
            Objective::CosineMse => crate::analysis::cosine(&projected.z_x1, &projected.z_x2)?,
        };
        Ok(Prediction { score, projected })
    }

    /// Mean `α1·L_RL + α2·L_Clf` over `pairs`, without gradients.
    pub fn mean_loss(&self, pairs: &[SentencePair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptySequence("loss batch"));
        }
        let mut total = 0.0;
        for p in pairs {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape, Trainable::NONE);
            let g = self.sample_on_tape(&mut tape, &vars, p)?;
            total += tape.scalar(g.total);
        }
        Ok(total / pairs.len() as f64)
    }
}

fn constant_encoding(tape: &mut Tape, e: &EncodedPair, dim: usize) -> Result<EncodedVars> {
    if e.dim() != dim {
        return Err(Error::Dimension {
            what: "encoded pair".into(),
            expected: dim,
            found: e.dim(),
        });
    }
    Ok(EncodedVars {
        h_cls: tape.constant_vec(e.h_cls.clone()),
        h_x1: tape.constant_vec(e.h_x1.clone()),
        h_x2: tape.constant_vec(e.h_x2.clone()),
    })
}

fn router_inputs(tape: &mut Tape, input: RouterInput, enc: EncodedVars) -> Result<[Var; 2]> {
    Ok(match input {
        RouterInput::ClsPlusCtx => [
            tape.add(enc.h_cls, enc.h_x1)?,
            tape.add(enc.h_cls, enc.h_x2)?,
        ],
        RouterInput::CtxOnly => [enc.h_x1, enc.h_x2],
        RouterInput::PairCtx => {
            let both = tape.add(enc.h_x1, enc.h_x2)?;
            [both, both]
        }
    })
}

/// Classification loss of one sentence's routing distribution against the
/// pair's bin.
fn sentence_clf(tape: &mut Tape, p_hat: Var, k: usize, bin: usize) -> Result<Var> {
    if k == 2 {
        let t = if bin == 0 { 1.0 } else { 0.0 };
        let p0 = tape.pick(p_hat, 0)?;
        tape.bce(t, p0)
    } else {
        // cross-entropy with a one-hot target is BCE(1, p[bin])
        let pc = tape.pick(p_hat, bin)?;
        tape.bce(1.0, pc)
    }
}

/// Head forward pass on already-encoded vectors.
pub fn head_on_tape(
    tape: &mut Tape,
    config: &HeadConfig,
    vars: &ModelVars,
    enc: EncodedVars,
    bin: usize,
    y_sim: f64,
) -> Result<SampleGraph> {
    let k = config.k_bins();
    if bin >= k {
        return Err(Error::Argument(format!(
            "label bin {bin} is outside a {k}-bin scheme"
        )));
    }
    let h = [enc.h_x1, enc.h_x2];
    let mut p_hat = [None, None];
    let mut chosen = [0, 0];
    let mut z = [enc.h_x1, enc.h_x2];

    match (&vars.router, config.selection) {
        (None, _) | (_, Selection::Shared) => {
            let proj = vars
                .projectors
                .first()
                .ok_or_else(|| Error::Config("head has no projector".into()))?;
            for j in 0..2 {
                z[j] = tape.linear(proj.w, proj.b, h[j])?;
            }
        }
        (Some(router), selection) => {
            let inputs = router_inputs(tape, config.router_input, enc)?;
            for j in 0..2 {
                let logits = tape.linear(router.w, router.b, inputs[j])?;
                let p = tape.softmax(logits)?;
                p_hat[j] = Some(p);
                match selection {
                    Selection::Argmax => {
                        let c = argmax(tape.value(p));
                        chosen[j] = c;
                        let beta = tape.pick(p, c)?;
                        let proj = vars.projectors[c];
                        let out = tape.linear(proj.w, proj.b, h[j])?;
                        z[j] = tape.scale(out, beta)?;
                    }
                    Selection::WeightedAverage => {
                        chosen[j] = argmax(tape.value(p));
                        let mut acc = None;
                        for (c, proj) in vars.projectors.iter().enumerate() {
                            let w = tape.pick(p, c)?;
                            let out = tape.linear(proj.w, proj.b, h[j])?;
                            let term = tape.scale(out, w)?;
                            acc = Some(match acc {
                                None => term,
                                Some(a) => tape.add(a, term)?,
                            });
                        }
                        z[j] = acc.expect("at least one projector");
                    }
                    Selection::Shared => unreachable!("handled above"),
                }
            }
        }
    }

    let (prediction, rl) = match (config.objective, &vars.scorer) {
        (Objective::Bce, Some(scorer)) => {
            let both = tape.concat(z[0], z[1])?;
            let logit = tape.linear(scorer.w, scorer.b, both)?;
            let pred = tape.sigmoid(logit);
            let rl = tape.bce(y_sim, pred)?;
            (pred, rl)
        }
        (Objective::Bce, None) => {
            return Err(Error::Config("binary objective needs a scorer".into()))
        }
        (Objective::CosineMse, _) => {
            let cos = tape.cosine(z[0], z[1])?;
            let diff = tape.add_const(cos, -y_sim);
            (cos, tape.square(diff))
        }
    };

    let clf = match (config.clf_active(), p_hat) {
        (true, [Some(p1), Some(p2)]) => {
            let l1 = sentence_clf(tape, p1, k, bin)?;
            let l2 = sentence_clf(tape, p2, k, bin)?;
            let s = tape.add(l1, l2)?;
            Some(tape.mul_const(s, 0.5))
        }
        _ => None,
    };

    let weighted_rl = tape.mul_const(rl, config.alpha1);
    let total = match clf {
        Some(c) => {
            let wc = tape.mul_const(c, config.alpha2);
            tape.add(weighted_rl, wc)?
        }
        None => weighted_rl,
    };

    Ok(SampleGraph {
        encoded: enc,
        p_hat,
        chosen,
        z,
        prediction,
        rl,
        clf,
        total,
    })
}

fn check_dim(what: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::Dimension {
            what: what.into(),
            expected: d,
            found: v.len(),
        });
    }
    Ok(())
}

fn apply(layer: &Linear, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    layer
        .w
        .values()
        .chunks(n)
        .zip(layer.b.values())
        .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
        .collect()
}

/// Routing distributions, argmax bins and `β` for both sentences. Without a
/// router every sentence gets `p̂ = [1]`.
pub fn route(
    params: &HeadParams,
    config: &HeadConfig,
    encoded: &EncodedPair,
) -> Result<RouteDecision> {
    let Some(router) = &params.router else {
        return Ok(RouteDecision {
            p_hat: [vec![1.0], vec![1.0]],
            chosen: [0, 0],
            beta: [1.0, 1.0],
        });
    };
    let d = router.w.shape()[1];
    check_dim("h_cls", &encoded.h_cls, d)?;
    check_dim("h_x1", &encoded.h_x1, d)?;
    check_dim("h_x2", &encoded.h_x2, d)?;
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let inputs = match config.router_input {
        RouterInput::ClsPlusCtx => [
            add(&encoded.h_cls, &encoded.h_x1),
            add(&encoded.h_cls, &encoded.h_x2),
        ],
        RouterInput::CtxOnly => [encoded.h_x1.clone(), encoded.h_x2.clone()],
        RouterInput::PairCtx => {
            let both = add(&encoded.h_x1, &encoded.h_x2);
            [both.clone(), both]
        }
    };
    let p: [Vec<f64>; 2] = inputs.map(|x| softmax_values(&apply(router, &x)));
    let chosen = [argmax(&p[0]), argmax(&p[1])];
    let beta = [p[0][chosen[0]], p[1][chosen[1]]];
    Ok(RouteDecision {
        p_hat: p,
        chosen,
        beta,
    })
}

/// Classification loss of a pair's routing against its gold bin.
pub fn clf_loss(decisions: &RouteDecision, bin: usize) -> Result<f64> {
    let k = decisions.p_hat[0].len();
    if bin >= k {
        return Err(Error::Argument(format!(
            "label bin {bin} is outside a {k}-bin scheme"
        )));
    }
    let one = |p: &[f64]| -> Result<f64> {
        if k == 2 {
            bce_value(if bin == 0 { 1.0 } else { 0.0 }, p[0])
        } else {
            bce_value(1.0, p[bin])
        }
    };
    Ok(0.5 * one(&decisions.p_hat[0])? + 0.5 * one(&decisions.p_hat[1])?)
}

/// Project both sentences according to `decisions`.
pub fn project(
    params: &HeadParams,
    config: &HeadConfig,
    encoded: &EncodedPair,
    decisions: &RouteDecision,
) -> Result<ProjectedPair> {
    let d = params.dim();
    check_dim("h_x1", &encoded.h_x1, d)?;
    check_dim("h_x2", &encoded.h_x2, d)?;
    let h = [&encoded.h_x1, &encoded.h_x2];
    let z: Vec<Vec<f64>> = (0..2)
        .map(|j| match config.selection {
            Selection::Shared => apply(&params.projectors[0], h[j]),
            Selection::Argmax => {
                let c = decisions.chosen[j];
                apply(&params.projectors[c], h[j])
                    .into_iter()
                    .map(|x| x * decisions.beta[j])
                    .collect()
            }
            Selection::WeightedAverage => {
                let mut acc = vec![0.0; d];
                for (c, proj) in params.projectors.iter().enumerate() {
                    let w = decisions.p_hat[j][c];
                    acc.iter_mut()
                        .zip(apply(proj, h[j]))
                        .for_each(|(a, v)| *a += w * v);
                }
                acc
            }
        })
        .collect();
    let mut z = z.into_iter();
    Ok(ProjectedPair {
        z_x1: z.next().expect("two sentences"),
        z_x2: z.next().expect("two sentences"),
        decisions: decisions.clone(),
    })
}

/// `sigmoid(G2(concat(z_x1, z_x2)))`.
pub fn score(params: &HeadParams, projected: &ProjectedPair) -> Result<f64> {
    let scorer = params
        .scorer
        .as_ref()
        .ok_or_else(|| Error::Config("head has no scorer".into()))?;
    let mut both = projected.z_x1.clone();
    both.extend_from_slice(&projected.z_x2);
    check_dim("concat(z_x1, z_x2)", &both, scorer.w.shape()[1])?;
    Ok(crate::diffkit::sigmoid_value(apply(scorer, &both)[0]))
}

/// Representation-learning loss of one pair.
pub fn rl_loss(
    objective: Objective,
    prediction: f64,
    projected: &ProjectedPair,
    y_sim: f64,
) -> Result<f64> {
    match objective {
        Objective::Bce => bce_value(y_sim, prediction),
        Objective::CosineMse => {
            let c = crate::analysis::cosine(&projected.z_x1, &projected.z_x2)?;
            Ok((c - y_sim).powi(2))
        }
    }
}

/// Batch mean of `α1·L_RL + α2·L_Clf`; the second term is dropped when the
/// classification loss is disabled.
pub fn total_loss(config: &HeadConfig, rl: &[f64], clf: &[f64]) -> Result<f64> {
    if rl.is_empty() {
        return Err(Error::EmptySequence("loss batch"));
    }
    if config.use_clf_loss && clf.len() != rl.len() {
        return Err(Error::Argument(format!(
            "{} ranking losses but {} classification losses",
            rl.len(),
            clf.len()
        )));
    }
    let sum: f64 = rl
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let c = if config.use_clf_loss {
                config.alpha2 * clf[i]
            } else {
                0.0
            };
            config.alpha1 * r + c
        })
        .sum();
    Ok(sum / rl.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{grad_check_tensors, LOG_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(d: usize, config: &HeadConfig) -> HeadParams {
        HeadParams::init(&mut ChaCha8Rng::seed_from_u64(1), config, d)
    }

    fn pair(cls: &[f64], x1: &[f64], x2: &[f64]) -> EncodedPair {
        EncodedPair::new(cls.to_vec(), x1.to_vec(), x2.to_vec()).unwrap()
    }

    fn decision(p1: Vec<f64>, p2: Vec<f64>) -> RouteDecision {
        let chosen = [argmax(&p1), argmax(&p2)];
        let beta = [p1[chosen[0]], p2[chosen[1]]];
        RouteDecision {
            p_hat: [p1, p2],
            chosen,
            beta,
        }
    }

    #[test]
    fn zero_router_ties_to_upper() {
        let cfg = HeadConfig::default();
        let mut h = head(2, &cfg);
        h.router = Some(Linear::zeros(2, 2));
        let d = route(&h, &cfg, &pair(&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5])).unwrap();
        assert_eq!(d.p_hat[0], vec![0.5, 0.5]);
        assert_eq!(d.chosen, [0, 0]);
        assert_eq!(d.beta, [0.5, 0.5]);
    }

    #[test]
    fn logits_one_zero() {
        let cfg = HeadConfig::default();
        let mut h = head(2, &cfg);
        h.router = Some(Linear {
            w: Tensor::zeros(vec![2, 2]),
            b: Tensor::vector(vec![1.0, 0.0]),
        });
        let d = route(&h, &cfg, &pair(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0])).unwrap();
        let e = std::f64::consts::E;
        assert!((d.p_hat[0][0] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(d.chosen[0], 0);
        assert!((d.beta[0] - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn zero_cls_makes_router_inputs_agree() {
        let base = HeadConfig::default();
        let h = head(3, &base);
        let e = pair(&[0.0; 3], &[0.3, -0.1, 0.8], &[-0.5, 0.2, 0.1]);
        let a = route(&h, &base, &e).unwrap();
        let b = route(
            &h,
            &HeadConfig {
                router_input: RouterInput::CtxOnly,
                ..base.clone()
            },
            &e,
        )
        .unwrap();
        assert_eq!(a, b);
        let pc = route(
            &h,
            &HeadConfig {
                router_input: RouterInput::PairCtx,
                ..base
            },
            &e,
        )
        .unwrap();
        assert_eq!(pc.p_hat[0], pc.p_hat[1]);
    }

    #[test]
    fn classification_loss_fixtures() {
        let upper_perfect = decision(vec![1.0 - LOG_EPS, LOG_EPS], vec![1.0 - LOG_EPS, LOG_EPS]);
        assert!(clf_loss(&upper_perfect, 0).unwrap() < 1e-11);
        let uniform = decision(vec![0.5, 0.5], vec![0.5, 0.5]);
        assert!((clf_loss(&uniform, 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let mixed = decision(vec![0.5, 0.5], vec![0.0, 1.0]);
        assert!((clf_loss(&mixed, 1).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-11);
        assert!(clf_loss(&uniform, 2).is_err());
        let five = decision(vec![0.2; 5], vec![0.2; 5]);
        assert!((clf_loss(&five, 3).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn projection_fixtures() {
        let cfg = HeadConfig::default();
        let mut h = head(2, &cfg);
        h.projectors = vec![Linear::identity(2), Linear::identity(2)];
        let e = pair(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]);
        let d = decision(vec![0.9, 0.1], vec![0.4, 0.6]);
        let z = project(&h, &cfg, &e, &d).unwrap();
        assert_eq!(z.z_x1, vec![0.9, 0.0]);
        assert_eq!(d.chosen[1], 1);
        assert_eq!(d.beta[1], 0.6);

        let soft = HeadConfig::variant(Variant::Moe);
        let dd = decision(vec![0.9, 0.1], vec![0.9, 0.1]);
        let z = project(&h, &soft, &e, &dd).unwrap();
        assert!((z.z_x1[0] - 1.0).abs() < 1e-15 && z.z_x1[1] == 0.0);
    }

    #[test]
    fn single_projector_soft_selection_is_plain() {
        let cfg = HeadConfig {
            selection: Selection::WeightedAverage,
            ..HeadConfig::default()
        };
        let h = HeadParams {
            router: None,
            projectors: vec![Linear::init(&mut ChaCha8Rng::seed_from_u64(4), 3, 3)],
            scorer: None,
        };
        let e = pair(&[0.0; 3], &[0.2, 0.4, -0.6], &[1.0, 0.0, 0.5]);
        let d = decision(vec![1.0], vec![1.0]);
        let soft = project(&h, &cfg, &e, &d).unwrap();
        let argmax_cfg = HeadConfig::default();
        let hard = project(&h, &argmax_cfg, &e, &d).unwrap();
        let plain = apply(&h.projectors[0], &e.h_x1);
        assert_eq!(soft.z_x1, plain);
        assert_eq!(hard.z_x1, plain);
    }

    #[test]
    fn scorer_fixtures() {
        let cfg = HeadConfig::default();
        let mut h = head(2, &cfg);
        let d = decision(vec![0.7, 0.3], vec![0.2, 0.8]);
        let z = ProjectedPair {
            z_x1: vec![1.0, -2.0],
            z_x2: vec![0.5, 3.0],
            decisions: d,
        };
        h.scorer = Some(Linear::zeros(1, 4));
        assert_eq!(score(&h, &z).unwrap(), 0.5);
        let mut w = vec![0.0; 4];
        w[0] = 3f64.ln();
        h.scorer = Some(Linear {
            w: Tensor::matrix(1, 4, w).unwrap(),
            b: Tensor::vector(vec![0.0]),
        });
        assert!((score(&h, &z).unwrap() - 0.75).abs() < 1e-15);
        h.scorer = Some(Linear {
            w: Tensor::matrix(1, 4, vec![0.3, -0.2, 0.3, -0.2]).unwrap(),
            b: Tensor::vector(vec![0.1]),
        });
        let swapped = ProjectedPair {
            z_x1: z.z_x2.clone(),
            z_x2: z.z_x1.clone(),
            decisions: z.decisions.clone(),
        };
        assert!((score(&h, &z).unwrap() - score(&h, &swapped).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ranking_loss_fixtures() {
        let d = decision(vec![0.5, 0.5], vec![0.5, 0.5]);
        let z = ProjectedPair {
            z_x1: vec![1.0, 0.0],
            z_x2: vec![1.0, 0.0],
            decisions: d.clone(),
        };
        assert!((rl_loss(Objective::Bce, 0.5, &z, 0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(rl_loss(Objective::CosineMse, 0.0, &z, 1.0).unwrap(), 0.0);
        let orth = ProjectedPair {
            z_x1: vec![1.0, 0.0],
            z_x2: vec![0.0, 2.0],
            decisions: d.clone(),
        };
        assert_eq!(rl_loss(Objective::CosineMse, 0.0, &orth, 0.0).unwrap(), 0.0);
        let zero = ProjectedPair {
            z_x1: vec![0.0, 0.0],
            z_x2: vec![1.0, 0.0],
            decisions: d,
        };
        assert!(matches!(
            rl_loss(Objective::CosineMse, 0.0, &zero, 0.0),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn total_loss_fixtures() {
        let cfg = HeadConfig::default();
        assert!((total_loss(&cfg, &[1.0], &[1.0]).unwrap() - 8e-4).abs() < 1e-18);
        let off = HeadConfig {
            use_clf_loss: false,
            ..cfg.clone()
        };
        let zero_a2 = HeadConfig {
            alpha2: 0.0,
            ..cfg.clone()
        };
        let (rl, clf) = ([0.3, 0.9, 0.1], [0.7, 0.2, 0.4]);
        assert_eq!(
            total_loss(&off, &rl, &clf).unwrap(),
            total_loss(&zero_a2, &rl, &clf).unwrap()
        );
        assert_eq!(
            total_loss(&cfg, &[0.4; 3], &[0.6; 3]).unwrap(),
            total_loss(&cfg, &[0.4], &[0.6]).unwrap()
        );
        assert!(total_loss(&cfg, &[], &[]).is_err());
    }

    #[test]
    fn variants() {
        let ft = HeadConfig::variant(Variant::Ft);
        assert_eq!(ft.selection, Selection::Shared);
        assert_eq!(ft.objective, Objective::CosineMse);
        assert!(!ft.has_router());
        let moe = HeadConfig::variant(Variant::Moe);
        assert_eq!(moe.selection, Selection::WeightedAverage);
        assert!(!moe.use_clf_loss);
        assert_eq!("moe".parse::<Variant>().unwrap(), Variant::Moe);
        assert!("bert".parse::<Variant>().is_err());
    }

    #[test]
    fn tape_forward_matches_pure_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for variant in [Variant::Mixsp, Variant::Ft, Variant::Moe] {
            let cfg = HeadConfig::variant(variant);
            let toy = ToyEncoder::init(&mut rng, 20, 4, true).unwrap();
            let model = Model::new(&mut rng, cfg.clone(), Encoder::Toy(toy)).unwrap();
            let p =
                SentencePair::new("x", vec![1, 2, 3], vec![4, 5], 4.5, &cfg.bin_scheme).unwrap();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, Trainable::ALL);
            let g = model.sample_on_tape(&mut tape, &vars, &p).unwrap();
            let pred = model.predict(&p).unwrap();
            assert!(
                (tape.scalar(g.prediction) - pred.score).abs() < 1e-14,
                "{variant:?}"
            );
            let rl = rl_loss(cfg.objective, pred.score, &pred.projected, p.y_sim).unwrap();
            let clf = if cfg.clf_active() {
                vec![clf_loss(&pred.projected.decisions, p.bin).unwrap()]
            } else {
                vec![]
            };
            let cfg_eff = HeadConfig {
                use_clf_loss: cfg.clf_active(),
                ..cfg.clone()
            };
            let total = total_loss(&cfg_eff, &[rl], &clf).unwrap();
            assert!((tape.scalar(g.total) - total).abs() < 1e-15, "{variant:?}");
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let cfg = HeadConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = HeadParams::init(&mut rng, &cfg, 3);
        let enc = [
            Tensor::vector(vec![0.1, -0.3, 0.5]),
            Tensor::vector(vec![0.7, 0.2, -0.4]),
            Tensor::vector(vec![-0.2, 0.6, 0.3]),
        ];
        let mut inputs: Vec<Tensor> = params
            .tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        inputs.extend(enc.iter().cloned());
        let err = grad_check_tensors(
            |tape, v| {
                let vars = ModelVars {
                    encoder: None,
                    router: Some(LinearVars { w: v[0], b: v[1] }),
                    projectors: vec![
                        LinearVars { w: v[2], b: v[3] },
                        LinearVars { w: v[4], b: v[5] },
                    ],
                    scorer: Some(LinearVars { w: v[6], b: v[7] }),
                };
                let e = EncodedVars {
                    h_cls: v[8],
                    h_x1: v[9],
                    h_x2: v[10],
                };
                Ok(head_on_tape(tape, &cfg, &vars, e, 0, 0.84)?.total)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
