use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { w: Var, b: Var, x: Var },
    Softmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Bce { p: Var, target: f64 },
    MeanPool(Var),
    Gather { table: Var, ids: Vec<usize> },
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    Scale { v: Var, s: Var },
    MulConst(Var, f64),
    AddConst(Var),
    Pick(Var, usize),
    Cosine(Var, Var),
    Square(Var),
    Sum(Var),
    SumScalars(Vec<Var>),
    Slice { v: Var, start: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Linear record of primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumer and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` is not on a
    /// path to the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Store the gradient of `v` into `tensor.grad`.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor) {
        tensor.grad = Some(self.wrt(v));
    }
}

pub fn softmax_values(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid_value(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

pub fn bce_value(target: f64, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Domain(format!(
            "binary cross-entropy target {target} is outside [0, 1]"
        )));
    }
    let p = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
    Ok(-target * p.ln() - (1.0 - target) * (1.0 - p).ln())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of `v`; intended for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Record a tensor; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Record a differentiable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    /// Record a constant (never differentiated) leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, values: Vec<f64>) -> Var {
        self.push(vec![values.len()], values, Op::Leaf, false)
    }

    fn vector_len(&self, op: &'static str, v: Var) -> Result<usize> {
        match self.shape(v) {
            [n] => Ok(*n),
            other => Err(Error::shape(
                op,
                format!("expected a vector, got shape {other:?}"),
            )),
        }
    }

    fn scalar_check(&self, op: &'static str, v: Var) -> Result<()> {
        match self.vector_len(op, v)? {
            1 => Ok(()),
            n => Err(Error::shape(
                op,
                format!("expected a scalar, got {n} values"),
            )),
        }
    }

    /// `W·x + b` for `W: m×n`, `b: m`, `x: n`.
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let (m, n) = match self.shape(w) {
            [m, n] => (*m, *n),
            other => {
                return Err(Error::shape(
                    "linear",
                    format!("weight W must be a matrix, got shape {other:?}"),
                ))
            }
        };
        let bl = self.vector_len("linear", b)?;
        let xl = self.vector_len("linear", x)?;
        if bl != m {
            return Err(Error::shape(
                "linear",
                format!("weight W is {m}x{n} but bias b has length {bl}"),
            ));
        }
        if xl != n {
            return Err(Error::shape(
                "linear",
                format!("weight W is {m}x{n} but input x has length {xl}"),
            ));
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let bv = self.value(b);
        let out: Vec<f64> = (0..m)
            .map(|i| dot(&wv[i * n..(i + 1) * n], xv) + bv[i])
            .collect();
        let needs = self.needs(w) || self.needs(b) || self.needs(x);
        Ok(self.push(vec![m], out, Op::Linear { w, b, x }, needs))
    }

    /// Max-shifted softmax.
    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let k = self.vector_len("softmax", v)?;
        if k == 0 {
            return Err(Error::EmptySequence("softmax"));
        }
        let out = softmax_values(self.value(v));
        let needs = self.needs(v);
        Ok(self.push(vec![k], out, Op::Softmax(v), needs))
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        let out = self.value(v).iter().map(|&s| sigmoid_value(s)).collect();
        let shape = self.shape(v).to_vec();
        let needs = self.needs(v);
        self.push(shape, out, Op::Sigmoid(v), needs)
    }

    pub fn tanh(&mut self, v: Var) -> Var {
        let out = self.value(v).iter().map(|s| s.tanh()).collect();
        let shape = self.shape(v).to_vec();
        let needs = self.needs(v);
        self.push(shape, out, Op::Tanh(v), needs)
    }

    /// Binary cross-entropy of a scalar probability against `target`.
    pub fn bce(&mut self, target: f64, p: Var) -> Result<Var> {
        self.scalar_check("bce", p)?;
        let loss = bce_value(target, self.scalar(p))?;
        let needs = self.needs(p);
        Ok(self.push(vec![1], vec![loss], Op::Bce { p, target }, needs))
    }

    /// Column-wise mean of a `t×d` matrix.
    pub fn mean_pool(&mut self, rows: Var) -> Result<Var> {
        let (t, d) = match self.shape(rows) {
            [t, d] => (*t, *d),
            other => {
                return Err(Error::shape(
                    "mean_pool",
                    format!("expected a t×d matrix, got shape {other:?}"),
                ))
            }
        };
        if t == 0 {
            return Err(Error::EmptySequence("mean_pool"));
        }
        let rv = self.value(rows);
        let mut out = vec![0.0; d];
        for r in 0..t {
            for (o, x) in out.iter_mut().zip(&rv[r * d..(r + 1) * d]) {
                *o += x;
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let needs = self.needs(rows);
        Ok(self.push(vec![d], out, Op::MeanPool(rows), needs))
    }

    /// Select rows `ids` of a `V×d` table into an `ids.len()×d` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            other => {
                return Err(Error::shape(
                    "gather_rows",
                    format!("expected a V×d table, got shape {other:?}"),
                ))
            }
        };
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocabulary { id, vocab_size: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!(
                    "operands have shapes {:?} and {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Add(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Mul(a, b), needs))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let la = self.vector_len("concat", a)?;
        let lb = self.vector_len("concat", b)?;
        let mut out = Vec::with_capacity(la + lb);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![la + lb], out, Op::Concat(a, b), needs))
    }

    /// Multiply every element of `v` by the scalar node `s`.
    pub fn scale(&mut self, v: Var, s: Var) -> Result<Var> {
        self.scalar_check("scale", s)?;
        let sv = self.scalar(s);
        let out = self.value(v).iter().map(|x| x * sv).collect();
        let shape = self.shape(v).to_vec();
        let needs = self.needs(v) || self.needs(s);
        Ok(self.push(shape, out, Op::Scale { v, s }, needs))
    }

    pub fn mul_const(&mut self, v: Var, c: f64) -> Var {
        let out = self.value(v).iter().map(|x| x * c).collect();
        let shape = self.shape(v).to_vec();
        let needs = self.needs(v);
        self.push(shape, out, Op::MulConst(v, c), needs)
    }

    pub fn add_const(&mut self, v: Var, c: f64) -> Var {
        let out = self.value(v).iter().map(|x| x + c).collect();
        let shape = self.shape(v).to_vec();
        let needs = self.needs(v);
        self.push(shape, out, Op::AddConst(v), needs)
    }

    /// Element `i` of a vector as a scalar node.
    pub fn pick(&mut self, v: Var, i: usize) -> Result<Var> {
        let n = self.vector_len("pick", v)?;
        if i >= n {
            return Err(Error::shape(
                "pick",
                format!("index {i} out of range for length {n}"),
            ));
        }
        let out = vec![self.value(v)[i]];
        let needs = self.needs(v);
        Ok(self.push(vec![1], out, Op::Pick(v, i), needs))
    }

    /// Cosine similarity of two vectors; zero-norm operands are rejected.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (na, nb) = (dot(av, av).sqrt(), dot(bv, bv).sqrt());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let c = dot(av, bv) / (na * nb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![c], Op::Cosine(a, b), needs))
    }

    pub fn square(&mut self, v: Var) -> Var {
        let out = self.value(v).iter().map(|x| x * x).collect();
        let shape = self.shape(v).to_vec();
        let needs = self.needs(v);
        self.push(shape, out, Op::Square(v), needs)
    }

    /// Sum of all elements.
    pub fn sum(&mut self, v: Var) -> Var {
        let total = self.value(v).iter().sum();
        let needs = self.needs(v);
        self.push(vec![1], vec![total], Op::Sum(v), needs)
    }

    /// Contiguous sub-vector `v[start..start + len]`.
    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.vector_len("slice", v)?;
        if start + len > n {
            return Err(Error::shape(
                "slice",
                format!(
                    "range {start}..{} out of bounds for length {n}",
                    start + len
                ),
            ));
        }
        let out = self.value(v)[start..start + len].to_vec();
        let needs = self.needs(v);
        Ok(self.push(vec![len], out, Op::Slice { v, start }, needs))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, v: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(v).len();
        if shape.iter().product::<usize>() != n {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {n} values as shape {shape:?}"),
            ));
        }
        let out = self.value(v).to_vec();
        let needs = self.needs(v);
        Ok(self.push(shape, out, Op::Reshape(v), needs))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_scalars(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::EmptySequence("mean_scalars"));
        }
        for &v in vs {
            self.scalar_check("mean_scalars", v)?;
        }
        let total: f64 = vs.iter().map(|&v| self.scalar(v)).sum();
        let needs = vs.iter().any(|&v| self.needs(v));
        let s = self.push(vec![1], vec![total], Op::SumScalars(vs.to_vec()), needs);
        Ok(self.mul_const(s, 1.0 / vs.len() as f64))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, lens })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { w, b, x } => {
                let n = self.nodes[x.0].value.len();
                let wv = &self.nodes[w.0].value;
                let xv = &self.nodes[x.0].value;
                acc(*w, &mut |dw| {
                    for (i, gi) in g.iter().enumerate() {
                        for (d, xj) in dw[i * n..(i + 1) * n].iter_mut().zip(xv) {
                            *d += gi * xj;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(*x, &mut |dx| {
                    for (i, gi) in g.iter().enumerate() {
                        for (d, wij) in dx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                            *d += gi * wij;
                        }
                    }
                });
            }
            Op::Softmax(v) => {
                let y = &node.value;
                let gy = dot(g, y);
                acc(*v, &mut |dv| {
                    for ((d, yi), gi) in dv.iter_mut().zip(y).zip(g) {
                        *d += yi * (gi - gy);
                    }
                });
            }
            Op::Sigmoid(v) => {
                let y = &node.value;
                acc(*v, &mut |dv| {
                    for ((d, yi), gi) in dv.iter_mut().zip(y).zip(g) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(v) => {
                let y = &node.value;
                acc(*v, &mut |dv| {
                    for ((d, yi), gi) in dv.iter_mut().zip(y).zip(g) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Bce { p, target } => {
                let pv = self.nodes[p.0].value[0];
                // the clamp is flat outside [eps, 1 - eps]
                let dp = if !(LOG_EPS..=1.0 - LOG_EPS).contains(&pv) {
                    0.0
                } else {
                    -target / pv + (1.0 - target) / (1.0 - pv)
                };
                acc(*p, &mut |d| d[0] += g[0] * dp);
            }
            Op::MeanPool(rows) => {
                let d = node.value.len();
                let inv = 1.0 / (self.nodes[rows.0].value.len() / d) as f64;
                acc(*rows, &mut |dr| {
                    for chunk in dr.chunks_mut(d) {
                        for (c, gi) in chunk.iter_mut().zip(g) {
                            *c += gi * inv;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, gi) in dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                        {
                            *t += gi;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |dv| {
                        for (d, gi) in dv.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Concat(a, b) => {
                let la = self.nodes[a.0].value.len();
                acc(*a, &mut |da| {
                    for (d, gi) in da.iter_mut().zip(&g[..la]) {
                        *d += gi;
                    }
                });
                acc(*b, &mut |db| {
                    for (d, gi) in db.iter_mut().zip(&g[la..]) {
                        *d += gi;
                    }
                });
            }
            Op::Scale { v, s } => {
                let sv = self.nodes[s.0].value[0];
                let vv = &self.nodes[v.0].value;
                acc(*v, &mut |dv| {
                    for (d, gi) in dv.iter_mut().zip(g) {
                        *d += gi * sv;
                    }
                });
                acc(*s, &mut |ds| ds[0] += dot(g, vv));
            }
            Op::MulConst(v, c) => {
                acc(*v, &mut |dv| {
                    for (d, gi) in dv.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                });
            }
            Op::AddConst(v) => {
                acc(*v, &mut |dv| {
                    for (d, gi) in dv.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Pick(v, i) => acc(*v, &mut |dv| dv[*i] += g[0]),
            Op::Cosine(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (na, nb) = (dot(av, av).sqrt(), dot(bv, bv).sqrt());
                let c = node.value[0];
                acc(*a, &mut |da| {
                    for ((d, x), y) in da.iter_mut().zip(av).zip(bv) {
                        *d += g[0] * (y / (na * nb) - c * x / (na * na));
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, x), y) in db.iter_mut().zip(av).zip(bv) {
                        *d += g[0] * (x / (na * nb) - c * y / (nb * nb));
                    }
                });
            }
            Op::Square(v) => {
                let vv = &self.nodes[v.0].value;
                acc(*v, &mut |dv| {
                    for ((d, x), gi) in dv.iter_mut().zip(vv).zip(g) {
                        *d += 2.0 * x * gi;
                    }
                });
            }
            Op::Sum(v) => {
                acc(*v, &mut |dv| dv.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::SumScalars(vs) => {
                for &v in vs {
                    acc(v, &mut |dv| dv[0] += g[0]);
                }
            }
            Op::Slice { v, start } => {
                acc(*v, &mut |dv| {
                    for (d, gi) in dv[*start..*start + g.len()].iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Reshape(v) => {
                acc(*v, &mut |dv| {
                    for (d, gi) in dv.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
        }
    }
}
