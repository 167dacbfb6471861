//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A `Tape` records every primitive as it executes; `backward` replays the
//! record once in reverse, accumulating gradients for named parameters.
//! Tapes are rebuilt per forward pass — no persistent graph, no in-place
//! mutation — and every op checks its output for NaN/Inf.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::diffcore::array::{Array, Scalar};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Gradients keyed by parameter name.
pub type Grads<F> = BTreeMap<String, Array<F>>;

/// Broadcast mode of the right operand in elementwise binary ops.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Bcast {
    /// Identical shapes.
    Same,
    /// rhs is a vector matching the last axis (per-channel gain/bias).
    LastDim,
    /// rhs is a single-element array.
    Scalar,
}

/// Boolean attention pattern over (query, key) positions; true = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    tq: usize,
    tk: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn from_fn(tq: usize, tk: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        let mut allow = vec![false; tq * tk];
        for q in 0..tq {
            for k in 0..tk {
                allow[q * tk + k] = f(q, k);
            }
        }
        Mask { tq, tk, allow }
    }

    /// Strict causal self-attention: token i sees tokens 0..=i.
    pub fn causal(t: usize) -> Mask {
        Mask::from_fn(t, t, |q, k| k <= q)
    }

    /// Conditioning prefix (bidirectional among itself, visible to all)
    /// followed by a causal suffix: suffix token l sees the prefix plus
    /// suffix tokens 0..=l; prefix tokens never see the suffix.
    pub fn prefix_causal(prefix: usize, suffix: usize) -> Mask {
        let t = prefix + suffix;
        Mask::from_fn(t, t, |q, k| if k < prefix { true } else { q >= prefix && k <= q })
    }

    pub fn tq(&self) -> usize {
        self.tq
    }

    pub fn tk(&self) -> usize {
        self.tk
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.tk + k]
    }
}

/// Precomputed rotary cos/sin per (token, channel pair) for fixed timestamps.
///
/// Pair u of a d-wide head rotates by angle timestamp · base^(−2u/d).
pub struct RopeTable<F: Scalar> {
    t_len: usize,
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Scalar> RopeTable<F> {
    pub fn new(timestamps: &[f64], head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary head dim must be even and positive, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(timestamps.len() * half);
        let mut sin = Vec::with_capacity(timestamps.len() * half);
        for &ts in timestamps {
            for u in 0..half {
                let theta = base.powf(-2.0 * u as f64 / head_dim as f64);
                let ang = ts * theta;
                cos.push(F::of_f64(ang.cos()));
                sin.push(F::of_f64(ang.sin()));
            }
        }
        Ok(RopeTable { t_len: timestamps.len(), half, cos, sin })
    }

    /// Flat (token, pair) cosine table.
    pub fn cos_table(&self) -> &[F] {
        &self.cos
    }

    /// Flat (token, pair) sine table.
    pub fn sin_table(&self) -> &[F] {
        &self.sin
    }
}

enum Op<F: Scalar> {
    /// Batched matmul; rhs broadcast over the batch when it is 2-d.
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId, bc: Bcast },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId, bc: Bcast },
    Scale { a: NodeId, c: F },
    AddScalar { a: NodeId },
    Exp { a: NodeId },
    Gelu { a: NodeId },
    /// Normalize over the last axis; saved per-row mean and 1/std.
    LayerNorm { a: NodeId, mean: Vec<F>, rstd: Vec<F> },
    /// Softmax over the last axis restricted to mask-allowed entries;
    /// masked outputs are exactly zero. Mask covers the last two axes.
    MaskedSoftmax { a: NodeId, mask: Arc<Mask> },
    /// Rotate channel pairs of the last axis; time runs along axis 0.
    Rope { a: NodeId, table: Arc<RopeTable<F>> },
    Concat0 { parts: Vec<NodeId> },
    Slice0 { a: NodeId, lo: usize },
    Reshape { a: NodeId },
    TransposeLast { a: NodeId },
    SwapAxes01 { a: NodeId },
    /// Row lookup with scatter-add backward (embedding tables).
    GatherRows { a: NodeId, idx: Arc<Vec<usize>> },
    /// Mean over consecutive blocks of `r` rows (temporal downsampling).
    PoolMeanRows { a: NodeId, r: usize },
    /// Repeat each row `r` times (nearest-neighbor upsampling).
    RepeatRows { a: NodeId, r: usize },
    /// Sum over the last axis, dropping it.
    SumLast { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Minimum { a: NodeId, b: NodeId },
    Clamp { a: NodeId, lo: F, hi: F },
}

enum Kind<F: Scalar> {
    Leaf,
    Param,
    Op(Op<F>),
}

struct Node<F: Scalar> {
    value: Array<F>,
    kind: Kind<F>,
}

/// The recording tape. Append order is topological order by construction.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, NodeId>,
    ln_eps: f64,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), ln_eps: 1e-5 }
    }

    pub fn value(&self, id: NodeId) -> &Array<F> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<F>, kind: Kind<F>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced at tape node {} ({})",
                self.nodes.len(),
                kind_name(&kind)
            )));
        }
        self.nodes.push(Node { value, kind });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Record a constant (no gradient).
    pub fn leaf(&mut self, value: Array<F>) -> Result<NodeId> {
        self.push(value, Kind::Leaf)
    }

    /// Record a named parameter; its gradient is collected by `backward`.
    pub fn param(&mut self, name: &str, value: Array<F>) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter '{name}' registered twice on one tape")));
        }
        let id = self.push(value, Kind::Param)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Kind::Op(Op::MatMul { a, b }))
    }

    fn binary_shapes_ok(&self, a: NodeId, b: NodeId, bc: Bcast, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ok = match bc {
            Bcast::Same => sa == sb,
            Bcast::LastDim => sb.len() == 1 && sb[0] == *sa.last().unwrap_or(&0),
            Bcast::Scalar => self.value(b).len() == 1,
        };
        if !ok {
            return Err(Error::Shape(format!("{what}: lhs {sa:?} incompatible with rhs {sb:?} under {bc:?}")));
        }
        Ok(())
    }

    fn apply_bcast(&self, a: NodeId, b: NodeId, bc: Bcast, f: impl Fn(F, F) -> F) -> Array<F> {
        let av = self.value(a);
        let bv = self.value(b);
        match bc {
            Bcast::Same => av.zip_map(bv, f).expect("checked"),
            Bcast::LastDim => {
                let d = av.last_dim();
                let data = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv.data()[i % d]))
                    .collect();
                Array::new(av.shape().to_vec(), data).expect("same shape")
            }
            Bcast::Scalar => {
                let c = bv.data()[0];
                av.map(|x| f(x, c))
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_bc(a, b, Bcast::Same)
    }

    pub fn add_bc(&mut self, a: NodeId, b: NodeId, bc: Bcast) -> Result<NodeId> {
        self.binary_shapes_ok(a, b, bc, "add")?;
        let v = self.apply_bcast(a, b, bc, |x, y| x + y);
        self.push(v, Kind::Op(Op::Add { a, b, bc }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes_ok(a, b, Bcast::Same, "sub")?;
        let v = self.apply_bcast(a, b, Bcast::Same, |x, y| x - y);
        self.push(v, Kind::Op(Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.mul_bc(a, b, Bcast::Same)
    }

    pub fn mul_bc(&mut self, a: NodeId, b: NodeId, bc: Bcast) -> Result<NodeId> {
        self.binary_shapes_ok(a, b, bc, "mul")?;
        let v = self.apply_bcast(a, b, bc, |x, y| x * y);
        self.push(v, Kind::Op(Op::Mul { a, b, bc }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cf = F::of_f64(c);
        let v = self.value(a).map(|x| x * cf);
        self.push(v, Kind::Op(Op::Scale { a, c: cf }))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cf = F::of_f64(c);
        let v = self.value(a).map(|x| x + cf);
        self.push(v, Kind::Op(Op::AddScalar { a }))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Kind::Op(Op::Exp { a }))
    }

    /// GELU, tanh approximation: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| gelu_fwd(x));
        self.push(v, Kind::Op(Op::Gelu { a }))
    }

    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() == 0 {
            return Err(Error::Shape("layer_norm needs ndim >= 1".into()));
        }
        let d = av.last_dim();
        let eps = F::of_f64(self.ln_eps);
        let mut mean = Vec::with_capacity(av.n_rows());
        let mut rstd = Vec::with_capacity(av.n_rows());
        let mut out = Vec::with_capacity(av.len());
        for row in av.rows() {
            let mu = row.iter().fold(F::zero(), |s, &x| s + x) / F::of_f64(d as f64);
            let var = row.iter().fold(F::zero(), |s, &x| s + (x - mu) * (x - mu)) / F::of_f64(d as f64);
            let rs = F::one() / (var + eps).sqrt();
            for &x in row {
                out.push((x - mu) * rs);
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let v = Array::new(av.shape().to_vec(), out)?;
        self.push(v, Kind::Op(Op::LayerNorm { a, mean, rstd }))
    }

    pub fn masked_softmax(&mut self, a: NodeId, mask: Arc<Mask>) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() < 2 {
            return Err(Error::Shape("masked_softmax needs ndim >= 2".into()));
        }
        let (tq, tk) = (av.shape()[av.ndim() - 2], av.last_dim());
        if tq != mask.tq || tk != mask.tk {
            return Err(Error::Shape(format!(
                "mask ({}, {}) does not cover scores ({tq}, {tk})",
                mask.tq, mask.tk
            )));
        }
        let batch = av.len() / (tq * tk);
        let mut out = vec![F::zero(); av.len()];
        for b in 0..batch {
            for q in 0..tq {
                let row = &av.data()[b * tq * tk + q * tk..b * tq * tk + (q + 1) * tk];
                let dst = &mut out[b * tq * tk + q * tk..b * tq * tk + (q + 1) * tk];
                let mut mx = F::neg_infinity();
                for k in 0..tk {
                    if mask.allows(q, k) && row[k] > mx {
                        mx = row[k];
                    }
                }
                if mx == F::neg_infinity() {
                    return Err(Error::Numeric(format!("attention row {q} is fully masked")));
                }
                let mut z = F::zero();
                for k in 0..tk {
                    if mask.allows(q, k) {
                        let e = (row[k] - mx).exp();
                        dst[k] = e;
                        z = z + e;
                    }
                }
                for k in 0..tk {
                    if mask.allows(q, k) {
                        dst[k] = dst[k] / z;
                    }
                }
            }
        }
        let v = Array::new(av.shape().to_vec(), out)?;
        self.push(v, Kind::Op(Op::MaskedSoftmax { a, mask }))
    }

    /// Apply rotary rotation; axis 0 is time (must match the table length),
    /// the last axis holds the rotated channel pairs, middle axes broadcast.
    pub fn rope(&mut self, a: NodeId, table: Arc<RopeTable<F>>) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() < 2 || av.shape()[0] != table.t_len || av.last_dim() != table.half * 2 {
            return Err(Error::Shape(format!(
                "rope: input {:?} does not match table ({} timestamps, head dim {})",
                av.shape(),
                table.t_len,
                table.half * 2
            )));
        }
        let v = rope_rotate(av, &table, false)?;
        self.push(v, Kind::Op(Op::Rope { a, table }))
    }

    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let arrays: Vec<&Array<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Array::concat0(&arrays)?;
        self.push(v, Kind::Op(Op::Concat0 { parts: parts.to_vec() }))
    }

    pub fn slice0(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let v = self.value(a).slice0(lo, hi)?;
        self.push(v, Kind::Op(Op::Slice0 { a, lo }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Kind::Op(Op::Reshape { a }))
    }

    pub fn transpose_last(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose_last()?;
        self.push(v, Kind::Op(Op::TransposeLast { a }))
    }

    pub fn swap_axes01(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).swap_axes01()?;
        self.push(v, Kind::Op(Op::SwapAxes01 { a }))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(Error::Shape("gather_rows input must be 2-d".into()));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::Shape(format!("gather_rows index {i} out of {n}")));
            }
            out.extend_from_slice(&av.data()[i * d..(i + 1) * d]);
        }
        let v = Array::new(vec![idx.len(), d], out)?;
        self.push(v, Kind::Op(Op::GatherRows { a, idx }))
    }

    pub fn pool_mean_rows(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 2 || r == 0 || av.shape()[0] % r != 0 {
            return Err(Error::Shape(format!(
                "pool_mean_rows: rows {:?} not divisible by {r}",
                av.shape()
            )));
        }
        let (t, d) = (av.shape()[0], av.shape()[1]);
        let inv = F::of_f64(1.0 / r as f64);
        let mut out = vec![F::zero(); (t / r) * d];
        for g in 0..t / r {
            for j in 0..r {
                let row = &av.data()[(g * r + j) * d..(g * r + j + 1) * d];
                for (o, &x) in out[g * d..(g + 1) * d].iter_mut().zip(row) {
                    *o = *o + x * inv;
                }
            }
        }
        let v = Array::new(vec![t / r, d], out)?;
        self.push(v, Kind::Op(Op::PoolMeanRows { a, r }))
    }

    pub fn repeat_rows(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 2 || r == 0 {
            return Err(Error::Shape("repeat_rows input must be 2-d, r >= 1".into()));
        }
        let (t, d) = (av.shape()[0], av.shape()[1]);
        let mut out = Vec::with_capacity(t * r * d);
        for i in 0..t {
            for _ in 0..r {
                out.extend_from_slice(&av.data()[i * d..(i + 1) * d]);
            }
        }
        let v = Array::new(vec![t * r, d], out)?;
        self.push(v, Kind::Op(Op::RepeatRows { a, r }))
    }

    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() == 0 {
            return Err(Error::Shape("sum_last needs ndim >= 1".into()));
        }
        let data: Vec<F> = av.rows().map(|row| row.iter().fold(F::zero(), |s, &x| s + x)).collect();
        let v = Array::new(av.shape()[..av.ndim() - 1].to_vec(), data)?;
        self.push(v, Kind::Op(Op::SumLast { a }))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().fold(F::zero(), |s, &x| s + x);
        self.push(Array::scalar(s), Kind::Op(Op::Sum { a }))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::Shape("mean of empty array".into()));
        }
        let s = av.data().iter().fold(F::zero(), |s, &x| s + x) / F::of_f64(av.len() as f64);
        self.push(Array::scalar(s), Kind::Op(Op::Mean { a }))
    }

    /// Mean squared error between two same-shape nodes (composed primitive).
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes_ok(a, b, Bcast::Same, "minimum")?;
        let v = self.apply_bcast(a, b, Bcast::Same, |x, y| if x <= y { x } else { y });
        self.push(v, Kind::Op(Op::Minimum { a, b }))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::Config(format!("clamp range [{lo}, {hi}] inverted")));
        }
        let (lof, hif) = (F::of_f64(lo), F::of_f64(hi));
        let v = self.value(a).map(|x| if x < lof { lof } else if x > hif { hif } else { x });
        self.push(v, Kind::Op(Op::Clamp { a, lo: lof, hi: hif }))
    }

    /// Reverse sweep from a scalar loss; returns gradients for every
    /// registered parameter (zeros when unreached by the loss).
    pub fn backward(&self, loss: NodeId) -> Result<Grads<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Array<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::full(self.value(loss).shape().to_vec(), F::one()));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if let Kind::Op(op) = &node.kind {
                self.backprop_op(op, &node.value, &g, &mut grads)?;
            }
            if let Kind::Param = &node.kind {
                grads[id] = Some(g); // keep for collection below
            }
        }

        let mut out = Grads::new();
        for (name, id) in &self.params {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Array::zeros(self.value(*id).shape().to_vec()));
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter '{name}'")));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backprop_op(
        &self,
        op: &Op<F>,
        value: &Array<F>,
        g: &Array<F>,
        grads: &mut [Option<Array<F>>],
    ) -> Result<()> {
        match op {
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let rhs_bcast = bv.ndim() == 2 && av.ndim() > 2;
                // dA = dC @ B^T (B^T broadcasts over the batch like B did).
                accumulate(grads, *a, g.matmul(&bv.transpose_last()?)?)?;
                // dB = A^T @ dC, summed over the batch when B was broadcast.
                if rhs_bcast {
                    let (m, k) = (av.shape()[av.ndim() - 2], av.last_dim());
                    let n = bv.last_dim();
                    let batch = av.len() / (m * k);
                    let mut db = Array::zeros(bv.shape().to_vec());
                    for bi in 0..batch {
                        let at = Array::new(vec![m, k], av.data()[bi * m * k..(bi + 1) * m * k].to_vec())?
                            .transpose_last()?;
                        F::gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            at.data(),
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            F::one(),
                            db.data_mut(),
                        );
                    }
                    accumulate(grads, *b, db)?;
                } else {
                    let db = av.transpose_last()?.matmul(g)?;
                    accumulate(grads, *b, db)?;
                }
            }
            Op::Add { a, b, bc } => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, reduce_to_rhs(g, self.value(*b), *bc))?;
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul { a, b, bc } => {
                let da = self.apply_bcast_grad(g, *b, *bc);
                accumulate(grads, *a, da)?;
                let weighted = g.zip_map(self.value(*a), |x, y| x * y).expect("same shape");
                accumulate(grads, *b, reduce_to_rhs(&weighted, self.value(*b), *bc))?;
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, g.map(|x| x * *c))?;
            }
            Op::AddScalar { a } => {
                accumulate(grads, *a, g.clone())?;
            }
            Op::Exp { a } => {
                accumulate(grads, *a, g.zip_map(value, |gi, yi| gi * yi).expect("same shape"))?;
            }
            Op::Gelu { a } => {
                let da = g.zip_map(self.value(*a), |gi, x| gi * gelu_bwd(x)).expect("same shape");
                accumulate(grads, *a, da)?;
            }
            Op::LayerNorm { a, mean, rstd } => {
                let av = self.value(*a);
                let d = av.last_dim();
                let dn = F::of_f64(d as f64);
                let mut out = vec![F::zero(); av.len()];
                for (r, (row, grow)) in av.rows().zip(g.rows()).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..d {
                        let xh = (row[j] - mu) * rs;
                        s1 = s1 + grow[j];
                        s2 = s2 + grow[j] * xh;
                    }
                    s1 = s1 / dn;
                    s2 = s2 / dn;
                    for j in 0..d {
                        let xh = (row[j] - mu) * rs;
                        out[r * d + j] = rs * (grow[j] - s1 - xh * s2);
                    }
                }
                accumulate(grads, *a, Array::new(av.shape().to_vec(), out)?)?;
            }
            Op::MaskedSoftmax { a, mask } => {
                let (tq, tk) = (mask.tq, mask.tk);
                let batch = value.len() / (tq * tk);
                let mut out = vec![F::zero(); value.len()];
                for b in 0..batch {
                    for q in 0..tq {
                        let base = b * tq * tk + q * tk;
                        let y = &value.data()[base..base + tk];
                        let gr = &g.data()[base..base + tk];
                        let mut dot = F::zero();
                        for k in 0..tk {
                            if mask.allows(q, k) {
                                dot = dot + gr[k] * y[k];
                            }
                        }
                        for k in 0..tk {
                            if mask.allows(q, k) {
                                out[base + k] = y[k] * (gr[k] - dot);
                            }
                        }
                    }
                }
                accumulate(grads, *a, Array::new(value.shape().to_vec(), out)?)?;
            }
            Op::Rope { a, table } => {
                accumulate(grads, *a, rope_rotate(g, table, true)?)?;
            }
            Op::Concat0 { parts } => {
                let mut lo = 0;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    accumulate(grads, p, g.slice0(lo, lo + rows)?)?;
                    lo += rows;
                }
            }
            Op::Slice0 { a, lo } => {
                let av = self.value(*a);
                let stride: usize = av.shape()[1..].iter().product();
                let mut da = Array::zeros(av.shape().to_vec());
                da.data_mut()[lo * stride..lo * stride + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, da)?;
            }
            Op::Reshape { a } => {
                accumulate(grads, *a, g.reshape(self.value(*a).shape().to_vec())?)?;
            }
            Op::TransposeLast { a } => {
                accumulate(grads, *a, g.transpose_last()?)?;
            }
            Op::SwapAxes01 { a } => {
                accumulate(grads, *a, g.swap_axes01()?)?;
            }
            Op::GatherRows { a, idx } => {
                let av = self.value(*a);
                let d = av.last_dim();
                let mut da = Array::zeros(av.shape().to_vec());
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        da.data_mut()[i * d + j] = da.data()[i * d + j] + g.data()[row * d + j];
                    }
                }
                accumulate(grads, *a, da)?;
            }
            Op::PoolMeanRows { a, r } => {
                let av = self.value(*a);
                let d = av.last_dim();
                let inv = F::of_f64(1.0 / *r as f64);
                let mut da = vec![F::zero(); av.len()];
                for (grow, chunk) in g.rows().zip(da.chunks_mut(r * d)) {
                    for j in 0..*r {
                        for (o, &x) in chunk[j * d..(j + 1) * d].iter_mut().zip(grow) {
                            *o = x * inv;
                        }
                    }
                }
                accumulate(grads, *a, Array::new(av.shape().to_vec(), da)?)?;
            }
            Op::RepeatRows { a, r } => {
                let av = self.value(*a);
                let d = av.last_dim();
                let mut da = vec![F::zero(); av.len()];
                for (i, grow) in g.rows().enumerate() {
                    let dst = &mut da[(i / r) * d..(i / r + 1) * d];
                    for (o, &x) in dst.iter_mut().zip(grow) {
                        *o = *o + x;
                    }
                }
                accumulate(grads, *a, Array::new(av.shape().to_vec(), da)?)?;
            }
            Op::SumLast { a } => {
                let av = self.value(*a);
                let d = av.last_dim();
                let mut da = Vec::with_capacity(av.len());
                for &gi in g.data() {
                    for _ in 0..d {
                        da.push(gi);
                    }
                }
                accumulate(grads, *a, Array::new(av.shape().to_vec(), da)?)?;
            }
            Op::Sum { a } => {
                let gi = g.data()[0];
                accumulate(grads, *a, Array::full(self.value(*a).shape().to_vec(), gi))?;
            }
            Op::Mean { a } => {
                let av = self.value(*a);
                let gi = g.data()[0] / F::of_f64(av.len() as f64);
                accumulate(grads, *a, Array::full(av.shape().to_vec(), gi))?;
            }
            Op::Minimum { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = vec![F::zero(); av.len()];
                let mut db = vec![F::zero(); av.len()];
                for i in 0..av.len() {
                    if av.data()[i] <= bv.data()[i] {
                        da[i] = g.data()[i];
                    } else {
                        db[i] = g.data()[i];
                    }
                }
                accumulate(grads, *a, Array::new(av.shape().to_vec(), da)?)?;
                accumulate(grads, *b, Array::new(bv.shape().to_vec(), db)?)?;
            }
            Op::Clamp { a, lo, hi } => {
                let av = self.value(*a);
                let da = g
                    .zip_map(av, |gi, x| if x >= *lo && x <= *hi { gi } else { F::zero() })
                    .expect("same shape");
                accumulate(grads, *a, da)?;
            }
        }
        Ok(())
    }

    /// Gradient of lhs for a broadcast Mul: g * rhs broadcast to lhs shape.
    fn apply_bcast_grad(&self, g: &Array<F>, b: NodeId, bc: Bcast) -> Array<F> {
        let bv = self.value(b);
        match bc {
            Bcast::Same => g.zip_map(bv, |x, y| x * y).expect("same shape"),
            Bcast::LastDim => {
                let d = g.last_dim();
                let data = g.data().iter().enumerate().map(|(i, &x)| x * bv.data()[i % d]).collect();
                Array::new(g.shape().to_vec(), data).expect("same shape")
            }
            Bcast::Scalar => {
                let c = bv.data()[0];
                g.map(|x| x * c)
            }
        }
    }
}

/// Sum a full-shape gradient down to the rhs shape of a broadcast op.
fn reduce_to_rhs<F: Scalar>(g: &Array<F>, rhs: &Array<F>, bc: Bcast) -> Array<F> {
    match bc {
        Bcast::Same => g.clone(),
        Bcast::LastDim => {
            let d = rhs.len();
            let mut out = vec![F::zero(); d];
            for (i, &x) in g.data().iter().enumerate() {
                out[i % d] = out[i % d] + x;
            }
            Array::new(rhs.shape().to_vec(), out).expect("vector shape")
        }
        Bcast::Scalar => {
            let s = g.data().iter().fold(F::zero(), |s, &x| s + x);
            Array::new(rhs.shape().to_vec(), vec![s]).expect("scalar shape")
        }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array<F>>], id: NodeId, g: Array<F>) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match value shape {:?}",
                    g.shape(),
                    existing.shape()
                )));
            }
            let summed = existing.zip_map(&g, |a, b| a + b)?;
            *existing = summed;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn kind_name<F: Scalar>(kind: &Kind<F>) -> &'static str {
    match kind {
        Kind::Leaf => "leaf",
        Kind::Param => "param",
        Kind::Op(op) => match op {
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Exp { .. } => "exp",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Rope { .. } => "rope",
            Op::Concat0 { .. } => "concat",
            Op::Slice0 { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::TransposeLast { .. } => "transpose",
            Op::SwapAxes01 { .. } => "swap_axes",
            Op::GatherRows { .. } => "gather_rows",
            Op::PoolMeanRows { .. } => "pool_mean",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::SumLast { .. } => "sum_last",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Minimum { .. } => "minimum",
            Op::Clamp { .. } => "clamp",
        },
    }
}

fn rope_rotate<F: Scalar>(x: &Array<F>, table: &RopeTable<F>, inverse: bool) -> Result<Array<F>> {
    let d = x.last_dim();
    let half = table.half;
    let t_len = table.t_len;
    let mid: usize = x.shape()[1..x.ndim() - 1].iter().product();
    let mut out = vec![F::zero(); x.len()];
    for t in 0..t_len {
        for m in 0..mid {
            let base = (t * mid + m) * d;
            for u in 0..half {
                let (c, s) = (table.cos[t * half + u], table.sin[t * half + u]);
                let s = if inverse { -s } else { s };
                let (a, b) = (x.data()[base + 2 * u], x.data()[base + 2 * u + 1]);
                out[base + 2 * u] = a * c - b * s;
                out[base + 2 * u + 1] = a * s + b * c;
            }
        }
    }
    Array::new(x.shape().to_vec(), out)
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of_f64(0.044715);
    let half = F::of_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = F::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of_f64(0.044715);
    let half = F::of_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::of_f64(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Scaled dot-product attention with an explicit mask.
///
/// q, k, v are (T, H, D_h) token-major; rotary embedding (if any) is applied
/// by the caller beforehand. Returns (T, H, D_h).
pub fn attention_masked<F: Scalar>(
    tape: &mut Tape<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Arc<Mask>,
) -> Result<NodeId> {
    let qs = tape.value(q).shape().to_vec();
    let ks = tape.value(k).shape().to_vec();
    if qs.len() != 3 || ks.len() != 3 || tape.value(v).shape() != &ks[..] {
        return Err(Error::Shape(format!(
            "attention expects (T, H, Dh) inputs, got q {:?}, k {:?}, v {:?}",
            qs,
            ks,
            tape.value(v).shape()
        )));
    }
    if qs[1] != ks[1] || qs[2] != ks[2] {
        return Err(Error::Shape(format!("attention head dims differ: q {qs:?}, k {ks:?}")));
    }
    let dh = qs[2];
    let qh = tape.swap_axes01(q)?; // (H, Tq, Dh)
    let kh = tape.swap_axes01(k)?;
    let vh = tape.swap_axes01(v)?;
    let kt = tape.transpose_last(kh)?; // (H, Dh, Tk)
    let scores = tape.matmul(qh, kt)?; // (H, Tq, Tk)
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.masked_softmax(scaled, mask)?;
    let out = tape.matmul(attn, vh)?; // (H, Tq, Dh)
    tape.swap_axes01(out)
}

/// Attention under a conditioning-prefix + causal-suffix pattern: every
/// token sees the whole prefix; suffix token l additionally sees suffix
/// tokens 0..=l and never later ones.
pub fn attention_causal<F: Scalar>(
    tape: &mut Tape<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    prefix_len: usize,
) -> Result<NodeId> {
    let t = tape.value(q).shape()[0];
    if prefix_len > t {
        return Err(Error::Shape(format!("prefix {prefix_len} longer than sequence {t}")));
    }
    let mask = Arc::new(Mask::prefix_causal(prefix_len, t - prefix_len));
    attention_masked(tape, q, k, v, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(tape: &mut Tape<f64>, shape: Vec<usize>, data: &[f64]) -> NodeId {
        let a = Array::from_f64(shape, data).unwrap();
        tape.leaf(a).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        // 2x3 times 3x2 identity-padded: result equals the leading 2x2 block.
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![2, 3], &[1.0, 2.0, 0.0, 3.0, 4.0, 0.0]);
        let b = leaf64(&mut t, vec![3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![3], &[1.0, -2.0, 0.5]);
        let m = t.mse(a, a).unwrap();
        assert_eq!(t.value(m).item().unwrap(), 0.0);
    }

    #[test]
    fn softmax_of_uniform_scores_is_uniform() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![1, 3], &[0.0, 0.0, 0.0]);
        let mask = Arc::new(Mask::from_fn(1, 3, |_, _| true));
        let s = t.masked_softmax(a, mask).unwrap();
        for &x in t.value(s).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_entries_are_zero_and_rows_renormalize() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![2, 3], &[0.0, 0.0, 5.0, 1.0, 1.0, 1.0]);
        let mask = Arc::new(Mask::from_fn(2, 3, |_, k| k < 2));
        let s = t.masked_softmax(a, mask).unwrap();
        let v = t.value(s).data();
        assert_eq!(v[2], 0.0);
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_a_numeric_error() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![1, 2], &[0.0, 0.0]);
        let mask = Arc::new(Mask::from_fn(1, 2, |_, _| false));
        assert!(t.masked_softmax(a, mask).is_err());
    }

    #[test]
    fn rope_zero_timestamp_is_identity() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let table = Arc::new(RopeTable::new(&[0.0], 4, 10_000.0).unwrap());
        let r = t.rope(a, table).unwrap();
        assert_eq!(t.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rope_unit_vector_rotates_by_timestamp() {
        // Head dim 2, timestamp 1, first pair angle = 1 rad: (1,0) -> (cos 1, sin 1).
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![1, 2], &[1.0, 0.0]);
        let table = Arc::new(RopeTable::new(&[1.0], 2, 10_000.0).unwrap());
        let r = t.rope(a, table).unwrap();
        let v = t.value(r).data();
        assert!((v[0] - 0.540302305868).abs() < 1e-9, "got {}", v[0]);
        assert!((v[1] - 0.841470984808).abs() < 1e-9, "got {}", v[1]);
    }

    #[test]
    fn rope_equal_timestamps_share_rotation() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![2, 4], &[1.0, 0.5, -0.3, 2.0, 1.0, 0.5, -0.3, 2.0]);
        let table = Arc::new(RopeTable::new(&[7.0, 7.0], 4, 10_000.0).unwrap());
        let r = t.rope(a, table).unwrap();
        let v = t.value(r).data();
        assert_eq!(&v[..4], &v[4..]);
    }

    #[test]
    fn odd_head_dim_is_a_config_error() {
        assert!(RopeTable::<f64>::new(&[0.0], 3, 10_000.0).is_err());
    }

    #[test]
    fn attention_single_token_returns_own_value() {
        let mut t = Tape::<f64>::new();
        let q = leaf64(&mut t, vec![1, 1, 2], &[0.3, -0.7]);
        let k = leaf64(&mut t, vec![1, 1, 2], &[1.0, 1.0]);
        let v = leaf64(&mut t, vec![1, 1, 2], &[5.0, -6.0]);
        let o = attention_causal(&mut t, q, k, v, 0).unwrap();
        assert_eq!(t.value(o).data(), &[5.0, -6.0]);
    }

    #[test]
    fn attention_uniform_keys_average_unmasked_values() {
        let mut t = Tape::<f64>::new();
        // 3 tokens, 1 head, causal: token 2 averages values of tokens 0..=2.
        let q = leaf64(&mut t, vec![3, 1, 2], &[0.1; 6]);
        let k = leaf64(&mut t, vec![3, 1, 2], &[1.0; 6]);
        let v = leaf64(&mut t, vec![3, 1, 2], &[0.0, 0.0, 3.0, 3.0, 6.0, 6.0]);
        let o = attention_causal(&mut t, q, k, v, 0).unwrap();
        let out = t.value(o).data();
        assert!((out[0] - 0.0).abs() < 1e-12);
        assert!((out[2] - 1.5).abs() < 1e-12);
        assert!((out[4] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_rows_sum_to_one_and_hide_future() {
        let m = Mask::causal(4);
        assert!(m.allows(2, 0) && m.allows(2, 2));
        assert!(!m.allows(2, 3));
        let pc = Mask::prefix_causal(2, 3);
        // suffix token 0 (global index 2) sees both prefix tokens and itself.
        assert!(pc.allows(2, 0) && pc.allows(2, 1) && pc.allows(2, 2));
        assert!(!pc.allows(2, 3));
        // prefix is bidirectional among itself, blind to the suffix.
        assert!(pc.allows(0, 1));
        assert!(!pc.allows(0, 2));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let a = Array::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let p = t.param("w", a).unwrap();
        assert!(t.backward(p).is_err());
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.param("used", Array::from_f64(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
        let _b = t.param("unused", Array::from_f64(vec![3], &[0.0; 3]).unwrap()).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g["used"].data(), &[1.0, 1.0]);
        assert_eq!(g["unused"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates_both_paths() {
        // f(x) = x*x summed -> df/dx = 2x.
        let mut t = Tape::<f64>::new();
        let x = t.param("x", Array::from_f64(vec![2], &[3.0, -1.5]).unwrap()).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g["x"].data(), &[6.0, -3.0]);
    }

    #[test]
    fn clip_arithmetic_matches_hand_values() {
        let mut t = Tape::<f64>::new();
        let rho = leaf64(&mut t, vec![2], &[1.5, 0.5]);
        let c = t.clamp(rho, 0.8, 1.2).unwrap();
        assert_eq!(t.value(c).data(), &[1.2, 0.8]);
    }

    #[test]
    fn minimum_routes_gradient_to_smaller_branch() {
        let mut t = Tape::<f64>::new();
        let a = t.param("a", Array::from_f64(vec![2], &[1.0, 5.0]).unwrap()).unwrap();
        let b = t.param("b", Array::from_f64(vec![2], &[2.0, 4.0]).unwrap()).unwrap();
        let m = t.minimum(a, b).unwrap();
        let s = t.sum(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g["a"].data(), &[1.0, 0.0]);
        assert_eq!(g["b"].data(), &[0.0, 1.0]);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_var() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let n = t.layer_norm(a).unwrap();
        for row in t.value(n).rows() {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn pool_and_repeat_are_adjoint_shapes() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let p = t.pool_mean_rows(a, 2).unwrap();
        assert_eq!(t.value(p).data(), &[2.0, 3.0, 6.0, 7.0]);
        let r = t.repeat_rows(p, 2).unwrap();
        assert_eq!(t.value(r).shape(), &[4, 2]);
        assert_eq!(t.value(r).data(), &[2.0, 3.0, 2.0, 3.0, 6.0, 7.0, 6.0, 7.0]);
    }

    #[test]
    fn gather_rows_backward_scatter_adds() {
        let mut t = Tape::<f64>::new();
        let emb = t.param("emb", Array::from_f64(vec![3, 2], &[1.0; 6]).unwrap()).unwrap();
        let g = t.gather_rows(emb, Arc::new(vec![0, 2, 0])).unwrap();
        assert_eq!(t.value(g).shape(), &[3, 2]);
        let s = t.sum(g).unwrap();
        let grads = t.backward(s).unwrap();
        // row 0 gathered twice, row 1 never, row 2 once.
        assert_eq!(grads["emb"].data(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, vec![1], &[1.0e308]);
        assert!(t.scale(a, 2.0).is_err());
    }
}
