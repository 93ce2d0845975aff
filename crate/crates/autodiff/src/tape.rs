use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::gemm::gemm;
use crate::param::Parameter;
use crate::sample::SamplePlan;
use crate::tensor::Tensor;
use crate::LN_EPS;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum { a: Var },
    Mean { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    GatherRows { table: Var, rows: Vec<usize> },
    Gather { a: Var, index: Arc<Vec<usize>> },
    CrossEntropy { logits: Var, rows: Vec<usize>, targets: Vec<usize>, probs: Vec<f64> },
    Mse { a: Var, b: Var },
    Sample { a: Var, plan: Arc<SamplePlan> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// graph; [`Tape::backward`] visits them once, in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var, bool)>,
    param_index: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of an input leaf or trainable parameter leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradients for every trainable parameter registered on the tape, in
    /// name order. Trainables that do not influence the loss get zeros.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(shape_err(op, format!("expected 2-D, got {s:?}"))),
    }
}

/// Splits a shape around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .filter(|&d| d > 0)
        .ok_or_else(|| shape_err(op, format!("needs a non-empty last axis, got {:?}", t.shape())))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// An unnamed leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Registers a named parameter. Non-trainable parameters behave as
    /// constants and get no gradient entry.
    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        self.param_named(&p.name, p.tensor.clone(), p.trainable)
    }

    pub fn param_named(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<Var> {
        if self.param_index.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let v = self.push("param", t, Op::Leaf, trainable)?;
        self.params.push((name.to_string(), v, trainable));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// The variable a parameter was registered under, if any.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_index.get(name).copied()
    }

    /// Elementwise `a + b`. `b` may also match the trailing dimensions of `a`,
    /// in which case it is broadcast over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let same = ta.shape() == tb.shape();
        let trailing = tb.ndim() <= ta.ndim() && ta.shape()[ta.ndim() - tb.ndim()..] == *tb.shape();
        if !same && !(trailing && tb.numel() > 0) {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let nb = tb.numel();
        let bd = tb.data();
        let out: Vec<f64> = ta.data().iter().enumerate().map(|(i, x)| x + bd[i % nb]).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("sub", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", t, Op::Sub { a, b }, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("mul", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", t, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push("scale", t, Op::Scale { a, factor }, rg)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", t, Op::MatMul { a, b }, rg)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[a]);
        self.push("transpose", t, Op::Transpose { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", t, Op::Reshape { a }, rg)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(d, &n)| d == axis || n == base[d]);
            if !ok {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let span = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        self.push(
            "concat",
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let shape = src.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let t = Tensor::new(oshape, out)?;
        let rg = self.rg(&[a]);
        self.push("slice", t, Op::Slice { a, axis, start }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean over all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim("softmax", t)?;
        let mut out = t.to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push("softmax", t, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = last_dim("layer_norm", tx)?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    tx.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = tx.numel() / d;
        let mut normed = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mu) * r;
                normed.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push("gelu", t, Op::Gelu { a }, rg)
    }

    /// Row gather from a 2-D table (embedding lookup). The backward pass
    /// scatter-adds into the selected rows.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = dims2("gather_rows", self.value(table))?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::OutOfRange {
                    op: "gather_rows",
                    index: r,
                    len: n,
                });
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(&[table]);
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Flat gather: `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(shape_err("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            out.push(*src.get(i).ok_or(Error::OutOfRange {
                op: "gather",
                index: i,
                len: src.len(),
            })?);
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push("gather", t, Op::Gather { a, index }, rg)
    }

    /// Mean over masked rows of `-log softmax(logits[row])[target[row]]`.
    ///
    /// `logits` is `[T, V]`; `targets` and `mask` have length `T`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t_len, v) = dims2("masked_cross_entropy", self.value(logits))?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(shape_err(
                "masked_cross_entropy",
                format!("{t_len} rows, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        let rows: Vec<usize> = (0..t_len).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        let data = self.value(logits).data();
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut tgts = Vec::with_capacity(rows.len());
        let mut total = 0.0;
        for &r in &rows {
            let tgt = targets[r];
            if tgt >= v {
                return Err(Error::OutOfRange {
                    op: "masked_cross_entropy",
                    index: tgt,
                    len: v,
                });
            }
            let row = &data[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[tgt];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
            tgts.push(tgt);
        }
        let loss = total / rows.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(
            "masked_cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows,
                targets: tgts,
                probs,
            },
            rg,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("mse", ta, tb)?;
        if ta.numel() == 0 {
            return Err(shape_err("mse", "empty tensors"));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        self.push("mse", Tensor::scalar(s / ta.numel() as f64), Op::Mse { a, b }, rg)
    }

    /// Resamples the rows of a 2-D `[N, C]` value with a [`SamplePlan`].
    pub fn sample(&mut self, a: Var, plan: Arc<SamplePlan>) -> Result<Var> {
        let (n, c) = dims2("sample", self.value(a))?;
        if n != plan.src_len() {
            return Err(shape_err("sample", format!("plan expects {} rows, got {n}", plan.src_len())));
        }
        let out = plan.apply(self.value(a).data(), c)?;
        let t = Tensor::new(vec![plan.len(), c], out)?;
        let rg = self.rg(&[a]);
        self.push("sample", t, Op::Sample { a, plan }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DisconnectedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut params = BTreeMap::new();
        for (name, v, trainable) in &self.params {
            if !trainable {
                continue;
            }
            let g = leaves
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            params.insert(name.clone(), g);
        }
        Ok(Gradients { leaves, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Returns the accumulator for `v`, or None when `v` needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    let nb = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += y;
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = dims2("matmul", self.value(*a))?;
                let n = self.value(*b).shape()[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, false, vb, true, 1.0, ga);
                }
                if let Some(gb) = acc!(*b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, va, true, g, false, 1.0, gb);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = dims2("transpose", self.value(*a))?;
                if let Some(ga) = acc!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    if let Some(gp) = acc!(*p) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                gp[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, n, inner) = split_axis(self.value(*a).shape(), *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = acc!(*a) {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            ga[dst + i] += g[src + i];
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = acc!(*a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Softmax { a } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                if let Some(ga) = acc!(*a) {
                    for ((yr, gr), dr) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(ga.chunks_exact_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let gv = self.value(*gamma).data();
                if let Some(gb) = acc!(*beta) {
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gg) = acc!(*gamma) {
                    for (gr, nr) in g.chunks_exact(d).zip(normed.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * nr[j];
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mut dn = vec![0.0; d];
                    for (row, ((gr, nr), dx)) in g
                        .chunks_exact(d)
                        .zip(normed.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dn[j] = gr[j] * gv[j];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let r = rstd[row];
                        for j in 0..d {
                            dx[j] += r * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let va = self.value(*a).data();
                if let Some(ga) = acc!(*a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_grad(va[i]);
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                let d = self.value(*table).shape()[1];
                if let Some(gt) = acc!(*table) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gt[r * d + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = acc!(*a) {
                    for (i, &src) in index.iter().enumerate() {
                        ga[src] += g[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let v = self.value(*logits).shape()[1];
                if let Some(gl) = acc!(*logits) {
                    let s = g[0] / rows.len() as f64;
                    for (k, &r) in rows.iter().enumerate() {
                        let p = &probs[k * v..(k + 1) * v];
                        let dst = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            dst[j] += s * p[j];
                        }
                        dst[targets[k]] -= s;
                    }
                }
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / va.len() as f64;
                if let Some(ga) = acc!(*a) {
                    for i in 0..ga.len() {
                        ga[i] += s * (va[i] - vb[i]);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..gb.len() {
                        gb[i] -= s * (va[i] - vb[i]);
                    }
                }
            }
            Op::Sample { a, plan } => {
                let c = self.value(*a).shape()[1];
                if let Some(ga) = acc!(*a) {
                    plan.apply_adjoint(g, c, ga);
                }
            }
        }
        Ok(())
    }
}
