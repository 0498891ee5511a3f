use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::kernels::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sentinel in gather index maps: the output entry is a constant zero.
pub const GATHER_NONE: u32 = u32::MAX;

const LN_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sigmoid(Var),
    Gelu(Var),
    Softmax { x: Var, causal: bool },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, idx: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Gather(Vec<(Var, Rc<Vec<u32>>)>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        scale: f64,
        causal: bool,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Bce { probs: Var, coef: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded tape. Build the forward pass with the op methods, then
/// call [`Graph::backward`] on a scalar.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bound: HashMap<ParamId, Var>,
    non_finite: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
            non_finite: None,
        }
    }

    /// A graph that records values only; backward is unavailable.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(format!(
                "non-finite value produced by {} (node {})",
                op_name(&op),
                self.nodes.len()
            ));
        }
        let requires_grad = self.grad_enabled
            && match op {
                Op::Param => true,
                Op::Leaf => false,
                _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
            };
        let op = if requires_grad || matches!(op, Op::Param) { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Errors if any op so far produced NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(msg) => Err(Error::Numeric(msg.clone())),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A leaf whose gradient is reported by backward.
    pub fn input(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = self.grad_enabled;
        v
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, &[]);
        if !self.grad_enabled {
            self.nodes[v.0].requires_grad = false;
        }
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul ({m}x{k})·({k2}x{n})")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul ({m}x{k})·({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if self.value(row).len() != n {
            return Err(Error::Shape(format!(
                "add_row: {n} columns vs vector of {}",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(r)
                .for_each(|(o, b)| *o += b);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x * c).collect(),
        };
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if start + len > n || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) of {n} columns",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x: a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect::<Result<_>>()?;
        let m = dims
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?
            .0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let n: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| gelu_parts(x).0).collect(),
        };
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax over the last axis, with max subtraction. With
    /// `causal`, row i only covers columns `0..=i` and the rest are 0.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { (i + 1).min(n) } else { n };
            let row = &src[i * n..i * n + width];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..i * n + width];
            let mut s = 0.0;
            for (oj, &x) in o.iter_mut().zip(row) {
                *oj = (x - mx).exp();
                s += *oj;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x: a, causal }, &[a]))
    }

    /// Softmax along axis 0 or 1 of a matrix.
    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax(a, false),
            0 => {
                let t = self.transpose(a)?;
                let s = self.softmax(t, false)?;
                self.transpose(s)
            }
            _ => Err(Error::Shape(format!("softmax axis {axis} on a matrix"))),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape("layer_norm gain/bias width".into()));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let xh = (row[j] - mean) * r;
                xhat[i * n + j] = xh;
                out[i * n + j] = g[j] * xh + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// x·W + b
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "embedding index {bad} outside table of {rows} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout; the identity when `p == 0` or not training.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 || !training {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// `out[i, j] = src[i, idx[i * cols + j]]`, or 0 where the index is
    /// [`GATHER_NONE`].
    pub fn gather(&mut self, src: Var, idx: Rc<Vec<u32>>, cols: usize) -> Result<Var> {
        self.gather_sum(&[(src, idx)], cols)
    }

    /// Sum of several gathers with the same output shape.
    pub fn gather_sum(&mut self, parts: &[(Var, Rc<Vec<u32>>)], cols: usize) -> Result<Var> {
        let Some(&(first, _)) = parts.first() else {
            return Err(Error::Invalid("gather_sum of nothing".into()));
        };
        let m = self.dims(first)?.0;
        let mut out = vec![0.0; m * cols];
        for (src, idx) in parts {
            let (rows, n) = self.dims(*src)?;
            if rows != m || idx.len() != m * cols {
                return Err(Error::Shape(format!(
                    "gather map has {} entries for {rows} rows, expected {}",
                    idx.len(),
                    m * cols
                )));
            }
            if idx.iter().any(|&j| j != GATHER_NONE && j as usize >= n) {
                return Err(Error::Index(format!("gather index outside {n} columns")));
            }
            let s = self.value(*src).data();
            for i in 0..m {
                let srow = &s[i * n..(i + 1) * n];
                for (o, &j) in out[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(&idx[i * cols..(i + 1) * cols])
                {
                    if j != GATHER_NONE {
                        *o += srow[j as usize];
                    }
                }
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            Tensor::new(vec![m, cols], out)?,
            Op::Gather(parts.to_vec()),
            &inputs,
        ))
    }

    /// Causal or full scaled dot-product attention for one head:
    /// `softmax(scale · (q kᵀ + bias)) v`. Only the probabilities are kept
    /// for the reverse pass, and masked entries are never computed.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        scale: f64,
        causal: bool,
    ) -> Result<Var> {
        let (l, dh) = self.dims(q)?;
        let (lv, dv) = self.dims(v)?;
        if self.dims(k)? != (l, dh) || lv != l {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if let Some(b) = bias {
            if self.dims(b)? != (l, l) {
                return Err(Error::Shape(format!("attention bias {:?}", self.shape(b))));
            }
        }
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut probs = vec![0.0; l * l];
        let mut out = vec![0.0; l * dv];
        for i in 0..l {
            let w = if causal { i + 1 } else { l };
            let qi = &qv[i * dh..(i + 1) * dh];
            let row = &mut probs[i * l..i * l + w];
            for (j, z) in row.iter_mut().enumerate() {
                let mut x = dot(qi, &kv[j * dh..(j + 1) * dh]);
                if let Some(b) = bv {
                    x += b[i * l + j];
                }
                *z = scale * x;
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for z in row.iter_mut() {
                *z = (*z - mx).exp();
                s += *z;
            }
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (j, z) in row.iter_mut().enumerate() {
                *z /= s;
                axpy(*z, &vv[j * dv..(j + 1) * dv], oi);
            }
        }
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(vec![l, dv], out)?,
            Op::Attention {
                q,
                k,
                v,
                bias,
                scale,
                causal,
                probs,
            },
            &inputs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor { shape: vec![], data: vec![s] }, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor { shape: vec![], data: vec![s] }, Op::Mean(a), &[a])
    }

    /// Mean binary cross-entropy over cells with nonzero mask. Probabilities
    /// are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, probs: Var, targets: &Tensor, mask: &Tensor) -> Result<Var> {
        if self.shape(probs) != targets.shape() || targets.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "bce shapes {:?}, {:?}, {:?}",
                self.shape(probs),
                targets.shape(),
                mask.shape()
            )));
        }
        let p = self.value(probs).data();
        let denom: f64 = mask.data().iter().sum();
        if denom <= 0.0 {
            return Err(Error::Invalid("bce mask selects no cells".into()));
        }
        let mut loss = 0.0;
        let mut coef = vec![0.0; p.len()];
        for i in 0..p.len() {
            let w = mask.data()[i];
            if w == 0.0 {
                continue;
            }
            let y = targets.data()[i];
            let pc = p[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            if pc == p[i] {
                coef[i] = w * (-y / pc + (1.0 - y) / (1.0 - pc)) / denom;
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![],
                data: vec![loss / denom],
            },
            Op::Bce { probs, coef },
            &[probs],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Invalid("backward on a no-grad graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.ensure_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let grads = Gradients { grads };
        if let Some(bad) = grads.grads.iter().flatten().find(|g| g.iter().any(|v| !v.is_finite())) {
            let _ = bad;
            return Err(Error::Numeric("NaN or infinity in gradients".into()));
        }
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.1;
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    // dA = dY · Bᵀ
                    matmul_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = acc(&self.nodes, grads, *b) {
                    // dB = Aᵀ · dY
                    matmul_tn_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.0;
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    // dA = dY · B
                    matmul_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = acc(&self.nodes, grads, *b) {
                    // dB = dYᵀ · A
                    matmul_tn_acc(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = acc(&self.nodes, grads, v) {
                        axpy(1.0, g, gv);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    axpy(1.0, g, ga);
                }
                let n = self.value(*row).len();
                if let Some(gr) = acc(&self.nodes, grads, *row) {
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, gr);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    let bv = self.value(*b).data();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = acc(&self.nodes, grads, *b) {
                    let av = self.value(*a).data();
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a)?;
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x)?;
                let len = g.len() / m.max(1);
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for i in 0..m {
                        axpy(1.0, &g[i * len..(i + 1) * len], &mut gx[i * n + start..i * n + start + len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut c0 = 0;
                for &p in parts {
                    let c = self.dims(p)?.1;
                    if let Some(gp) = acc(&self.nodes, grads, p) {
                        for i in 0..m {
                            axpy(1.0, &g[i * n + c0..i * n + c0 + c], &mut gp[i * c..(i + 1) * c]);
                        }
                    }
                    c0 += c;
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    for (i, &y) in node.value.data().iter().enumerate() {
                        ga[i] += g[i] * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_parts(xs[i]).1;
                    }
                }
            }
            Op::Softmax { x, causal } => {
                let (m, n) = self.dims(*x)?;
                let y = node.value.data();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for i in 0..m {
                        let w = if *causal { (i + 1).min(n) } else { n };
                        let yr = &y[i * n..i * n + w];
                        let gr = &g[i * n..i * n + w];
                        let s = dot(yr, gr);
                        for j in 0..w {
                            gx[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x)?;
                let gv = self.value(*gain).data();
                if let Some(gg) = acc(&self.nodes, grads, *gain) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = acc(&self.nodes, grads, *bias) {
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, gb);
                    }
                }
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    let mut dxh = vec![0.0; n];
                    for i in 0..m {
                        let xh = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxh[j] = g[i * n + j] * gv[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxh, xh) / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, idx } => {
                let d = self.dims(*table)?.1;
                if let Some(gt) = acc(&self.nodes, grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Gather(parts) => {
                for (src, idx) in parts {
                    let (m, n) = self.dims(*src)?;
                    let cols = g.len() / m.max(1);
                    if let Some(gs) = acc(&self.nodes, grads, *src) {
                        for i in 0..m {
                            let grow = &mut gs[i * n..(i + 1) * n];
                            for (&gv, &j) in g[i * cols..(i + 1) * cols]
                                .iter()
                                .zip(&idx[i * cols..(i + 1) * cols])
                            {
                                if j != GATHER_NONE {
                                    grow[j as usize] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                scale,
                causal,
                probs,
            } => {
                let (l, dh) = self.dims(*q)?;
                let dv = self.dims(*v)?.1;
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                // dz[i, j] = a_ij (dA_ij - Σ_j a_ij dA_ij), dA_ij = dout_i · v_j
                let mut dz = vec![0.0; l * l];
                for i in 0..l {
                    let w = if *causal { i + 1 } else { l };
                    let gi = &g[i * dv..(i + 1) * dv];
                    let a = &probs[i * l..i * l + w];
                    let dzi = &mut dz[i * l..i * l + w];
                    let mut s = 0.0;
                    for j in 0..w {
                        let da = dot(gi, &vv[j * dv..(j + 1) * dv]);
                        dzi[j] = da;
                        s += a[j] * da;
                    }
                    for j in 0..w {
                        dzi[j] = a[j] * (dzi[j] - s);
                    }
                }
                if let Some(gv) = acc(&self.nodes, grads, *v) {
                    for i in 0..l {
                        let w = if *causal { i + 1 } else { l };
                        let gi = &g[i * dv..(i + 1) * dv];
                        for j in 0..w {
                            axpy(probs[i * l + j], gi, &mut gv[j * dv..(j + 1) * dv]);
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = acc(&self.nodes, grads, *b) {
                        axpy(*scale, &dz, gb);
                    }
                }
                if let Some(gq) = acc(&self.nodes, grads, *q) {
                    for i in 0..l {
                        let w = if *causal { i + 1 } else { l };
                        let gqi = &mut gq[i * dh..(i + 1) * dh];
                        for j in 0..w {
                            axpy(scale * dz[i * l + j], &kv[j * dh..(j + 1) * dh], gqi);
                        }
                    }
                }
                if let Some(gk) = acc(&self.nodes, grads, *k) {
                    for i in 0..l {
                        let w = if *causal { i + 1 } else { l };
                        let qi = &qv[i * dh..(i + 1) * dh];
                        for j in 0..w {
                            axpy(scale * dz[i * l + j], qi, &mut gk[j * dh..(j + 1) * dh]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    ga.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::Bce { probs, coef } => {
                if let Some(gp) = acc(&self.nodes, grads, *probs) {
                    axpy(g[0], coef, gp);
                }
            }
        }
        Ok(())
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param => "parameter",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Transpose(..) => "transpose",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Sigmoid(..) => "sigmoid",
        Op::Gelu(..) => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::Dropout { .. } => "dropout",
        Op::Gather(..) => "gather",
        Op::Attention { .. } => "attention",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Bce { .. } => "bce_loss",
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collects gradients of every parameter bound on `graph`; unbound or
    /// unreached parameters get zeros.
    pub fn param_grads(&self, graph: &Graph, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros(store);
        for (&id, &v) in &graph.bound {
            if let Some(g) = self.get(v) {
                out.0[id.0].copy_from_slice(g);
            }
        }
        out
    }
}
