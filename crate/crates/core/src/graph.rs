//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes a new
//! node whose inputs already exist, so node order is a topological order and
//! [`Graph::backward`] simply walks the list in reverse.
//!
//! Gradients accumulate on leaves: calling `backward` twice without
//! [`Graph::zero_grad`] adds the second pass onto the first. Intermediate
//! gradients are cleared at the start of every pass.
//!
//! A graph is owned by one thread for the duration of a forward/backward
//! pass; independent graphs may live on different threads.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, dims2, for_each_lane, gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Third field: the right operand is stored transposed.
    BatchMatMul(Var, Var, bool),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    ScaleBy(Var, Var),
    ScaleRows(Var, Var),
    /// Saves the inner `tanh` of every element.
    Gelu(Var, Vec<f32>),
    Exp(Var),
    Log(Var),
    ClampMax(Var, f32),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    GatherElems(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    LogSumExp(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    L2Normalize { x: Var, norms: Vec<f32> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | BatchMatMul(a, b, _) | Add(a, b) | AddBroadcast(a, b) | Sub(a, b)
            | Mul(a, b) | Div(a, b) | ScaleBy(a, b) | ScaleRows(a, b) => vec![*a, *b],
            Scale(x, _) | Gelu(x, _) | Exp(x) | Log(x) | ClampMax(x, _) | Reshape(x)
            | Permute(x, _) | GatherRows(x, _) | ScatterAddRows(x, _) | GatherElems(x, _)
            | Sum(x) | Mean(x) | SumAxis(x, _) | LogSumExp(x, _) | Softmax(x, _)
            | LogSoftmax(x, _) => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            L2Normalize { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Vec<f32>>,
}

/// Recorded computation with reverse-mode gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// `exp` by range reduction to `2^n · e^r`, `|r| ≤ ln2/2`, and a degree-6
/// polynomial; relative error below 2e-7 on `[-87, 87]`. Branch-free so the
/// GeLU loop vectorizes.
fn exp_poly(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 · 2^23
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.clamp(-87.0, 87.0);
    let z = x * std::f32::consts::LOG2_E + ROUND;
    let n = z - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let k = z.to_bits() as i32 - ROUND.to_bits() as i32;
    p * f32::from_bits(((k + 127) << 23) as u32)
}

/// `tanh` through a single `exp`; saturates cleanly at ±1.
fn tanh(u: f32) -> f32 {
    1.0 - 2.0 / (exp_poly(2.0 * u) + 1.0)
}

/// Derivative of GeLU at `x` given its inner `tanh` value `t`.
fn gelu_grad(x: f32, t: f32) -> f32 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// For each output flat index of `permute(shape, perm)`, the source flat index.
fn permute_sources(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Permutation as block copies: source offsets of consecutive output runs,
/// each `run` elements long. Trailing axes left in place form one run.
fn permute_runs(shape: &[usize], perm: &[usize]) -> (Vec<usize>, usize) {
    let mut keep = shape.len();
    while keep > 0 && perm[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let run: usize = shape[keep..].iter().product();
    let starts = permute_sources(&shape[..keep], &perm[..keep]).into_iter().map(|s| s * run).collect();
    (starts, run)
}

fn lse_lane(x: &[f32], lane: impl Iterator<Item = usize> + Clone) -> f32 {
    let max = lane.clone().map(|i| x[i]).fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return max;
    }
    let s: f32 = lane.map(|i| (x[i] - max).exp()).sum();
    max + s.ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, is_leaf: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, is_leaf: true, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient shaped like the node value; zeros if nothing flowed in.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Fails with a numeric error naming `context` if `v` holds NaN/Inf.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {context}")))
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op)
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Batched product `[b×m×k] · [b×k×n] → [b×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batched(a, b, false)
    }

    /// Batched product with the right operand transposed:
    /// `[b×m×k] · [b×n×k]ᵀ → [b×m×n]`.
    pub fn bmm_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batched(a, b, true)
    }

    fn batched(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bt, m, k, n) = match (sa.as_slice(), sb.as_slice(), b_t) {
            ([b1, m, k], [b2, k2, n], false) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            ([b1, m, k], [b2, n, k2], true) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::Shape(format!("bmm: incompatible shapes {sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; bt * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..bt {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    b_t,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let t = Tensor::new(vec![bt, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul(a, b, b_t)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    /// `x[..., n] + bias[n]`, broadcasting the bias over all leading axes.
    pub fn add_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "add_broadcast: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(self.push(t, Op::AddBroadcast(x, bias)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Pointwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape(format!("scale_by: scale has shape {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        Ok(self.unary(x, Op::ScaleBy(x, s), |v| v * c))
    }

    /// Scales row `r` of a 2-D `x` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x))?;
        if self.shape(s) != [r] {
            return Err(Error::Shape(format!(
                "scale_rows: scales {:?} for matrix {:?}",
                self.shape(s),
                self.shape(x)
            )));
        }
        let sv = self.value(s).data().to_vec();
        let mut t = self.value(x).clone();
        for (row, k) in t.data_mut().chunks_mut(c).zip(&sv) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(t, Op::ScaleRows(x, s)))
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanhs: Vec<f32> = xv.data().iter().map(|&v| tanh(GELU_C * (v + GELU_A * v * v * v))).collect();
        let data = xv.data().iter().zip(&tanhs).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(x, tanhs))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f32::ln)
    }

    /// `min(x, c)`; gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::ClampMax(x, c), |v| v.min(c))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute: {perm:?} is not a permutation of {shape:?}")));
        }
        let (starts, run) = permute_runs(&shape, perm);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len());
        for &s in &starts {
            data.extend_from_slice(&xd[s..s + run]);
        }
        let t = Tensor::new(perm.iter().map(|&p| shape[p]).collect(), data)?;
        Ok(self.push(t, Op::Permute(x, perm.to_vec())))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        dims2(self.value(x))?;
        self.permute(x, &[1, 0])
    }

    /// Selects rows (slices along axis 0) by index.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rows = v.shape().first().copied().unwrap_or(1);
        let width = v.numel() / rows;
        if idx.is_empty() {
            return Err(Error::Index("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("gather_rows: index {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec())))
    }

    /// Adds row `i` of `x` into row `idx[i]` of a zero tensor with `out_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let v = self.value(x);
        let rows = v.shape().first().copied().unwrap_or(1);
        if idx.len() != rows {
            return Err(Error::Shape(format!(
                "scatter_add_rows: {} indices for {rows} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Index(format!("scatter_add_rows: index {bad} out of range for {out_rows} rows")));
        }
        let width = v.numel() / rows;
        let mut shape = v.shape().to_vec();
        shape[0] = out_rows;
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            for (src, &dst) in idx.iter().enumerate() {
                for j in 0..width {
                    od[dst * width + j] += v.data()[src * width + j];
                }
            }
        }
        Ok(self.push(out, Op::ScatterAddRows(x, idx.to_vec())))
    }

    /// Picks elements by flat index into a 1-D result.
    pub fn gather_elems(&mut self, x: Var, flat_idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if flat_idx.is_empty() {
            return Err(Error::Index("gather_elems: empty index list".into()));
        }
        if let Some(&bad) = flat_idx.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::Index(format!("gather_elems: index {bad} out of range for {} elements", v.numel())));
        }
        let data = flat_idx.iter().map(|&i| v.data()[i]).collect();
        let t = Tensor::new(vec![flat_idx.len()], data)?;
        Ok(self.push(t, Op::GatherElems(x, flat_idx.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f32>() / v.numel() as f32;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect()
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis)?;
        let mut out = Vec::with_capacity(outer * inner);
        for_each_lane(outer, n, inner, |lane| out.push(lane.map(|i| v.data()[i]).sum()));
        let t = Tensor::new(Self::reduced_shape(v.shape(), axis), out)?;
        Ok(self.push(t, Op::SumAxis(x, axis)))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).unwrap_or(&1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f32))
    }

    /// `log Σ exp` along `axis` (max-subtracted), removing it.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis)?;
        let mut out = Vec::with_capacity(outer * inner);
        for_each_lane(outer, n, inner, |lane| out.push(lse_lane(v.data(), lane)));
        let t = Tensor::new(Self::reduced_shape(v.shape(), axis), out)?;
        Ok(self.push(t, Op::LogSumExp(x, axis)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x).softmax(axis)?;
        Ok(self.push(t, Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis)?;
        let mut out = v.data().to_vec();
        for_each_lane(outer, n, inner, |lane| {
            let lse = lse_lane(v.data(), lane.clone());
            for i in lane {
                out[i] -= lse;
            }
        });
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(x, axis)))
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let v = self.value(x);
        let n = v.last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs normalized extent {n}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = v.rows();
        let mut xhat = vec![0.0; v.numel()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = v.row(r);
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim();
        let mut norms = Vec::with_capacity(v.rows());
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|a| a * a).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|a| *a /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::L2Normalize { x, norms })
    }

    /// Populates gradients of every node that depends on a trainable leaf.
    ///
    /// `loss` must hold exactly one element. Leaf gradients accumulate across
    /// calls; interior gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            if !n.is_leaf {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].is_leaf {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else { continue };
            self.backprop_node(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &[f32]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn backprop_node(&mut self, id: usize, g: &[f32]) {
        // Inputs always precede `id`, so split borrows around it.
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let out = node.value.data();
        let val = |v: Var| before[v.0].value.data();
        let mut contribs: Vec<(Var, Vec<f32>)> = Vec::new();
        let needs = |v: Var| before[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&before[a.0].value).expect("matmul lhs");
                let n = before[b.0].value.shape()[1];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut da, false);
                    contribs.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut db, false);
                    contribs.push((*b, db));
                }
            }
            Op::BatchMatMul(a, b, b_t) => {
                let sa = before[a.0].value.shape();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (gs, asz, bsz) = (m * n, m * k, k * n);
                if needs(*a) {
                    let mut da = vec![0.0; bt * asz];
                    for i in 0..bt {
                        let gi = &g[i * gs..(i + 1) * gs];
                        let bi = &val(*b)[i * bsz..(i + 1) * bsz];
                        gemm(m, n, k, gi, false, bi, !b_t, &mut da[i * asz..(i + 1) * asz], false);
                    }
                    contribs.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; bt * bsz];
                    for i in 0..bt {
                        let gi = &g[i * gs..(i + 1) * gs];
                        let ai = &val(*a)[i * asz..(i + 1) * asz];
                        let di = &mut db[i * bsz..(i + 1) * bsz];
                        if *b_t {
                            gemm(n, m, k, gi, true, ai, false, di, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, di, false);
                        }
                    }
                    contribs.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        contribs.push((*v, g.to_vec()));
                    }
                }
            }
            Op::AddBroadcast(x, bias) => {
                if needs(*x) {
                    contribs.push((*x, g.to_vec()));
                }
                if needs(*bias) {
                    let n = before[bias.0].value.numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    contribs.push((*bias, db));
                }
            }
            Op::Sub(a, b) => {
                contribs.push((*a, g.to_vec()));
                contribs.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    contribs.push((*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                }
                if needs(*b) {
                    contribs.push((*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if needs(*a) {
                    contribs.push((*a, g.iter().zip(bv).map(|(g, y)| g / y).collect()));
                }
                if needs(*b) {
                    let db = g.iter().zip(out).zip(bv).map(|((g, o), y)| -g * o / y).collect();
                    contribs.push((*b, db));
                }
            }
            Op::Scale(x, c) => contribs.push((*x, g.iter().map(|v| v * c).collect())),
            Op::ScaleBy(x, s) => {
                let c = val(*s)[0];
                if needs(*x) {
                    contribs.push((*x, g.iter().map(|v| v * c).collect()));
                }
                if needs(*s) {
                    let ds: f32 = g.iter().zip(val(*x)).map(|(g, x)| g * x).sum();
                    contribs.push((*s, vec![ds]));
                }
            }
            Op::ScaleRows(x, s) => {
                let sv = val(*s);
                let c = before[x.0].value.last_dim();
                if needs(*x) {
                    let mut dx = g.to_vec();
                    for (row, k) in dx.chunks_mut(c).zip(sv) {
                        row.iter_mut().for_each(|v| *v *= k);
                    }
                    contribs.push((*x, dx));
                }
                if needs(*s) {
                    let ds = g.chunks(c).zip(val(*x).chunks(c)).map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum()).collect();
                    contribs.push((*s, ds));
                }
            }
            Op::Gelu(x, tanhs) => {
                let dx = g.iter().zip(val(*x)).zip(tanhs).map(|((g, &x), &t)| g * gelu_grad(x, t)).collect();
                contribs.push((*x, dx));
            }
            Op::Exp(x) => contribs.push((*x, g.iter().zip(out).map(|(g, y)| g * y).collect())),
            Op::Log(x) => contribs.push((*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect())),
            Op::ClampMax(x, c) => {
                let dx = g.iter().zip(val(*x)).map(|(g, x)| if x <= c { *g } else { 0.0 }).collect();
                contribs.push((*x, dx));
            }
            Op::Reshape(x) => contribs.push((*x, g.to_vec())),
            Op::Permute(x, perm) => {
                let (starts, run) = permute_runs(before[x.0].value.shape(), perm);
                let mut dx = vec![0.0; g.len()];
                for (o, &s) in starts.iter().enumerate() {
                    dx[s..s + run].copy_from_slice(&g[o * run..(o + 1) * run]);
                }
                contribs.push((*x, dx));
            }
            Op::GatherRows(x, idx) => {
                let xv = &before[x.0].value;
                let width = xv.numel() / xv.shape()[0];
                let mut dx = vec![0.0; xv.numel()];
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..width {
                        dx[i * width + j] += g[o * width + j];
                    }
                }
                contribs.push((*x, dx));
            }
            Op::ScatterAddRows(x, idx) => {
                let xv = &before[x.0].value;
                let width = xv.numel() / xv.shape()[0];
                let mut dx = Vec::with_capacity(xv.numel());
                for &i in idx {
                    dx.extend_from_slice(&g[i * width..(i + 1) * width]);
                }
                contribs.push((*x, dx));
            }
            Op::GatherElems(x, idx) => {
                let mut dx = vec![0.0; before[x.0].value.numel()];
                for (o, &i) in idx.iter().enumerate() {
                    dx[i] += g[o];
                }
                contribs.push((*x, dx));
            }
            Op::Sum(x) => contribs.push((*x, vec![g[0]; before[x.0].value.numel()])),
            Op::Mean(x) => {
                let n = before[x.0].value.numel();
                contribs.push((*x, vec![g[0] / n as f32; n]));
            }
            Op::SumAxis(x, axis) => {
                let xv = &before[x.0].value;
                let (outer, n, inner) = axis_split(xv.shape(), *axis).expect("axis");
                let mut dx = vec![0.0; xv.numel()];
                let mut k = 0;
                for_each_lane(outer, n, inner, |lane| {
                    for i in lane {
                        dx[i] = g[k];
                    }
                    k += 1;
                });
                contribs.push((*x, dx));
            }
            Op::LogSumExp(x, axis) => {
                let xv = &before[x.0].value;
                let (outer, n, inner) = axis_split(xv.shape(), *axis).expect("axis");
                let mut dx = vec![0.0; xv.numel()];
                let mut k = 0;
                for_each_lane(outer, n, inner, |lane| {
                    for i in lane {
                        dx[i] = g[k] * (xv.data()[i] - out[k]).exp();
                    }
                    k += 1;
                });
                contribs.push((*x, dx));
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis).expect("axis");
                let mut dx = vec![0.0; out.len()];
                for_each_lane(outer, n, inner, |lane| {
                    let dot: f32 = lane.clone().map(|i| g[i] * out[i]).sum();
                    for i in lane {
                        dx[i] = out[i] * (g[i] - dot);
                    }
                });
                contribs.push((*x, dx));
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis).expect("axis");
                let mut dx = vec![0.0; out.len()];
                for_each_lane(outer, n, inner, |lane| {
                    let gs: f32 = lane.clone().map(|i| g[i]).sum();
                    for i in lane {
                        dx[i] = g[i] - out[i].exp() * gs;
                    }
                });
                contribs.push((*x, dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = node.value.last_dim();
                let gv = val(*gain);
                if needs(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    contribs.push((*gain, dg));
                }
                if needs(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    contribs.push((*bias, db));
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= n as f32;
                        m2 /= n as f32;
                        for j in 0..n {
                            dx[r * n + j] = rs * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                    contribs.push((*x, dx));
                }
            }
            Op::L2Normalize { x, norms } => {
                let n = node.value.last_dim();
                let mut dx = vec![0.0; g.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let yr = &out[r * n..(r + 1) * n];
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                contribs.push((*x, dx));
            }
        }

        for (v, d) in contribs {
            let node = &mut self.nodes[v.0];
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                None => node.grad = Some(d),
            }
        }
    }
}
