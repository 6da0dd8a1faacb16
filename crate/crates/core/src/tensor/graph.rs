use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttnGrads, AttnLayout};
use super::kernels::{gemm_nn, gemm_nt, gemm_tn, log_sum_exp, softmax_in_place};
use super::{Real, Tensor};
use crate::error::{Result, SlmError};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttnLayout>,
        probs: Vec<T>,
        keep: Option<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations in creation order, which is a topological order.
///
/// A graph is built for one forward pass, differentiated once with
/// [`Graph::backward`] and then dropped.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, detail: String) -> SlmError {
    SlmError::Dimension { op, detail }
}

impl<T: Real> Graph<T> {
    /// A graph with dropout disabled.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            dropout_rng: None,
        }
    }

    /// A graph in training mode: dropout ops draw masks from a stream seeded
    /// with `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(SlmError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            op => op_inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`. `None` if
    /// no gradient reached the node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Attention probabilities recorded by an attention node, laid out per
    /// segment, then per head, as `q_len x k_len` blocks.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(dim_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("[{m},{k}] x [{k2},{n}] inner dimensions differ"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err(
                "matmul_nt",
                format!("[{m},{k}] x [{n},{k2}]^T inner dimensions differ"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), "matmul_nt")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape(), data)?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    /// Adds a `[cols]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(bias).numel() != cols {
            return Err(dim_err(
                "add_bias",
                format!("bias {:?} vs rows of width {cols}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::AddBias(x, bias), "add_bias")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * s).collect())?;
        self.push(t, Op::Scale(x, s), "scale")
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| gelu(v)).collect())?;
        self.push(t, Op::Gelu(x), "gelu")
    }

    /// Per-row normalisation over the last dimension followed by the affine
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(dim_err("layer_norm", format!("affine params must have {d} entries")));
        }
        let eps = T::of(eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let denom = T::of(d as f64);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / denom;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / denom;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(xv.cols()) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        let (rows, _) = self.matrix(logits, "cross_entropy")?;
        if rows != 1 {
            return Err(dim_err(
                "cross_entropy",
                format!("expected one logit vector, got shape {:?}", self.shape(logits)),
            ));
        }
        if target >= n {
            return Err(SlmError::Index {
                op: "cross_entropy",
                index: target,
                bound: n,
            });
        }
        self.cross_entropy_rows(logits, &[target])
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, n) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(dim_err(
                "cross_entropy_rows",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(SlmError::Index {
                    op: "cross_entropy_rows",
                    index: t,
                    bound: n,
                });
            }
            let row = lv.row(r);
            total += log_sum_exp(row) - row[t];
            softmax_in_place(&mut probs[r * n..(r + 1) * n]);
        }
        let loss = total / T::of(rows as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Row gather: `out[i] = x[index[i]]`. Used for embedding lookups and
    /// row slicing.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if index.is_empty() {
            return Err(dim_err("gather_rows", "empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(SlmError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(&[index.len(), d], data)?;
        self.push(
            t,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Contiguous rows `start..start+len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &index)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err("concat_cols", "no inputs".into()))?;
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(dim_err("concat_cols", "row counts differ".into()));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(&[rows, width], data)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Inverted dropout. The identity when the graph is not training or
    /// `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if p <= 0.0 || self.dropout_rng.is_none() {
            return Ok(x);
        }
        let scale = T::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let rng = self.dropout_rng.as_mut().expect("training graph");
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::Dropout { x, mask }, "dropout")
    }

    /// Multi-head scaled dot-product attention. `q` holds query rows, `k` and
    /// `v` key/value rows; `layout` says which rows belong together.
    /// `attn_dropout` applies to the attention probabilities in training mode.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, attn_dropout: f64) -> Result<Var> {
        let (qr, d) = self.matrix(q, "attention")?;
        let (kr, dk) = self.matrix(k, "attention")?;
        if self.shape(k) != self.shape(v) || dk != d {
            return Err(dim_err("attention", "q/k/v widths or k/v shapes differ".into()));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(dim_err(
                "attention",
                format!("width {d} not divisible by {} heads", layout.heads),
            ));
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > qr || s.k_start + s.k_len > kr || s.k_valid > s.k_len {
                return Err(dim_err("attention", format!("segment {s:?} out of bounds")));
            }
            if s.causal && s.q_len != s.k_len {
                return Err(dim_err("attention", "causal segment must be square".into()));
            }
            if s.k_valid == 0 && s.q_len > 0 {
                return Err(dim_err("attention", "segment without valid keys".into()));
            }
        }
        let fwd = {
            let p = attn_dropout;
            let training = p > 0.0 && self.dropout_rng.is_some();
            let scale = T::of(1.0 / (1.0 - p.min(0.999_999)));
            let mut rng = self.dropout_rng.take();
            let mut draw = || {
                if rng.as_mut().expect("training graph").gen::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            };
            let keep: Option<&mut dyn FnMut() -> T> = if training { Some(&mut draw) } else { None };
            let f = attention::forward(
                self.value(q).data(),
                self.value(k).data(),
                self.value(v).data(),
                d,
                &layout,
                keep,
            );
            self.dropout_rng = rng;
            f
        };
        let t = Tensor::new(&[qr, d], fwd.out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs: fwd.probs,
                keep: fwd.keep,
            },
            "attention",
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every node that
    /// depends on a parameter are accumulated; previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(SlmError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

/// `tanh` through one `exp`; saturates cleanly at both ends.
fn tanh<T: Real>(u: T) -> T {
    T::one() - T::of(2.0) / (T::one() + (u + u).exp())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let th = tanh(c * (x + a * x * x * x));
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(x, _)
        | Op::Gelu(x)
        | Op::SoftmaxRows(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Dropout { x, .. }
        | Op::Gather { x, .. } => vec![*x],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::ConcatCols(parts) => parts.clone(),
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

/// Gradient buffer for `v`, or `None` when `v` does not need one.
fn acc<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    let dims = |v: Var| {
        let t = &nodes[v.0].value;
        (t.rows(), t.cols())
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims(*a);
            let n = dims(*b).1;
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm_nt(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm_tn(val(*a).data(), g, gb, m, k, n);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = dims(*a);
            let n = dims(*b).0;
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm_nn(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm_tn(g, val(*a).data(), gb, m, n, k);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(&bv) {
                    *d += s * o;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(&av) {
                    *d += s * o;
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let d = gb.len();
                for row in g.chunks(d) {
                    add_into(gb, row);
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d += v * *s;
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, &v), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                    *d += v * gelu_grad(xi);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = val(*x).cols();
            let gam = val(*gamma).data();
            if let Some(gg) = acc(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *beta) {
                for grow in g.chunks(d) {
                    add_into(gb, grow);
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv_d = T::one() / T::of(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        dxhat[j] = grow[j] * gam[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hrow[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += rstd[r] * (dxhat[j] - m1 - hrow[j] * m2);
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value;
            let n = y.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, (grow, yrow)) in g.chunks(n).zip(y.data().chunks(n)).enumerate() {
                    let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let n = val(*logits).cols();
            let scale = g[0] / T::of(targets.len() as f64);
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * n + j] += scale * (probs[r * n + j] - onehot);
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            let d = val(*x).cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &src) in index.iter().enumerate() {
                    add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let width = node.value.cols();
            let mut off = 0;
            for &p in parts {
                let c = val(p).cols();
                if let Some(gp) = acc(nodes, grads, p) {
                    for (r, grow) in g.chunks(width).enumerate() {
                        add_into(&mut gp[r * c..(r + 1) * c], &grow[off..off + c]);
                    }
                }
                off += c;
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(x) => {
            let n = T::of(val(*x).numel() as f64);
            if let Some(gx) = acc(nodes, grads, *x) {
                for d in gx.iter_mut() {
                    *d += g[0] / n;
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, &v), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += v * m;
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
            keep,
        } => {
            let d = val(*q).cols();
            let want = |x: Var| nodes[x.0].requires_grad;
            let mut dq = want(*q).then(|| vec![T::zero(); val(*q).numel()]);
            let mut dk = want(*k).then(|| vec![T::zero(); val(*k).numel()]);
            let mut dv = want(*v).then(|| vec![T::zero(); val(*v).numel()]);
            attention::backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                d,
                layout,
                probs,
                keep.as_deref(),
                g,
                AttnGrads {
                    dq: dq.as_deref_mut(),
                    dk: dk.as_deref_mut(),
                    dv: dv.as_deref_mut(),
                },
            );
            for (x, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let (Some(b), Some(gx)) = (buf, acc(nodes, grads, x)) {
                    add_into(gx, &b);
                }
            }
        }
    }
}
