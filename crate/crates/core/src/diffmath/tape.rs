//! Explicit reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so every node's parents have
//! smaller indices and a reverse sweep visits consumers before producers.
//! Nodes whose inputs carry no gradient are stored as constants and keep no
//! backward state.

use super::attention::{self, AttnLayout};
use super::tensor::check_matmul;
use super::{MathError, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// One term of a pairwise logistic ranking loss:
/// `weight * log(1 + exp(-(s_i - s_j) * sign))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankPair {
    pub i: usize,
    pub j: usize,
    pub sign: f64,
    pub weight: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let (k, a) = (T::c(GELU_K), T::c(GELU_A));
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

/// Derivative of the tanh approximation (not of the exact erf form).
pub fn gelu_grad<T: Real>(x: T) -> T {
    let (k, a) = (T::c(GELU_K), T::c(GELU_A));
    let half = T::c(0.5);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * a * x * x)
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

enum Op<T> {
    Leaf,
    Watch(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Square(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    Column {
        x: usize,
        col: usize,
    },
    Sum(usize),
    WeightedSum {
        x: usize,
        weights: Vec<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        gate: Option<usize>,
        heads: usize,
        q_pos: Vec<usize>,
        k_pos: Vec<usize>,
        saved: Vec<T>,
    },
    NllSum {
        logits: usize,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    StraightThrough {
        logits: usize,
        soft: Vec<T>,
        forced: Vec<bool>,
        tau: T,
    },
    PairwiseRank {
        scores: usize,
        pairs: Vec<RankPair>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of primitive applications for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; zeros when the node was never reached.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    /// Resets every accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Identity that always records a gradient, even when its input is a
    /// constant. Used to read `dT/dx` at intermediate activations.
    pub fn watch(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Watch(x.0), true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), MathError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(MathError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let (av, bv) = (self.value(a), self.value(b));
        check_matmul(av.shape(), bv.shape())?;
        let out = av.matmul(bv)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, MathError> {
        self.same_shape(a, b, what)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    /// `x[i, :] + b` for every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, MathError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rank() != 1 || bv.len() != xv.cols() {
            return Err(MathError::Shape(format!(
                "add_row: bias {:?} vs input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        let rg = self.rg(x.0) || self.rg(b.0);
        Ok(self.push(out, Op::AddRow(x.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x.0);
        self.push(out, Op::Scale(x.0, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x.0);
        self.push(out, Op::AddScalar(x.0), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x.0);
        self.push(out, Op::Square(x.0), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x.0);
        self.push(out, Op::Gelu(x.0), rg)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let rg = self.rg(x.0);
        self.push(out, Op::SoftmaxRows(x.0), rg)
    }

    /// Layer normalization over the last axis with `LAYER_NORM_EPS` added to
    /// the variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, MathError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(MathError::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs input {:?}",
                gv.shape(),
                bv.shape(),
                xv.shape()
            )));
        }
        let rows = xv.rows();
        let eps = T::c(LAYER_NORM_EPS);
        let inv_c = T::one() / T::c(c as f64);
        let mut out = xv.clone();
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                o[j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `ids` (embedding lookup, row gather).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, MathError> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(MathError::Shape(format!("gather_rows on {:?}", tv.shape())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.shape()[0]) {
            return Err(MathError::Index(format!(
                "row {bad} out of range for table {:?}",
                tv.shape()
            )));
        }
        let out = tv.select_rows(ids);
        let rg = self.rg(table.0);
        Ok(self.push(
            out,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, MathError> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| MathError::Shape("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != cols {
                return Err(MathError::Shape(format!(
                    "concat_rows: part {:?} vs {cols} columns",
                    pv.shape()
                )));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn column(&mut self, x: Var, col: usize) -> Result<Var, MathError> {
        let xv = self.value(x);
        if xv.rank() != 2 || col >= xv.cols() {
            return Err(MathError::Shape(format!("column {col} of {:?}", xv.shape())));
        }
        let out = Tensor::vector((0..xv.rows()).map(|r| xv.at(r, col)).collect());
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::Column { x: x.0, col }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    /// `sum_i w_i x_i` over a flattened tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var, MathError> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(MathError::Shape(format!(
                "weighted_sum: {} weights for {:?}",
                weights.len(),
                xv.shape()
            )));
        }
        let s = xv.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum::<T>();
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x: x.0, weights }, rg))
    }

    /// Multi-head attention of `q` (`nq x d`) over `k`, `v` (`nk x d`). See
    /// [`attention`](super::attention) for visibility and gating rules.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_pos: &[usize],
        k_pos: &[usize],
        gate: Option<Var>,
    ) -> Result<Var, MathError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (nq, nk) = (qv.rows(), kv.rows());
        if kv.cols() != d || vv.cols() != d || vv.rows() != nk || heads == 0 || d % heads != 0 {
            return Err(MathError::Shape(format!(
                "attention: q {:?} k {:?} v {:?} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if q_pos.len() != nq || k_pos.len() != nk {
            return Err(MathError::Shape("attention: position lists misaligned".into()));
        }
        if k_pos.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MathError::Shape("attention: key positions must ascend".into()));
        }
        let gate_vals = match gate {
            Some(g) => {
                let gv = self.value(g);
                if gv.len() != nk || nq != nk || q_pos != k_pos {
                    return Err(MathError::Shape(format!(
                        "attention: gate {:?} needs self-attention over {nk} keys",
                        gv.shape()
                    )));
                }
                Some(gv.data().to_vec())
            }
            None => None,
        };
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0) || gate.is_some_and(|g| self.rg(g.0));
        let lay = AttnLayout {
            nq,
            nk,
            d,
            heads,
            q_pos,
            k_pos,
        };
        let (out, saved) = attention::forward(qv.data(), kv.data(), vv.data(), &lay, gate_vals.as_deref(), rg);
        let out = Tensor::matrix(nq, d, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                gate: gate.map(|g| g.0),
                heads,
                q_pos: q_pos.to_vec(),
                k_pos: k_pos.to_vec(),
                saved,
            },
            rg,
        ))
    }

    /// `sum_i w_i * (-log softmax(logits_i)[labels_i])`.
    pub fn nll_sum(&mut self, logits: Var, labels: &[usize], weights: Vec<T>) -> Result<Var, MathError> {
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if lv.rank() != 2 || labels.len() != n || weights.len() != n {
            return Err(MathError::Shape(format!(
                "nll_sum: logits {:?}, {} labels, {} weights",
                lv.shape(),
                labels.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= vocab) {
            return Err(MathError::Index(format!("label {bad} outside vocabulary {vocab}")));
        }
        let rg = self.rg(logits.0);
        let mut probs = if rg { vec![T::zero(); n * vocab] } else { Vec::new() };
        let mut total = T::zero();
        for i in 0..n {
            let row = lv.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&v| (v - m).exp()).sum::<T>();
            let lse = m + z.ln();
            if weights[i] != T::zero() {
                total += weights[i] * (lse - row[labels[i]]);
            }
            if rg {
                for (p, &v) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                    *p = (v - lse).exp();
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::NllSum {
                logits: logits.0,
                labels: labels.to_vec(),
                weights,
                probs,
            },
            rg,
        ))
    }

    /// Straight-through Gumbel-Softmax keep decision over `N x 2`
    /// (keep, drop) logits. Forward value is the hard decision (1 = keep);
    /// the gradient is that of the soft keep component
    /// `softmax((logits + noise) / tau)[0]`. Forced entries are 1 with no
    /// gradient.
    pub fn straight_through_keep(
        &mut self,
        logits: Var,
        noise: &[T],
        tau: T,
        forced: &[bool],
    ) -> Result<Var, MathError> {
        let lv = self.value(logits);
        let n = lv.rows();
        if lv.rank() != 2 || lv.cols() != 2 || noise.len() != 2 * n || forced.len() != n {
            return Err(MathError::Shape(format!(
                "straight_through_keep: logits {:?}, noise {}, forced {}",
                lv.shape(),
                noise.len(),
                forced.len()
            )));
        }
        let mut soft = vec![T::zero(); n];
        let mut hard = vec![T::zero(); n];
        for i in 0..n {
            let a = (lv.at(i, 0) + noise[2 * i]) / tau;
            let b = (lv.at(i, 1) + noise[2 * i + 1]) / tau;
            soft[i] = T::c(sigmoid((a - b).f64()));
            hard[i] = if forced[i] || a >= b { T::one() } else { T::zero() };
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::vector(hard),
            Op::StraightThrough {
                logits: logits.0,
                soft,
                forced: forced.to_vec(),
                tau,
            },
            rg,
        ))
    }

    /// `sum_pairs weight * log(1 + exp(-(s_i - s_j) * sign))` over a score
    /// vector.
    pub fn pairwise_rank(&mut self, scores: Var, pairs: Vec<RankPair>) -> Result<Var, MathError> {
        let sv = self.value(scores);
        let n = sv.len();
        if pairs.iter().any(|p| p.i >= n || p.j >= n) {
            return Err(MathError::Index(format!("rank pair outside {n} scores")));
        }
        let s = sv.data();
        let total: f64 = pairs
            .iter()
            .map(|p| p.weight * softplus(-(s[p.i].f64() - s[p.j].f64()) * p.sign))
            .sum();
        let rg = self.rg(scores.0);
        Ok(self.push(
            Tensor::scalar(T::c(total)),
            Op::PairwiseRank {
                scores: scores.0,
                pairs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a rank-0 node. Gradients are added to any already
    /// accumulated on the tape.
    pub fn backward(&mut self, root: Var) -> Result<(), MathError> {
        let rv = self.value(root);
        if rv.rank() != 0 {
            return Err(MathError::NotScalar(rv.shape().to_vec()));
        }
        if !self.rg(root.0) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            match &mut self.nodes[idx].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| &nodes[i].value;
        let mut send = |p: usize, t: Tensor<T>| {
            if !nodes[p].requires_grad {
                return;
            }
            match &mut grads[p] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Watch(x) => send(*x, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if nodes[*a].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gd, false, bv.data(), true, T::zero(), &mut da);
                    send(*a, Tensor::new(av.shape(), da).unwrap());
                }
                if nodes[*b].requires_grad {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av.data(), true, gd, false, T::zero(), &mut db);
                    send(*b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if nodes[*a].requires_grad {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    send(*a, Tensor::new(av.shape(), d).unwrap());
                }
                if nodes[*b].requires_grad {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    send(*b, Tensor::new(bv.shape(), d).unwrap());
                }
            }
            Op::AddRow(x, b) => {
                send(*x, g.clone());
                if nodes[*b].requires_grad {
                    let c = val(*b).len();
                    let mut db = vec![T::zero(); c];
                    for (i, &v) in gd.iter().enumerate() {
                        db[i % c] += v;
                    }
                    send(*b, Tensor::vector(db));
                }
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * *c)),
            Op::AddScalar(x) => send(*x, g.clone()),
            Op::Square(x) => {
                let xv = val(*x);
                let d = gd.iter().zip(xv.data()).map(|(&a, &b)| T::c(2.0) * a * b).collect();
                send(*x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let d = gd.iter().zip(xv.data()).map(|(&a, &b)| a * gelu_grad(b)).collect();
                send(*x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let y = &nodes[idx].value;
                let mut d = y.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dotp = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for (o, (&a, &b)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = a * (b - dotp);
                    }
                }
                send(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let c = gv.len();
                let rows = rstd.len();
                let inv_c = T::one() / T::c(c as f64);
                if nodes[*x].requires_grad {
                    let mut dx = vec![T::zero(); rows * c];
                    for r in 0..rows {
                        let gr = &gd[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv.data()[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let dh = gr[j] * gv.data()[j];
                            dx[r * c + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    send(*x, Tensor::new(val(*x).shape(), dx).unwrap());
                }
                if nodes[*gain].requires_grad || nodes[*bias].requires_grad {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += gd[r * c + j] * xhat[r * c + j];
                            db[j] += gd[r * c + j];
                        }
                    }
                    send(*gain, Tensor::vector(dg));
                    send(*bias, Tensor::vector(db));
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = val(*table);
                let c = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = dt.row_mut(id);
                    for (o, &v) in dst.iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
                send(*table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let n = pv.len();
                    send(p, Tensor::new(pv.shape(), gd[off..off + n].to_vec()).unwrap());
                    off += n;
                }
            }
            Op::Column { x, col } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                for (r, &v) in gd.iter().enumerate() {
                    dx.data_mut()[r * c + col] = v;
                }
                send(*x, dx);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                send(*x, Tensor::filled(xv.shape(), gd[0]));
            }
            Op::WeightedSum { x, weights } => {
                let xv = val(*x);
                let d = weights.iter().map(|&w| w * gd[0]).collect();
                send(*x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Attention {
                q,
                k,
                v,
                gate,
                heads,
                q_pos,
                k_pos,
                saved,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let lay = AttnLayout {
                    nq: qv.rows(),
                    nk: kv.rows(),
                    d: qv.cols(),
                    heads: *heads,
                    q_pos,
                    k_pos,
                };
                let gate_vals = gate.map(|gi| nodes[gi].value.data());
                let grads = attention::backward(qv.data(), kv.data(), vv.data(), &lay, gate_vals, saved, gd);
                send(*q, Tensor::new(qv.shape(), grads.dq).unwrap());
                send(*k, Tensor::new(kv.shape(), grads.dk).unwrap());
                send(*v, Tensor::new(vv.shape(), grads.dv).unwrap());
                if let (Some(gi), Some(dg)) = (gate, grads.dgate) {
                    send(*gi, Tensor::vector(dg));
                }
            }
            Op::NllSum {
                logits,
                labels,
                weights,
                probs,
            } => {
                let lv = val(*logits);
                let vocab = lv.cols();
                let mut dl = vec![T::zero(); lv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let w = weights[i] * gd[0];
                    if w == T::zero() {
                        continue;
                    }
                    let row = &mut dl[i * vocab..(i + 1) * vocab];
                    for (o, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *o = w * p;
                    }
                    row[y] -= w;
                }
                send(*logits, Tensor::new(lv.shape(), dl).unwrap());
            }
            Op::StraightThrough {
                logits,
                soft,
                forced,
                tau,
            } => {
                let lv = val(*logits);
                let mut dl = vec![T::zero(); lv.len()];
                for i in 0..soft.len() {
                    if forced[i] {
                        continue;
                    }
                    let y = soft[i];
                    let d = gd[i] * y * (T::one() - y) / *tau;
                    dl[2 * i] = d;
                    dl[2 * i + 1] = -d;
                }
                send(*logits, Tensor::new(lv.shape(), dl).unwrap());
            }
            Op::PairwiseRank { scores, pairs } => {
                let sv = val(*scores);
                let s = sv.data();
                let mut ds = vec![0.0f64; sv.len()];
                for p in pairs {
                    let z = (s[p.i].f64() - s[p.j].f64()) * p.sign;
                    let c = p.weight * sigmoid(-z) * p.sign;
                    ds[p.i] -= c;
                    ds[p.j] += c;
                }
                let g0 = gd[0].f64();
                let d = ds.into_iter().map(|v| T::c(v * g0)).collect();
                send(*scores, Tensor::new(sv.shape(), d).unwrap());
            }
        }
    }
}
