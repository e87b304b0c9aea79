//! Multi-head scaled dot-product attention kernels shared by the taped
//! forward pass and the incremental decoder.
//!
//! Visibility is positional: key `j` is visible to query `i` iff
//! `k_pos[j] <= q_pos[i]`. Key positions must be ascending, so the visible
//! keys of every query form a prefix.
//!
//! An optional per-key gate `g` multiplies the unnormalized weights:
//! `P_ij = w_ij e^{s_ij} / sum_k w_ik e^{s_ik}` with `w_ij = g_j` for
//! `j != i` and `w_ii = 1`. With hard 0/1 gates this is exactly softmax over
//! the surviving keys, and the gate stays differentiable.

use super::Real;

pub(crate) struct AttnLayout<'a> {
    pub nq: usize,
    pub nk: usize,
    pub d: usize,
    pub heads: usize,
    pub q_pos: &'a [usize],
    pub k_pos: &'a [usize],
}

impl AttnLayout<'_> {
    #[inline]
    fn visible(&self, i: usize) -> usize {
        self.k_pos.partition_point(|&p| p <= self.q_pos[i])
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn weight<T: Real>(gate: Option<&[T]>, i: usize, j: usize) -> T {
    match gate {
        Some(g) if i != j => g[j],
        _ => T::one(),
    }
}

/// Returns the output (`nq x d`) and, when `save` is set, the ungated
/// normalized weights `E` laid out `heads x nq x nk` (zero where invisible),
/// so that `P = w * E`.
pub(crate) fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    lay: &AttnLayout<'_>,
    gate: Option<&[T]>,
    save: bool,
) -> (Vec<T>, Vec<T>) {
    let (nq, nk, d, heads) = (lay.nq, lay.nk, lay.d, lay.heads);
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut out = vec![T::zero(); nq * d];
    let mut saved = if save {
        vec![T::zero(); heads * nq * nk]
    } else {
        Vec::new()
    };
    let mut scores = vec![T::zero(); nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let vis = lay.visible(i);
            if vis == 0 {
                continue;
            }
            let qi = &q[i * d + off..i * d + off + dh];
            let mut m = T::neg_infinity();
            let mut m_any = T::neg_infinity();
            for j in 0..vis {
                let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                scores[j] = s;
                m_any = m_any.max(s);
                if weight(gate, i, j) > T::zero() {
                    m = m.max(s);
                }
            }
            if m == T::neg_infinity() {
                m = m_any;
            }
            let mut z = T::zero();
            for j in 0..vis {
                let e = (scores[j] - m).exp();
                scores[j] = e;
                z += weight(gate, i, j) * e;
            }
            if z <= T::zero() {
                continue;
            }
            let inv = T::one() / z;
            let oi = &mut out[i * d + off..i * d + off + dh];
            for j in 0..vis {
                let e = scores[j] * inv;
                if save {
                    saved[(h * nq + i) * nk + j] = e;
                }
                let p = weight(gate, i, j) * e;
                if p != T::zero() {
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, saved)
}

pub(crate) struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dgate: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    lay: &AttnLayout<'_>,
    gate: Option<&[T]>,
    saved: &[T],
    dout: &[T],
) -> AttnGrads<T> {
    let (nq, nk, d, heads) = (lay.nq, lay.nk, lay.d, lay.heads);
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let mut dgate = gate.map(|_| vec![T::zero(); nk]);
    let mut dp = vec![T::zero(); nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let vis = lay.visible(i);
            let doi = &dout[i * d + off..i * d + off + dh];
            let row = &saved[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let mut rho = T::zero();
            for j in 0..vis {
                let g = dot(doi, &v[j * d + off..j * d + off + dh]);
                dp[j] = g;
                rho += weight(gate, i, j) * row[j] * g;
            }
            for j in 0..vis {
                let e = row[j];
                if e == T::zero() {
                    continue;
                }
                let p = weight(gate, i, j) * e;
                let centered = dp[j] - rho;
                if p != T::zero() {
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (a, &b) in dvj.iter_mut().zip(doi) {
                        *a += p * b;
                    }
                    let ds = p * centered * scale;
                    for t in 0..dh {
                        dq[i * d + off + t] += ds * k[j * d + off + t];
                        dk[j * d + off + t] += ds * q[i * d + off + t];
                    }
                }
                if let Some(dg) = dgate.as_mut() {
                    if j != i {
                        dg[j] += e * centered;
                    }
                }
            }
        }
    }
    AttnGrads { dq, dk, dv, dgate }
}
