//! Fused multi-head scaled dot-product attention over packed variable-length
//! segments.
//!
//! Rows of several sequences are stored back to back. Each [`AttnSegment`]
//! names the query rows and key/value rows of one sequence; queries never see
//! keys of another segment, which is how a batch stays block-diagonal.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Keys at offsets `>= k_valid` (padding) receive zero weight.
    pub k_valid: usize,
    /// Query `i` may only attend to keys `0..=i`.
    pub causal: bool,
}

impl AttnSegment {
    /// Self-attention over `len` rows starting at `start`, all keys valid.
    pub fn full(start: usize, len: usize) -> Self {
        AttnSegment {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            k_valid: len,
            causal: false,
        }
    }

    pub fn causal(start: usize, len: usize) -> Self {
        AttnSegment {
            causal: true,
            ..AttnSegment::full(start, len)
        }
    }

    pub fn cross(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Self {
        AttnSegment {
            q_start,
            q_len,
            k_start,
            k_len,
            k_valid: k_len,
            causal: false,
        }
    }

    pub(crate) fn allowed(&self, i: usize) -> usize {
        if self.causal {
            (i + 1).min(self.k_valid)
        } else {
            self.k_valid
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub heads: usize,
    pub segments: Vec<AttnSegment>,
}

impl AttnLayout {
    pub(crate) fn prob_len(&self) -> usize {
        self.segments.iter().map(|s| s.q_len * s.k_len * self.heads).sum()
    }
}

/// Dot product with eight interleaved partial sums (vectorizes; the
/// summation order is fixed).
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let split = a.len() - a.len() % LANES;
    for (x, y) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in a[split..].iter().zip(&b[split..]) {
        total += x * y;
    }
    total
}

fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) struct AttnForward<T> {
    pub out: Vec<T>,
    pub probs: Vec<T>,
    pub keep: Option<Vec<T>>,
}

/// `keep` is consulted once per stored probability; it returns the dropout
/// multiplier (0 or 1/(1-p)).
pub(crate) fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dim: usize,
    layout: &AttnLayout,
    mut keep: Option<&mut dyn FnMut() -> T>,
) -> AttnForward<T> {
    let heads = layout.heads;
    let dh = dim / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let q_rows = q.len() / dim;
    let mut out = vec![T::zero(); q_rows * dim];
    let mut probs = vec![T::zero(); layout.prob_len()];
    let mut masks = keep.as_ref().map(|_| vec![T::zero(); probs.len()]);
    let mut off = 0;
    for seg in &layout.segments {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..seg.q_len {
                let qr = (seg.q_start + i) * dim;
                let qi = &q[qr + cols.start..qr + cols.end];
                let allowed = seg.allowed(i);
                let p = &mut probs[off + i * seg.k_len..off + i * seg.k_len + allowed];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kr = (seg.k_start + j) * dim;
                    *pj = scale * dot(qi, &k[kr + cols.start..kr + cols.end]);
                }
                super::kernels::softmax_in_place(p);
                let o = &mut out[qr + cols.start..qr + cols.end];
                for (j, &pj) in p.iter().enumerate() {
                    let w = match (&mut keep, &mut masks) {
                        (Some(draw), Some(m)) => {
                            let mk = draw();
                            m[off + i * seg.k_len + j] = mk;
                            pj * mk
                        }
                        _ => pj,
                    };
                    if w != T::zero() {
                        let vr = (seg.k_start + j) * dim;
                        axpy(w, &v[vr + cols.start..vr + cols.end], o);
                    }
                }
            }
            off += seg.q_len * seg.k_len;
        }
    }
    AttnForward {
        out,
        probs,
        keep: masks,
    }
}

pub(crate) struct AttnGrads<'a, T> {
    pub dq: Option<&'a mut [T]>,
    pub dk: Option<&'a mut [T]>,
    pub dv: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dim: usize,
    layout: &AttnLayout,
    probs: &[T],
    keep: Option<&[T]>,
    dout: &[T],
    mut grads: AttnGrads<'_, T>,
) {
    let heads = layout.heads;
    let dh = dim / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut off = 0;
    let mut dp = Vec::new();
    for seg in &layout.segments {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..seg.q_len {
                let qr = (seg.q_start + i) * dim;
                let allowed = seg.allowed(i);
                let base = off + i * seg.k_len;
                let p = &probs[base..base + allowed];
                let mk = keep.map(|m| &m[base..base + allowed]);
                let doi = &dout[qr + cols.start..qr + cols.end];
                dp.clear();
                for j in 0..allowed {
                    let vr = (seg.k_start + j) * dim;
                    let mut g = dot(doi, &v[vr + cols.start..vr + cols.end]);
                    let m = mk.map_or(T::one(), |m| m[j]);
                    g *= m;
                    dp.push(g);
                    if let Some(dv) = grads.dv.as_deref_mut() {
                        let w = p[j] * m;
                        if w != T::zero() {
                            axpy(w, doi, &mut dv[vr + cols.start..vr + cols.end]);
                        }
                    }
                }
                let s: T = p.iter().zip(&dp).map(|(&pj, &g)| pj * g).sum();
                for j in 0..allowed {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kr = (seg.k_start + j) * dim;
                    if let Some(dq) = grads.dq.as_deref_mut() {
                        axpy(
                            ds,
                            &k[kr + cols.start..kr + cols.end],
                            &mut dq[qr + cols.start..qr + cols.end],
                        );
                    }
                    if let Some(dk) = grads.dk.as_deref_mut() {
                        axpy(
                            ds,
                            &q[qr + cols.start..qr + cols.end],
                            &mut dk[kr + cols.start..kr + cols.end],
                        );
                    }
                }
            }
            off += seg.q_len * seg.k_len;
        }
    }
}
