//! Fused multi-head attention kernel used by [`Tape::attention`](super::Tape::attention).
//!
//! Rows of `q`, `k` and `v` are grouped into independent segments (one per
//! sequence in a batch). Each segment attends only within itself.

use crate::diffcore::tape::Var;
use crate::diffcore::tensor::Tensor;

/// One sequence: query rows `q_start..q_start+q_len` attend key rows
/// `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Self-attention over rows `start..start+len`.
    pub fn square(start: usize, len: usize) -> Self {
        Segment {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub segments: Vec<Segment>,
    /// Local query `i` sees local key `j` iff `j <= i + (k_len - q_len)`.
    pub causal: bool,
    /// Additive log-weight per key row. A key with weight `ln m` behaves exactly
    /// like `m` identical copies of that key.
    pub key_log_weight: Option<Vec<f64>>,
}

impl AttentionSpec {
    pub fn new(heads: usize, segments: Vec<Segment>) -> Self {
        AttentionSpec {
            heads,
            segments,
            causal: false,
            key_log_weight: None,
        }
    }
}

pub(crate) struct AttentionSaved {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub spec: AttentionSpec,
    pub cols: usize,
    /// Softmax weights, laid out segment-major then head-major, `q_len * k_len` each.
    pub probs: Vec<f64>,
}

pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttentionSpec,
) -> Result<(Tensor, AttentionSaved), String> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d {
        return Err(format!("q/k/v widths {d}/{}/{}", k.cols(), v.cols()));
    }
    if k.rows() != v.rows() {
        return Err(format!("k has {} rows, v has {}", k.rows(), v.rows()));
    }
    if spec.heads == 0 || d % spec.heads != 0 {
        return Err(format!("width {d} not divisible into {} heads", spec.heads));
    }
    if let Some(w) = &spec.key_log_weight {
        if w.len() != k.rows() {
            return Err(format!("{} key weights for {} keys", w.len(), k.rows()));
        }
    }
    for s in &spec.segments {
        if s.q_len == 0 || s.k_len == 0 {
            return Err("empty attention segment".into());
        }
        if s.q_start + s.q_len > q.rows() || s.k_start + s.k_len > k.rows() {
            return Err(format!("segment {s:?} out of range"));
        }
        if spec.causal && s.k_len < s.q_len {
            return Err(format!("causal segment {s:?} has fewer keys than queries"));
        }
    }
    let dh = d / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; q.rows() * d];
    let mut probs = Vec::new();
    let mut logits = Vec::new();
    for s in &spec.segments {
        let offset = s.k_len - s.q_len.min(s.k_len);
        for h in 0..spec.heads {
            let c0 = h * dh;
            for i in 0..s.q_len {
                let qi = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                let visible = if spec.causal { i + offset + 1 } else { s.k_len };
                logits.clear();
                let mut mx = f64::NEG_INFINITY;
                for j in 0..visible {
                    let kj = &kd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                    let mut l = dot(qi, kj) * scale;
                    if let Some(w) = &spec.key_log_weight {
                        l += w[s.k_start + j];
                    }
                    mx = mx.max(l);
                    logits.push(l);
                }
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - mx).exp();
                    z += *l;
                }
                let orow = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                let base = probs.len();
                probs.resize(base + s.k_len, 0.0);
                for (j, l) in logits.iter().enumerate() {
                    let p = l / z;
                    probs[base + j] = p;
                    let vj = &vd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    let saved = AttentionSaved {
        q: Var(0),
        k: Var(0),
        v: Var(0),
        spec: spec.clone(),
        cols: d,
        probs,
    };
    Ok((Tensor::matrix(q.rows(), d, out), saved))
}

pub(crate) fn backward(
    saved: &AttentionSaved,
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let spec = &saved.spec;
    let d = saved.cols;
    let dh = d / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut dp = Vec::new();
    let mut base = 0;
    for s in &spec.segments {
        let offset = s.k_len - s.q_len.min(s.k_len);
        for h in 0..spec.heads {
            let c0 = h * dh;
            for i in 0..s.q_len {
                let qrow = (s.q_start + i) * d + c0;
                let visible = if spec.causal { i + offset + 1 } else { s.k_len };
                let p = &saved.probs[base..base + s.k_len];
                let go = &g[qrow..qrow + dh];
                dp.clear();
                let mut pdp = 0.0;
                for j in 0..visible {
                    let krow = (s.k_start + j) * d + c0;
                    let vj = &vd[krow..krow + dh];
                    let x = dot(go, vj);
                    pdp += p[j] * x;
                    dp.push(x);
                    for (gvx, gox) in gv[krow..krow + dh].iter_mut().zip(go) {
                        *gvx += p[j] * gox;
                    }
                }
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (s.k_start + j) * d + c0;
                    for c in 0..dh {
                        gq[qrow + c] += ds * kd[krow + c];
                        gk[krow + c] += ds * qd[qrow + c];
                    }
                }
                base += s.k_len;
            }
        }
    }
    (gq, gk, gv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
