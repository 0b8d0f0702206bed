//! Matching probabilities and the cross-modal projection matching loss.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Default `ε` inside `log(q + ε)`.
pub const CMPM_EPS: f64 = 1e-8;

/// Label matrix for a batch: identity, plus cross-matches between items
/// whose target strings are identical.
pub fn match_labels<T: Real>(targets: &[&str]) -> Result<Tensor<T>> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::EmptyInput("label batch".into()));
    }
    let mut y = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || targets[i] == targets[j] {
                y[i * n + j] = T::one();
            }
        }
    }
    Ok(Tensor::new(&[n, n], y)?)
}

/// Row-normalizes `y` into `q`, rejecting rows without a positive.
pub fn true_matching<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = y.dims2();
    let mut q = y.data().to_vec();
    for i in 0..r {
        let row = &mut q[i * c..(i + 1) * c];
        let s: T = row.iter().copied().sum();
        if !(s > T::zero()) {
            return Err(Error::Contract(format!("label row {i} has no positive entry")));
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Ok(Tensor::new(y.shape(), q)?)
}

fn transpose<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = t.dims2();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("transposed shape")
}

fn neg_log_q<T: Real>(q: &Tensor<T>, eps: f64) -> Tensor<T> {
    let data = q
        .data()
        .iter()
        .map(|&v| T::from_f64(-(v.as_f64() + eps).ln()))
        .collect();
    Tensor::new(q.shape(), data).expect("same shape")
}

/// Per-direction terms of the symmetric loss, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct CmpmVars {
    pub total: Var,
    pub c2t: Var,
    pub t2c: Var,
    /// Composed-to-target matching probabilities.
    pub p: Var,
}

fn direction<T: Real>(g: &mut Graph<T>, logits: Var, q: &Tensor<T>, eps: f64) -> Result<(Var, Var)> {
    let n = g.value(logits).dims2().0;
    let logp = g.log_softmax(logits, 1)?;
    let p = g.exp(logp);
    let ratio = g.add_const(logp, &neg_log_q(q, eps))?;
    let kl = g.mul(p, ratio)?;
    let s = g.sum(kl);
    Ok((g.scale(s, 1.0 / n as f64), p))
}

/// Symmetric CMPM between `composed` and `targets` (both `N × d_out`,
/// normalized) with logits scaled by `exp(log_inv_temp)`.
pub fn cmpm_graph<T: Real>(
    g: &mut Graph<T>,
    composed: Var,
    targets: Var,
    log_inv_temp: Var,
    labels: &Tensor<T>,
    eps: f64,
) -> Result<CmpmVars> {
    let n = g.value(composed).dims2().0;
    if g.shape(targets).first() != Some(&n) || labels.shape() != [n, n] {
        return Err(Error::Contract(format!(
            "{n} composed features, targets {:?}, labels {:?}",
            g.shape(targets),
            labels.shape()
        )));
    }
    let q = true_matching(labels)?;
    let q_t = true_matching(&transpose(labels))?;
    let sim = g.matmul_nt(composed, targets)?;
    let scale = g.exp(log_inv_temp);
    let logits = g.mul_scalar(sim, scale)?;
    let (c2t, p) = direction(g, logits, &q, eps)?;
    let logits_t = g.transpose(logits)?;
    let (t2c, _) = direction(g, logits_t, &q_t, eps)?;
    let total = g.add(c2t, t2c)?;
    Ok(CmpmVars { total, c2t, t2c, p })
}

/// A batch of matched features with its label matrix.
#[derive(Debug, Clone)]
pub struct MatchBatch {
    pub composed: Tensor<f64>,
    pub targets: Tensor<f64>,
    pub labels: Tensor<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmpmValue {
    pub loss: f64,
    pub c2t: f64,
    pub t2c: f64,
    pub p: Tensor<f64>,
    pub q: Tensor<f64>,
}

/// `p[i][j] = softmax_j(cos(f_c^i, f_t^j) / τ)`.
pub fn matching_probabilities(composed: &Tensor<f64>, targets: &Tensor<f64>, tau: f64) -> Result<Tensor<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let mut g = Graph::new();
    let c = g.constant(composed.clone());
    let t = g.constant(targets.clone());
    let sim = g.matmul_nt(c, t)?;
    let logits = g.scale(sim, 1.0 / tau);
    let p = g.softmax(logits, 1)?;
    Ok(g.value(p).clone())
}

/// Evaluates the symmetric loss at temperature `tau`.
pub fn cmpm_loss(batch: &MatchBatch, tau: f64) -> Result<CmpmValue> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let mut g = Graph::new();
    let c = g.constant(batch.composed.clone());
    let t = g.constant(batch.targets.clone());
    let s = g.constant(Tensor::scalar(-tau.ln()));
    let out = cmpm_graph(&mut g, c, t, s, &batch.labels, batch.eps)?;
    Ok(CmpmValue {
        loss: g.value(out.total).item(),
        c2t: g.value(out.c2t).item(),
        t2c: g.value(out.t2c).item(),
        p: g.value(out.p).clone(),
        q: true_matching(&batch.labels)?,
    })
}
