//! The contrastive objective: scaled cosine similarity matrix and the
//! symmetric InfoNCE loss.
//!
//! For a batch of N matched pairs with unit-norm image embeddings u and text
//! embeddings v, `S[i][j] = <u_i, v_j> / tau`. The loss averages the
//! row-direction and column-direction cross-entropies whose targets sit on
//! the diagonal. Both directions are computed through log-sum-exp; softmax
//! probabilities are never materialized in the forward value path.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// N x N logit matrix together with the temperature that produced it.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub tau: f64,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.values.rows()
    }
}

/// `S = u v^T / tau` for unit-norm rows (checked to 1e-6).
pub fn similarity_matrix(u: &Tensor, v: &Tensor, tau: f64) -> Result<SimilarityMatrix> {
    if u.rank() != 2 || v.rank() != 2 || u.shape() != v.shape() {
        return Err(Error::dim("similarity_matrix", u.shape(), v.shape()));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    for (name, t) in [("u", u), ("v", v)] {
        for r in 0..t.rows() {
            let norm: f64 = (0..t.cols())
                .map(|c| t.at2(r, c) * t.at2(r, c))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "similarity_matrix: {name} row {r} has norm {norm}, expected unit"
                )));
            }
        }
    }
    let n = u.rows();
    let e = u.cols();
    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for c in 0..e {
                dot += u.at2(i, c) * v.at2(j, c);
            }
            values[i * n + j] = dot / tau;
        }
    }
    Ok(SimilarityMatrix {
        values: Tensor::matrix(n, n, values)?,
        tau,
    })
}

/// Value-level CLIP loss of a square logit matrix.
pub fn clip_loss(s: &SimilarityMatrix) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(s.values.clone());
    let loss = clip_loss_var(&mut tape, v)?;
    Ok(tape.value(loss).data()[0])
}

/// Tape-level CLIP loss: `0.5 * (CE_rows(S, diag) + CE_rows(S^T, diag))`.
pub fn clip_loss_var(tape: &mut Tape, s: Var) -> Result<Var> {
    let t = tape.value(s);
    if t.rank() != 2 || t.rows() != t.cols() {
        return Err(Error::dim("clip_loss", t.shape(), t.shape()));
    }
    let n = t.rows();
    let diag: Vec<usize> = (0..n).collect();
    let l_ti = tape.cross_entropy_rows(s, &diag)?;
    let st = tape.transpose(s)?;
    let l_it = tape.cross_entropy_rows(st, &diag)?;
    let sum = tape.add(l_ti, l_it)?;
    tape.scale(sum, 0.5)
}

/// Tape-level similarity logits: `(u v^T) * inv_tau` where `inv_tau` is a
/// scalar node (so temperature gradients flow).
pub fn similarity_var(tape: &mut Tape, u: Var, v: Var, inv_tau: Var) -> Result<Var> {
    let (tu, tv) = (tape.value(u), tape.value(v));
    if tu.rank() != 2 || tv.rank() != 2 || tu.shape() != tv.shape() {
        return Err(Error::dim("similarity_var", tu.shape(), tv.shape()));
    }
    let vt = tape.transpose(v)?;
    let raw = tape.matmul(u, vt)?;
    tape.mul_scalar(raw, inv_tau)
}
