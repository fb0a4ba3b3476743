//! Standard and differential multi-head attention.
//!
//! The differential path splits each head's queries and keys in half, forms
//! two softmax attention distributions at scale sqrt(d_h/2), and subtracts
//! the second from the first weighted by a learnable scalar lambda:
//!
//! ```text
//! DiffAttn(X) = (A1 - lambda * A2) V
//! lambda      = exp(<lq1, lk1>) - exp(<lq2, lk2>) + lambda_init
//! ```
//!
//! lambda is reparameterized through four vectors of length d_h/2, one set
//! per attention layer, shared by all heads, and is recomputed from them on
//! every forward pass. lambda_init is either a constant (0.8 by default) or
//! the per-layer schedule `0.8 - 0.6 * exp(-0.3 * l)` with 1-based layer
//! index l.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Score offset used to void masked (future) positions before softmax.
/// Finite so that tensors never store inf, yet large enough that
/// `exp(x - max)` underflows to exactly zero.
pub(crate) const MASK_OFF: f64 = -1.0e30;

/// Guard threshold for the `exp` in the lambda reparameterization.
pub const LAMBDA_DOT_LIMIT: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Standard,
    Differential,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaInitMode {
    Constant(f64),
    /// `0.8 - 0.6 exp(-0.3 l)`, resolved from the 1-based layer index.
    Dynamic,
}

#[derive(Clone, Debug)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub variant: AttentionVariant,
    pub lambda_init_mode: LambdaInitMode,
    /// 1-based layer index, used by the dynamic lambda_init schedule.
    pub layer_index: usize,
    /// Optional RMS normalization of each head output after the subtraction,
    /// scaled by (1 - lambda_init). Off by default: the differential step is
    /// used exactly as written, without a post-subtraction norm.
    pub post_subtraction_norm: bool,
}

impl AttentionConfig {
    pub fn new(
        model_dim: usize,
        num_heads: usize,
        variant: AttentionVariant,
        lambda_init_mode: LambdaInitMode,
        layer_index: usize,
    ) -> Result<Self> {
        let cfg = AttentionConfig {
            model_dim,
            num_heads,
            variant,
            lambda_init_mode,
            layer_index,
            post_subtraction_norm: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model_dim must be positive and even, got {}",
                self.model_dim
            )));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} must divide model_dim {}",
                self.num_heads, self.model_dim
            )));
        }
        if self.variant == AttentionVariant::Differential && self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "differential attention needs an even head dim, got {}",
                self.head_dim()
            )));
        }
        if self.layer_index == 0 {
            return Err(Error::Config("layer_index is 1-based".to_string()));
        }
        if let LambdaInitMode::Constant(v) = self.lambda_init_mode {
            if !v.is_finite() {
                return Err(Error::Config(format!("lambda_init must be finite, got {v}")));
            }
            if !(0.0..1.0).contains(&v) {
                eprintln!(
                    "warning: lambda_init {v} outside the usual (0, 1) range; proceeding anyway"
                );
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// lambda_init resolved for this layer.
    pub fn lambda_init(&self) -> Result<f64> {
        match self.lambda_init_mode {
            LambdaInitMode::Constant(v) => Ok(v),
            LambdaInitMode::Dynamic => lambda_init_schedule(self.layer_index),
        }
    }
}

/// `0.8 - 0.6 exp(-0.3 l)` for 1-based layer index `l`.
pub fn lambda_init_schedule(layer_index: usize) -> Result<f64> {
    if layer_index < 1 {
        return Err(Error::Config(
            "lambda_init schedule needs a 1-based layer index".to_string(),
        ));
    }
    Ok(0.8 - 0.6 * (-0.3 * layer_index as f64).exp())
}

/// Learnable lambda reparameterization for one differential attention layer.
/// The four vectors have length `head_dim / 2` and are shared across heads.
#[derive(Clone, Debug)]
pub struct LambdaParams {
    pub lq1: Tensor,
    pub lk1: Tensor,
    pub lq2: Tensor,
    pub lk2: Tensor,
    pub lambda_init: f64,
}

impl LambdaParams {
    /// Zero vectors, so the initial lambda equals lambda_init exactly.
    pub fn zeros(half_dim: usize, lambda_init: f64) -> Self {
        LambdaParams {
            lq1: Tensor::zeros(&[half_dim]),
            lk1: Tensor::zeros(&[half_dim]),
            lq2: Tensor::zeros(&[half_dim]),
            lk2: Tensor::zeros(&[half_dim]),
            lambda_init,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.lq1.numel();
        for (name, t) in [("lk1", &self.lk1), ("lq2", &self.lq2), ("lk2", &self.lk2)] {
            if t.numel() != n {
                return Err(Error::dim("compute_lambda", self.lq1.shape(), t.shape()))
                    .map_err(|_| Error::Config(format!("lambda vector {name} length mismatch")));
            }
        }
        if !self.lambda_init.is_finite() {
            return Err(Error::Config("lambda_init must be finite".to_string()));
        }
        Ok(())
    }
}

/// lambda = exp(<lq1, lk1>) - exp(<lq2, lk2>) + lambda_init, value level.
/// Dot products beyond the exp guard are a hard error rather than a clamp.
pub fn compute_lambda(p: &LambdaParams) -> Result<f64> {
    p.validate()?;
    let dot = |a: &Tensor, b: &Tensor| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    };
    let d1 = dot(&p.lq1, &p.lk1);
    let d2 = dot(&p.lq2, &p.lk2);
    for (name, d) in [("lq1.lk1", d1), ("lq2.lk2", d2)] {
        if d > LAMBDA_DOT_LIMIT {
            return Err(Error::Numeric(format!(
                "lambda dot product {name} = {d} exceeds exp guard {LAMBDA_DOT_LIMIT}"
            )));
        }
    }
    Ok(d1.exp() - d2.exp() + p.lambda_init)
}

/// Projection weights of one attention layer. All four matrices are d x d in
/// both variants; the differential variant additionally carries the lambda
/// reparameterization vectors.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub lambda: Option<LambdaParams>,
}

/// Tape handles to one attention layer's weights.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub lambda: Option<LambdaVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct LambdaVars {
    pub lq1: Var,
    pub lk1: Var,
    pub lq2: Var,
    pub lk2: Var,
    pub lambda_init: f64,
}

impl AttentionWeights {
    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            lambda: self.lambda.as_ref().map(|l| LambdaVars {
                lq1: tape.leaf(l.lq1.clone()),
                lk1: tape.leaf(l.lk1.clone()),
                lq2: tape.leaf(l.lq2.clone()),
                lk2: tape.leaf(l.lk2.clone()),
                lambda_init: l.lambda_init,
            }),
        }
    }
}

/// Tape-level lambda: a differentiable `[1]` scalar node.
pub fn lambda_var(tape: &mut Tape, lv: &LambdaVars) -> Result<Var> {
    let p1 = tape.mul(lv.lq1, lv.lk1)?;
    let d1 = tape.sum(p1)?;
    let p2 = tape.mul(lv.lq2, lv.lk2)?;
    let d2 = tape.sum(p2)?;
    for (name, d) in [("lq1.lk1", d1), ("lq2.lk2", d2)] {
        let v = tape.value(d).data()[0];
        if v > LAMBDA_DOT_LIMIT {
            return Err(Error::Numeric(format!(
                "lambda dot product {name} = {v} exceeds exp guard {LAMBDA_DOT_LIMIT}"
            )));
        }
    }
    let e1 = tape.exp(d1)?;
    let e2 = tape.exp(d2)?;
    let diff = tape.sub(e1, e2)?;
    tape.add_scalar(diff, lv.lambda_init)
}

/// Lower-triangular causal mask as score offsets: 0 on and below the
/// diagonal, `MASK_OFF` above.
fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_OFF;
        }
    }
    Tensor::matrix(n, n, data).expect("mask shape")
}

/// Softmax attention for one head: `softmax(q kT / sqrt(cols(q)) [+ mask]) v`.
fn plain_head(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let dk = tape.value(q).cols() as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scaled = tape.scale(scores, 1.0 / dk.sqrt())?;
    if let Some(m) = mask {
        scaled = tape.add(scaled, m)?;
    }
    let weights = tape.softmax(scaled, 1)?;
    tape.matmul(weights, v)
}

/// Differential attention for one head. `q` and `k` are `[N x d_h]` and get
/// split into halves internally; `v` stays full width. Returns the head
/// output; when `capture` is provided, also records the effective weight
/// matrix `A1 - lambda A2`.
pub fn diff_attention_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    lambda: Var,
    causal: bool,
    capture: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d_h = tape.value(q).cols();
    if d_h % 2 != 0 {
        return Err(Error::Config(format!(
            "differential head needs an even head dim, got {d_h}"
        )));
    }
    let n = tape.value(q).rows();
    let mask = if causal {
        Some(tape.constant(causal_mask(n)))
    } else {
        None
    };
    let halves_q = tape.split(q, 1, 2)?;
    let halves_k = tape.split(k, 1, 2)?;
    let scale = 1.0 / ((d_h / 2) as f64).sqrt();
    let mut dists = Vec::with_capacity(2);
    for (qh, kh) in halves_q.iter().zip(&halves_k) {
        let kt = tape.transpose(*kh)?;
        let scores = tape.matmul(*qh, kt)?;
        let mut scaled = tape.scale(scores, scale)?;
        if let Some(m) = mask {
            scaled = tape.add(scaled, m)?;
        }
        dists.push(tape.softmax(scaled, 1)?);
    }
    let a2_scaled = tape.mul_scalar(dists[1], lambda)?;
    let effective = tape.sub(dists[0], a2_scaled)?;
    if let Some(cap) = capture {
        cap.push(effective);
    }
    tape.matmul(effective, v)
}

/// Optional probe: collects the last requested layer's per-head effective
/// attention matrices (`A` for standard, `A1 - lambda A2` for differential).
pub struct AttnCapture {
    /// 1-based layer index to capture.
    pub layer_index: usize,
    pub heads: Vec<Var>,
}

/// Multi-head attention over a batch of equal-length sequences stacked along
/// axis 0 (`x` is `[batch * seq_len x d]`). Heads attend within each sequence
/// only. This is the single code path for both variants; `standard_mha` and
/// `diff_mha` are the batch-of-one wrappers.
pub fn mha_stacked(
    tape: &mut Tape,
    x: Var,
    w: &AttentionVars,
    cfg: &AttentionConfig,
    batch: usize,
    seq_len: usize,
    causal: bool,
    mut capture: Option<&mut AttnCapture>,
) -> Result<Var> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let xv = tape.value(x);
    if xv.rank() != 2 || xv.cols() != d || xv.rows() != batch * seq_len {
        return Err(Error::dim("mha", xv.shape(), &[batch * seq_len, d]));
    }
    let differential = match (cfg.variant, w.lambda.as_ref()) {
        (AttentionVariant::Standard, None) => false,
        (AttentionVariant::Differential, Some(_)) => true,
        (AttentionVariant::Standard, Some(_)) => {
            return Err(Error::Config(
                "standard attention config paired with lambda parameters".to_string(),
            ))
        }
        (AttentionVariant::Differential, None) => {
            return Err(Error::Config(
                "differential attention config without lambda parameters".to_string(),
            ))
        }
    };

    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;

    let d_h = cfg.head_dim();
    let lambda = match w.lambda.as_ref() {
        Some(lv) => Some(lambda_var(tape, lv)?),
        None => None,
    };
    let lambda_init = if differential { Some(cfg.lambda_init()?) } else { None };
    let mask = if causal && !differential {
        Some(tape.constant(causal_mask(seq_len)))
    } else {
        None
    };

    let mut sample_outs = Vec::with_capacity(batch);
    for b in 0..batch {
        let qb = tape.slice_axis(q, 0, b * seq_len, seq_len)?;
        let kb = tape.slice_axis(k, 0, b * seq_len, seq_len)?;
        let vb = tape.slice_axis(v, 0, b * seq_len, seq_len)?;
        let mut head_outs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = tape.slice_axis(qb, 1, h * d_h, d_h)?;
            let kh = tape.slice_axis(kb, 1, h * d_h, d_h)?;
            let vh = tape.slice_axis(vb, 1, h * d_h, d_h)?;
            let mut out = if differential {
                let cap_vec = match capture.as_deref_mut() {
                    Some(c) if c.layer_index == cfg.layer_index && b == 0 => Some(&mut c.heads),
                    _ => None,
                };
                diff_attention_head(tape, qh, kh, vh, lambda.unwrap(), causal, cap_vec)?
            } else {
                if let Some(c) = capture.as_deref_mut() {
                    if c.layer_index == cfg.layer_index && b == 0 {
                        // Standard path: the effective matrix is A itself.
                        let dk = d_h as f64;
                        let kt = tape.transpose(kh)?;
                        let scores = tape.matmul(qh, kt)?;
                        let mut scaled = tape.scale(scores, 1.0 / dk.sqrt())?;
                        if let Some(m) = mask {
                            scaled = tape.add(scaled, m)?;
                        }
                        let a = tape.softmax(scaled, 1)?;
                        c.heads.push(a);
                        head_outs.push(tape.matmul(a, vh)?);
                        continue;
                    }
                }
                plain_head(tape, qh, kh, vh, mask)?
            };
            if differential && cfg.post_subtraction_norm {
                let normed = tape.rms_norm_rows(out, 1e-5)?;
                out = tape.scale(normed, 1.0 - lambda_init.unwrap())?;
            }
            head_outs.push(out);
        }
        sample_outs.push(tape.concat(&head_outs, 1)?);
    }
    let merged = tape.concat(&sample_outs, 0)?;
    tape.matmul(merged, w.wo)
}

/// Standard multi-head attention over a single `[N x d]` sequence.
pub fn standard_mha(
    tape: &mut Tape,
    x: Var,
    w: &AttentionVars,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<Var> {
    if cfg.variant != AttentionVariant::Standard {
        return Err(Error::Config(
            "standard_mha called with a differential config".to_string(),
        ));
    }
    let n = tape.value(x).rows();
    mha_stacked(tape, x, w, cfg, 1, n, causal, None)
}

/// Differential multi-head attention over a single `[N x d]` sequence.
pub fn diff_mha(
    tape: &mut Tape,
    x: Var,
    w: &AttentionVars,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<Var> {
    if cfg.variant != AttentionVariant::Differential {
        return Err(Error::Config(
            "diff_mha called with a standard config".to_string(),
        ));
    }
    let n = tape.value(x).rows();
    mha_stacked(tape, x, w, cfg, 1, n, causal, None)
}
