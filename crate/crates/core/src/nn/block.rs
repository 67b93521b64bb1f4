//! Attention block parameters and the standalone block operations.

use super::kernels::{self, MaskMatrix};
use super::matrix::Matrix;
use crate::{Result, UmcError};

/// Weights of one attention block: fused query/key/value/output projections
/// (each `d x d` with bias), the position-wise feed-forward pair, and the two
/// pre-normalization gain/bias vectors.
#[derive(Clone, Debug)]
pub struct AttentionBlockParams {
    pub heads: usize,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl AttentionBlockParams {
    /// Identity projections, zero feed-forward, unit norms. Mostly a test
    /// fixture: `mhsa` reduces to bare masked attention.
    pub fn identity(d: usize, d_ff: usize, heads: usize) -> Self {
        assert!(heads >= 1 && d.is_multiple_of(heads), "d {d} not divisible by heads {heads}");
        let eye = Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 });
        AttentionBlockParams {
            heads,
            wq: eye.clone(),
            bq: Matrix::zeros(1, d),
            wk: eye.clone(),
            bk: Matrix::zeros(1, d),
            wv: eye.clone(),
            bv: Matrix::zeros(1, d),
            wo: eye,
            bo: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, d_ff),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::zeros(d_ff, d),
            b2: Matrix::zeros(1, d),
            ln1_gain: Matrix::from_fn(1, d, |_, _| 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::from_fn(1, d, |_, _| 1.0),
            ln2_bias: Matrix::zeros(1, d),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }
}

/// Masked multi-head self-attention over one token matrix:
/// `softmax(Q(E) K(E)^T / sqrt(d_k) + M) V(E)`, heads concatenated, output
/// projected.
pub fn mhsa(e: &Matrix, mask: &MaskMatrix, p: &AttentionBlockParams) -> Result<Matrix> {
    if e.cols() != p.d_model() {
        return Err(UmcError::shape("mhsa", format!("tokens {}x{} vs d={}", e.rows(), e.cols(), p.d_model())));
    }
    if mask.n_tokens() != e.rows() {
        return Err(UmcError::shape("mhsa", format!("{} tokens vs {} mask", e.rows(), mask.n_tokens())));
    }
    mask.validate()?;
    let q = kernels::linear_forward(e, &p.wq, &p.bq);
    let k = kernels::linear_forward(e, &p.wk, &p.bk);
    let v = kernels::linear_forward(e, &p.wv, &p.bv);
    let (attn, _) = kernels::masked_attention_forward(
        &q,
        &k,
        &v,
        std::slice::from_ref(mask),
        e.rows(),
        p.heads,
    )?;
    Ok(kernels::linear_forward(&attn, &p.wo, &p.bo))
}

/// Position-wise two-layer feed-forward with ReLU.
pub fn ffn(tokens: &Matrix, p: &AttentionBlockParams) -> Result<Matrix> {
    if tokens.cols() != p.d_model() {
        return Err(UmcError::shape("ffn", format!("width {} vs d={}", tokens.cols(), p.d_model())));
    }
    let h = kernels::relu_forward(&kernels::linear_forward(tokens, &p.w1, &p.b1));
    Ok(kernels::linear_forward(&h, &p.w2, &p.b2))
}
