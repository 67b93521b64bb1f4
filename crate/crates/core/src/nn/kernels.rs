//! Forward and backward kernels for every operation in the policy graph.
//!
//! Each kernel is a pure function over [`Matrix`] values. The tape composes
//! them; the inference paths call the forward halves directly, so both
//! routes compute bitwise-identical values.
//!
//! Token batching convention: a batch of B samples with T tokens each is
//! stored as one `(B*T) x D` matrix, sample-major (rows `b*T .. b*T+T` hold
//! sample `b`).

use super::matrix::Matrix;
use crate::{Result, UmcError};

/// Additive sentinel standing in for -inf in attention masks.
///
/// Large enough that `exp(score + MASK_NEG - row_max)` underflows to exactly
/// zero for any finite score this model can produce, while keeping all
/// arithmetic finite (no inf - inf NaNs).
pub const MASK_NEG: f64 = -1e30;

/// Square additive attention mask with entries in `{0, MASK_NEG}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    m: Matrix,
}

impl MaskMatrix {
    /// All-zero mask over `n_tokens` positions (no masking).
    pub fn zeros(n_tokens: usize) -> Self {
        MaskMatrix { m: Matrix::zeros(n_tokens, n_tokens) }
    }

    pub fn n_tokens(&self) -> usize {
        self.m.rows()
    }

    /// Mask key column `j` in every row: no token may attend to `j`.
    pub fn mask_column(&mut self, j: usize) {
        for i in 0..self.m.rows() {
            self.m.set(i, j, MASK_NEG);
        }
    }

    /// Mask query row `j` except its own diagonal entry, so token `j` still
    /// has one attendable position and softmax stays defined.
    pub fn mask_row_except_self(&mut self, j: usize) {
        for c in 0..self.m.cols() {
            if c != j {
                self.m.set(j, c, MASK_NEG);
            }
        }
    }

    /// Re-open one position (used for the self-loop of row-masked tokens).
    pub fn open(&mut self, i: usize, j: usize) {
        self.m.set(i, j, 0.0);
    }

    #[inline]
    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.m.get(i, j) != 0.0
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.m.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    /// Entries must be 0 or the sentinel, and every row must keep at least
    /// one attendable position.
    pub fn validate(&self) -> Result<()> {
        let n = self.m.rows();
        for i in 0..n {
            let mut open = false;
            for j in 0..n {
                let e = self.m.get(i, j);
                if e != 0.0 && e != MASK_NEG {
                    return Err(UmcError::Invariant(format!(
                        "mask entry ({i},{j}) = {e}, expected 0 or {MASK_NEG}"
                    )));
                }
                open |= e == 0.0;
            }
            if !open {
                return Err(UmcError::FullyMaskedRow { row: i });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementwise and linear kernels
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    out.as_mut_slice().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

pub fn relu_backward(x: &Matrix, d_out: &Matrix) -> Matrix {
    let mut dx = d_out.clone();
    for (d, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if xv <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// `out = x . w + b` with `b` broadcast over rows (`b` is `1 x n`).
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = x.matmul(w);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (o, &bv) in row.iter_mut().zip(b.as_slice()) {
            *o += bv;
        }
    }
    out
}

/// Returns `(dx, dw, db)` for the linear kernel.
pub fn linear_backward(x: &Matrix, w: &Matrix, d_out: &Matrix) -> (Matrix, Matrix, Matrix) {
    let dx = d_out.matmul_a_bt(w);
    let dw = x.matmul_at_b(d_out);
    let mut db = Matrix::zeros(1, d_out.cols());
    for i in 0..d_out.rows() {
        let row = d_out.row(i);
        for (d, &g) in db.as_mut_slice().iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Layer normalization (per row)
// ---------------------------------------------------------------------------

pub const LN_EPS: f64 = 1e-6;

pub struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

pub fn layer_norm_forward(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(r, c);
    let mut xhat = Matrix::zeros(r, c);
    let mut inv_std = Vec::with_capacity(r);
    let g = gain.as_slice();
    let b = bias.as_slice();
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(istd);
        let xh = xhat.row_mut(i);
        for j in 0..c {
            xh[j] = (row[j] - mean) * istd;
        }
        let o = out.row_mut(i);
        let xh = xhat.row(i);
        for j in 0..c {
            o[j] = g[j] * xh[j] + b[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LnCache,
    gain: &Matrix,
    d_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (r, c) = (d_out.rows(), d_out.cols());
    let mut dx = Matrix::zeros(r, c);
    let mut dgain = Matrix::zeros(1, c);
    let mut dbias = Matrix::zeros(1, c);
    let g = gain.as_slice();
    for i in 0..r {
        let go = d_out.row(i);
        let xh = cache.xhat.row(i);
        let istd = cache.inv_std[i];
        let dg = dgain.as_mut_slice();
        let db = dbias.as_mut_slice();
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..c {
            dg[j] += go[j] * xh[j];
            db[j] += go[j];
            let dxh = go[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= c as f64;
        mean_dxhat_xhat /= c as f64;
        let drow = dx.row_mut(i);
        for j in 0..c {
            let dxh = go[j] * g[j];
            drow[j] = istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

// ---------------------------------------------------------------------------
// Per-token maps (tokenizer / positional embedding / detokenizer)
// ---------------------------------------------------------------------------

/// Per-token linear: token `t` of every sample goes through its own
/// `f_in -> d` map. `w` stacks the per-token weights as `(T*f_in) x d`;
/// `b` is `T x d`.
pub fn per_token_linear_forward(x: &Matrix, w: &Matrix, b: &Matrix, tokens: usize) -> Matrix {
    let f_in = x.cols();
    let d = w.cols();
    assert_eq!(w.rows(), tokens * f_in, "per-token weight stack shape");
    assert_eq!((b.rows(), b.cols()), (tokens, d), "per-token bias shape");
    assert_eq!(x.rows() % tokens, 0, "token rows not a multiple of T");
    let batch = x.rows() / tokens;
    let mut out = Matrix::zeros(x.rows(), d);
    for s in 0..batch {
        for t in 0..tokens {
            let xi = x.row(s * tokens + t);
            let orow = out.row_mut(s * tokens + t);
            for (f, &xv) in xi.iter().enumerate() {
                let wrow = w.row(t * f_in + f);
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(t)) {
                *o += bv;
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)` for the per-token linear kernel.
pub fn per_token_linear_backward(
    x: &Matrix,
    w: &Matrix,
    tokens: usize,
    d_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let f_in = x.cols();
    let d = w.cols();
    let batch = x.rows() / tokens;
    let mut dx = Matrix::zeros(x.rows(), f_in);
    let mut dw = Matrix::zeros(w.rows(), d);
    let mut db = Matrix::zeros(tokens, d);
    for s in 0..batch {
        for t in 0..tokens {
            let r = s * tokens + t;
            let go = d_out.row(r);
            let xi = x.row(r);
            for f in 0..f_in {
                let wrow = w.row(t * f_in + f);
                let mut acc = 0.0;
                for (g, &wv) in go.iter().zip(wrow) {
                    acc += g * wv;
                }
                dx.set(r, f, acc);
            }
            for (f, &xv) in xi.iter().enumerate() {
                let dwrow = dw.row_mut(t * f_in + f);
                for (dwv, &g) in dwrow.iter_mut().zip(go) {
                    *dwv += xv * g;
                }
            }
            let dbrow = db.row_mut(t);
            for (dbv, &g) in dbrow.iter_mut().zip(go) {
                *dbv += g;
            }
        }
    }
    (dx, dw, db)
}

/// Add the learned positional embedding `pos` (`T x d`) to each sample.
pub fn add_pos_forward(x: &Matrix, pos: &Matrix, tokens: usize) -> Matrix {
    assert_eq!(pos.rows(), tokens);
    assert_eq!(pos.cols(), x.cols());
    let batch = x.rows() / tokens;
    let mut out = x.clone();
    for s in 0..batch {
        for t in 0..tokens {
            let row = out.row_mut(s * tokens + t);
            for (o, &p) in row.iter_mut().zip(pos.row(t)) {
                *o += p;
            }
        }
    }
    out
}

pub fn add_pos_backward_pos(d_out: &Matrix, tokens: usize) -> Matrix {
    let batch = d_out.rows() / tokens;
    let mut dpos = Matrix::zeros(tokens, d_out.cols());
    for s in 0..batch {
        for t in 0..tokens {
            let go = d_out.row(s * tokens + t);
            let dp = dpos.row_mut(t);
            for (d, &g) in dp.iter_mut().zip(go) {
                *d += g;
            }
        }
    }
    dpos
}

/// Per-joint detokenizer: output `j` of sample `b` reads token `j` only.
/// `w` is `n_out x d` (row `j` is joint `j`'s map), `b` is `n_out x 1`.
/// The trailing `tokens - n_out` tokens (the flag token) are dropped.
pub fn detokenize_forward(x: &Matrix, w: &Matrix, b: &Matrix, tokens: usize) -> Matrix {
    let n_out = w.rows();
    assert!(n_out <= tokens);
    assert_eq!(w.cols(), x.cols());
    let batch = x.rows() / tokens;
    let mut out = Matrix::zeros(batch, n_out);
    for s in 0..batch {
        let orow = out.row_mut(s);
        for j in 0..n_out {
            let token = x.row(s * tokens + j);
            let wrow = w.row(j);
            let mut acc = b.get(j, 0);
            for (t, wv) in token.iter().zip(wrow) {
                acc += t * wv;
            }
            orow[j] = acc;
        }
    }
    out
}

/// Returns `(dx, dw, db)` for the detokenizer.
pub fn detokenize_backward(
    x: &Matrix,
    w: &Matrix,
    tokens: usize,
    d_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let n_out = w.rows();
    let batch = x.rows() / tokens;
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    let mut dw = Matrix::zeros(n_out, d);
    let mut db = Matrix::zeros(n_out, 1);
    for s in 0..batch {
        for j in 0..n_out {
            let g = d_out.get(s, j);
            let token = x.row(s * tokens + j);
            let wrow = w.row(j);
            let dxrow = dx.row_mut(s * tokens + j);
            for (dv, &wv) in dxrow.iter_mut().zip(wrow) {
                *dv += g * wv;
            }
            let dwrow = dw.row_mut(j);
            for (dwv, &t) in dwrow.iter_mut().zip(token) {
                *dwv += g * t;
            }
            db.set(j, 0, db.get(j, 0) + g);
        }
    }
    (dx, dw, db)
}

/// Extract token `idx` of every sample: `(B*T) x d -> B x d`.
pub fn select_token_forward(x: &Matrix, tokens: usize, idx: usize) -> Matrix {
    let batch = x.rows() / tokens;
    let mut out = Matrix::zeros(batch, x.cols());
    for s in 0..batch {
        out.row_mut(s).copy_from_slice(x.row(s * tokens + idx));
    }
    out
}

pub fn select_token_backward(
    d_out: &Matrix,
    tokens: usize,
    idx: usize,
    total_rows: usize,
) -> Matrix {
    let mut dx = Matrix::zeros(total_rows, d_out.cols());
    for s in 0..d_out.rows() {
        dx.row_mut(s * tokens + idx).copy_from_slice(d_out.row(s));
    }
    dx
}

// ---------------------------------------------------------------------------
// Masked multi-head attention core
// ---------------------------------------------------------------------------

/// Softmax weights saved for the backward pass: `batch * heads * T * T`.
pub struct AttnCache {
    weights: Vec<f64>,
    tokens: usize,
    heads: usize,
}

impl AttnCache {
    /// Attention weight of query `i` onto key `j` for `(sample, head)`.
    pub fn weight(&self, sample: usize, head: usize, i: usize, j: usize) -> f64 {
        let t = self.tokens;
        self.weights[((sample * self.heads + head) * t + i) * t + j]
    }
}

/// Per-head scaled dot-product attention with an additive mask shared by all
/// heads of a sample: `softmax(Q K^T / sqrt(d_k) + M) V`, heads concatenated.
///
/// `q`, `k`, `v` are `(B*T) x D` with head `h` occupying columns
/// `h*d_k .. (h+1)*d_k`. `masks` holds one mask per sample (`masks.len() == B`);
/// a single shared mask may be passed for uniform batches (`masks.len() == 1`).
pub fn masked_attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    masks: &[MaskMatrix],
    tokens: usize,
    heads: usize,
) -> Result<(Matrix, AttnCache)> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != q.rows() || v.rows() != q.rows() {
        return Err(UmcError::shape("mhsa", format!("q {}x{}, k {}x{}, v {}x{}", q.rows(), d, k.rows(), k.cols(), v.rows(), v.cols())));
    }
    if !d.is_multiple_of(heads) {
        return Err(UmcError::shape("mhsa", format!("width {d} not divisible by {heads} heads")));
    }
    if !q.rows().is_multiple_of(tokens) {
        return Err(UmcError::shape("mhsa", format!("{} rows not a multiple of {tokens} tokens", q.rows())));
    }
    let batch = q.rows() / tokens;
    if masks.len() != batch && masks.len() != 1 {
        return Err(UmcError::shape("mhsa", format!("{} masks for batch {batch}", masks.len())));
    }
    let d_k = d / heads;
    let scale = 1.0 / (d_k as f64).sqrt();

    let mut out = Matrix::zeros(q.rows(), d);
    let mut weights = vec![0.0; batch * heads * tokens * tokens];
    let mut scores = vec![0.0; tokens];
    let qd = q.as_slice();
    let kd = k.as_slice();
    let vd = v.as_slice();
    let od_rows = out.rows();
    let od = out.as_mut_slice();
    debug_assert_eq!(od_rows, batch * tokens);

    for s in 0..batch {
        let mask = if masks.len() == 1 { &masks[0] } else { &masks[s] };
        if mask.n_tokens() != tokens {
            return Err(UmcError::shape("mhsa", format!("mask is {}x{} for {tokens} tokens", mask.n_tokens(), mask.n_tokens())));
        }
        let md = mask.matrix().as_slice();
        let base = s * tokens;
        for h in 0..heads {
            let c0 = h * d_k;
            for i in 0..tokens {
                // SAFETY: row indices stay below batch*tokens and column
                // offsets below d; all buffers were shape-checked above.
                unsafe {
                    let qi = qd.get_unchecked((base + i) * d + c0..(base + i) * d + c0 + d_k);
                    let mrow = md.get_unchecked(i * tokens..(i + 1) * tokens);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tokens {
                        let kj = kd.get_unchecked((base + j) * d + c0..(base + j) * d + c0 + d_k);
                        let mut dot = 0.0;
                        for l in 0..d_k {
                            dot += *qi.get_unchecked(l) * *kj.get_unchecked(l);
                        }
                        let sc = dot * scale + *mrow.get_unchecked(j);
                        *scores.get_unchecked_mut(j) = sc;
                        if sc > max {
                            max = sc;
                        }
                    }
                    // A row whose best score is still at the sentinel has no
                    // attendable position; report it rather than emit NaN.
                    if max < MASK_NEG * 0.5 {
                        return Err(UmcError::FullyMaskedRow { row: i });
                    }
                    let mut sum = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    let inv_sum = 1.0 / sum;
                    let w_base = ((s * heads + h) * tokens + i) * tokens;
                    let o_base = (base + i) * d + c0;
                    for j in 0..tokens {
                        let wij = *scores.get_unchecked(j) * inv_sum;
                        *weights.get_unchecked_mut(w_base + j) = wij;
                        if wij != 0.0 {
                            let v_base = (base + j) * d + c0;
                            for l in 0..d_k {
                                *od.get_unchecked_mut(o_base + l) +=
                                    wij * *vd.get_unchecked(v_base + l);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, AttnCache { weights, tokens, heads }))
}

/// Returns `(dq, dk, dv)` given the cached softmax weights.
pub fn masked_attention_backward(
    cache: &AttnCache,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let tokens = cache.tokens;
    let heads = cache.heads;
    let d_k = d / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let batch = q.rows() / tokens;

    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dk = Matrix::zeros(k.rows(), d);
    let mut dv = Matrix::zeros(v.rows(), d);
    let mut dw = vec![0.0; tokens];
    let mut ds = vec![0.0; tokens];
    let qd = q.as_slice();
    let kd = k.as_slice();
    let vd = v.as_slice();
    let god = d_out.as_slice();
    let dqd = dq.as_mut_slice();
    let dkd = dk.as_mut_slice();
    let dvd = dv.as_mut_slice();
    let wts = &cache.weights;

    for s in 0..batch {
        let base = s * tokens;
        for h in 0..heads {
            let c0 = h * d_k;
            for i in 0..tokens {
                // SAFETY: same flat-index bounds as the forward pass.
                unsafe {
                    let go = god.get_unchecked((base + i) * d + c0..(base + i) * d + c0 + d_k);
                    let w_base = ((s * heads + h) * tokens + i) * tokens;
                    // dV and dW
                    let mut dot_wdw = 0.0;
                    for j in 0..tokens {
                        let wij = *wts.get_unchecked(w_base + j);
                        let v_base = (base + j) * d + c0;
                        let mut g = 0.0;
                        for l in 0..d_k {
                            g += *go.get_unchecked(l) * *vd.get_unchecked(v_base + l);
                        }
                        *dw.get_unchecked_mut(j) = g;
                        dot_wdw += wij * g;
                        if wij != 0.0 {
                            for l in 0..d_k {
                                *dvd.get_unchecked_mut(v_base + l) += wij * *go.get_unchecked(l);
                            }
                        }
                    }
                    // softmax backward: ds_j = w_j * (dw_j - sum_l w_l dw_l)
                    for j in 0..tokens {
                        let wij = *wts.get_unchecked(w_base + j);
                        *ds.get_unchecked_mut(j) = wij * (*dw.get_unchecked(j) - dot_wdw) * scale;
                    }
                    // dq_i += sum_j ds_j k_j ; dk_j += ds_j q_i (scale folded in)
                    let q_base = (base + i) * d + c0;
                    for j in 0..tokens {
                        let dsj = *ds.get_unchecked(j);
                        if dsj != 0.0 {
                            let k_base = (base + j) * d + c0;
                            for l in 0..d_k {
                                *dqd.get_unchecked_mut(q_base + l) +=
                                    dsj * *kd.get_unchecked(k_base + l);
                                *dkd.get_unchecked_mut(k_base + l) +=
                                    dsj * *qd.get_unchecked(q_base + l);
                            }
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// Gaussian policy head and PPO loss kernels
// ---------------------------------------------------------------------------

pub const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7; // 0.5 * ln(2*pi)

/// Per-dimension entropy of a unit-variance Gaussian: `0.5 * ln(2*pi*e)`.
pub const UNIT_GAUSSIAN_ENTROPY: f64 = HALF_LN_TAU + 0.5;

/// Log-density of a diagonal Gaussian: one row per sample.
pub fn gaussian_logp_forward(means: &Matrix, log_std: &Matrix, actions: &Matrix) -> Matrix {
    assert!(means.same_shape(actions), "means vs actions shape");
    assert_eq!(log_std.cols(), means.cols());
    let n = means.cols();
    let mut out = Matrix::zeros(means.rows(), 1);
    for b in 0..means.rows() {
        let mu = means.row(b);
        let a = actions.row(b);
        let mut lp = -(n as f64) * HALF_LN_TAU;
        for j in 0..n {
            let ls = log_std.get(0, j);
            let z = (a[j] - mu[j]) * (-ls).exp();
            lp += -0.5 * z * z - ls;
        }
        out.set(b, 0, lp);
    }
    out
}

/// Returns `(dmeans, dlog_std)` given upstream `d_logp` (`B x 1`).
pub fn gaussian_logp_backward(
    means: &Matrix,
    log_std: &Matrix,
    actions: &Matrix,
    d_logp: &Matrix,
) -> (Matrix, Matrix) {
    let n = means.cols();
    let mut dmu = Matrix::zeros(means.rows(), n);
    let mut dls = Matrix::zeros(1, n);
    for b in 0..means.rows() {
        let g = d_logp.get(b, 0);
        let mu = means.row(b);
        let a = actions.row(b);
        let dmu_row = dmu.row_mut(b);
        for j in 0..n {
            let ls = log_std.get(0, j);
            let inv_s = (-ls).exp();
            let z = (a[j] - mu[j]) * inv_s;
            dmu_row[j] = g * z * inv_s;
            dls.set(0, j, dls.get(0, j) + g * (z * z - 1.0));
        }
    }
    (dmu, dls)
}

/// Mean per-dimension Gaussian entropy from the state-independent log-stds.
pub fn entropy_mean(log_std: &Matrix) -> f64 {
    let n = log_std.cols() as f64;
    log_std.as_slice().iter().map(|ls| ls + UNIT_GAUSSIAN_ENTROPY).sum::<f64>() / n
}

/// Clipped PPO surrogate: `-mean_b min(r A, clip(r, 1-eps, 1+eps) A)`.
/// Returns the loss and the per-sample gradient w.r.t. the new log-prob.
pub fn surrogate_forward(
    logp_new: &Matrix,
    logp_old: &Matrix,
    advantages: &Matrix,
    clip_eps: f64,
) -> Result<(f64, Matrix)> {
    let b = logp_new.rows();
    assert_eq!(logp_old.rows(), b);
    assert_eq!(advantages.rows(), b);
    let mut loss = 0.0;
    let mut dlogp = Matrix::zeros(b, 1);
    for i in 0..b {
        let ratio = (logp_new.get(i, 0) - logp_old.get(i, 0)).exp();
        if !ratio.is_finite() {
            return Err(UmcError::non_finite("surrogate_loss", format!("ratio at sample {i}")));
        }
        let a = advantages.get(i, 0);
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
        loss -= unclipped.min(clipped);
        // min picks the unclipped branch iff unclipped <= clipped; the
        // clipped branch is flat in logp, so only that case carries gradient.
        if unclipped <= clipped {
            dlogp.set(i, 0, -ratio * a / b as f64);
        }
    }
    Ok((loss / b as f64, dlogp))
}

/// Clipped value loss: `mean_b max((v - R)^2, (clip(v, v_old +- eps) - R)^2)`.
/// Returns the loss and the per-sample gradient w.r.t. `v`.
pub fn value_loss_forward(
    values: &Matrix,
    values_old: &Matrix,
    returns: &Matrix,
    clip_eps: f64,
) -> (f64, Matrix) {
    let b = values.rows();
    assert_eq!(values_old.rows(), b);
    assert_eq!(returns.rows(), b);
    let mut loss = 0.0;
    let mut dv = Matrix::zeros(b, 1);
    for i in 0..b {
        let v = values.get(i, 0);
        let vo = values_old.get(i, 0);
        let r = returns.get(i, 0);
        let unclipped = (v - r) * (v - r);
        let vc = v.clamp(vo - clip_eps, vo + clip_eps);
        let clipped = (vc - r) * (vc - r);
        loss += unclipped.max(clipped);
        // When the clipped branch wins, v sits outside the clip band and the
        // branch is constant in v.
        if unclipped >= clipped {
            dv.set(i, 0, 2.0 * (v - r) / b as f64);
        }
    }
    (loss / b as f64, dv)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
