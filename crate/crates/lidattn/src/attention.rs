//! Multi-head projection and the three attention mechanisms.
//!
//! Self-attention materializes the full row-stochastic attention matrix.
//! Performer-attention approximates it with positive random features and
//! never forms an NxN product. Agent-attention pools the query matrix into
//! a small agent matrix, aggregates keys/values through it, broadcasts
//! back, and adds a depth-wise convolution of V as a residual.
//!
//! Each mechanism has a cached forward used by the training module and an
//! exact analytic backward. All computation on a sequence happens on its
//! valid prefix; padded rows never influence valid outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    depthwise_conv1d, gaussian_matrix, masked_row_softmax, masked_row_softmax_in_place,
    BinaryMask, Matrix, SeededRng,
};

/// Which attention kernel a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    SelfAttn,
    Performer,
    Agent,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Mechanism::SelfAttn),
            "performer" => Ok(Mechanism::Performer),
            "agent" => Ok(Mechanism::Agent),
            other => Err(Error::Config(format!(
                "unknown mechanism '{}', expected self|performer|agent",
                other
            ))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mechanism::SelfAttn => "self",
            Mechanism::Performer => "performer",
            Mechanism::Agent => "agent",
        };
        f.write_str(s)
    }
}

/// Hyper-parameters of the attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    /// Input embedding dimension.
    pub d_model: usize,
    /// Total attention dimension across heads.
    pub d_attn: usize,
    pub heads: usize,
    /// Performer random-feature dimension (per head).
    pub r: usize,
    /// Agent pooling stages; `p/2` halvings of the query rows.
    pub p: usize,
    /// Optional fixed upper bound on the agent size.
    pub n_cap: Option<usize>,
    /// Depth-wise convolution kernel width (odd).
    pub dwc_width: usize,
    /// Performer: divide by the row-sum denominator (row-stochastic mode)
    /// instead of the literal 1/sqrt(r) scaling.
    pub performer_normalized: bool,
}

impl AttentionConfig {
    pub fn new(mechanism: Mechanism, d_model: usize, d_attn: usize, heads: usize) -> Self {
        AttentionConfig {
            mechanism,
            d_model,
            d_attn,
            heads,
            r: 64,
            p: 4,
            n_cap: None,
            dwc_width: 3,
            performer_normalized: true,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_attn / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_attn == 0 || self.heads == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.d_attn % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_attn {} not divisible by {} heads",
                self.d_attn, self.heads
            )));
        }
        if self.mechanism == Mechanism::Performer && self.r == 0 {
            return Err(Error::Config("performer requires r >= 1".into()));
        }
        if self.mechanism == Mechanism::Agent {
            if !matches!(self.p, 2 | 4 | 6) {
                return Err(Error::Config(format!(
                    "agent pooling stages p must be one of 2, 4, 6 (got {})",
                    self.p
                )));
            }
            if self.dwc_width % 2 == 0 {
                return Err(Error::Config("dwc_width must be odd".into()));
            }
            if self.n_cap == Some(0) {
                return Err(Error::Config("n_cap must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Q/K/V projection weights, `d_model x d_attn` each, with biases.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub bq: Vec<f64>,
    pub bk: Vec<f64>,
    pub bv: Vec<f64>,
}

impl ProjectionWeights {
    pub fn zeros(d_model: usize, d_attn: usize) -> Self {
        ProjectionWeights {
            wq: Matrix::zeros(d_model, d_attn),
            wk: Matrix::zeros(d_model, d_attn),
            wv: Matrix::zeros(d_model, d_attn),
            bq: vec![0.0; d_attn],
            bk: vec![0.0; d_attn],
            bv: vec![0.0; d_attn],
        }
    }
}

/// Per-head query/key/value matrices, each `N x d_head`.
#[derive(Debug, Clone)]
pub struct HeadTriplet {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Frozen performer random projection, `r x d_head`, shared across heads.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub omega: Matrix,
}

impl FeatureMap {
    pub fn new(rng: &mut SeededRng, r: usize, d_head: usize) -> Self {
        FeatureMap {
            omega: gaussian_matrix(rng, r, d_head),
        }
    }

    pub fn r(&self) -> usize {
        self.omega.rows()
    }
}

/// Everything the attention block needs at forward time.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub proj: ProjectionWeights,
    /// Depth-wise convolution kernel, `dwc_width x d_attn`; agent only.
    pub dwc_kernel: Option<Matrix>,
    /// Performer only.
    pub feature_map: Option<FeatureMap>,
}

/// Splits a projected `N x d_attn` matrix into the input X, applying
/// `X W + b` and slicing the columns contiguously into `heads` blocks.
pub fn project_qkv(
    x: &Matrix,
    w: &ProjectionWeights,
    config: &AttentionConfig,
) -> Result<Vec<HeadTriplet>> {
    if x.cols() != config.d_model {
        return Err(Error::Shape(format!(
            "input has {} columns, expected d_model {}",
            x.cols(),
            config.d_model
        )));
    }
    let q = x.matmul(&w.wq)?.add_row_broadcast(&w.bq)?;
    let k = x.matmul(&w.wk)?.add_row_broadcast(&w.bk)?;
    let v = x.matmul(&w.wv)?.add_row_broadcast(&w.bv)?;
    let d_head = config.d_head();
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        heads.push(HeadTriplet {
            q: q.slice_cols(lo, hi),
            k: k.slice_cols(lo, hi),
            v: v.slice_cols(lo, hi),
        });
    }
    Ok(heads)
}

fn zero_padded_rows(m: &mut Matrix, n_valid: usize) {
    for i in n_valid..m.rows() {
        for v in m.row_mut(i) {
            *v = 0.0;
        }
    }
}

/// Row-wise softmax Jacobian-vector product over the first `valid_cols`
/// columns: `ds = a * (da - sum(da * a))` per row.
fn softmax_backward(a: &Matrix, da: &Matrix, valid_cols: usize) -> Matrix {
    let mut ds = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let a_row = &a.row(i)[..valid_cols];
        let da_row = &da.row(i)[..valid_cols];
        let dot: f64 = a_row.iter().zip(da_row).map(|(a, d)| a * d).sum();
        let out = ds.row_mut(i);
        for j in 0..valid_cols {
            out[j] = a_row[j] * (da_row[j] - dot);
        }
    }
    ds
}

// ---------------------------------------------------------------------------
// Self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SelfAttnCache {
    pub a: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub n_valid: usize,
}

/// Scaled dot-product attention for a single head.
///
/// Returns the context (`N x d_head`, padded rows zeroed) and the
/// attention matrix (`N x N`, row-stochastic over valid columns).
pub fn self_attention(head: &HeadTriplet, mask: &BinaryMask) -> Result<(Matrix, Matrix)> {
    let (ctx, cache) = self_attention_cached(head, mask)?;
    Ok((ctx, cache.a))
}

pub fn self_attention_cached(
    head: &HeadTriplet,
    mask: &BinaryMask,
) -> Result<(Matrix, SelfAttnCache)> {
    let n = head.q.rows();
    if head.k.rows() != n || head.v.rows() != n {
        return Err(Error::Shape("head triplet row counts differ".into()));
    }
    if mask.len() != n {
        return Err(Error::Shape("mask length does not match sequence".into()));
    }
    let d_head = head.q.cols();
    // Fold the temperature into Q (N x d_head) so the N x N score
    // matrix is written once and the softmax runs in place.
    let qs = head.q.scale(1.0 / (d_head as f64).sqrt());
    let mut a = qs.matmul(&head.k.transpose())?;
    masked_row_softmax_in_place(&mut a, Some(mask))?;
    let mut ctx = a.matmul(&head.v)?;
    zero_padded_rows(&mut ctx, mask.n_valid());
    Ok((
        ctx,
        SelfAttnCache {
            a,
            q: head.q.clone(),
            k: head.k.clone(),
            v: head.v.clone(),
            n_valid: mask.n_valid(),
        },
    ))
}

/// Forward-only self-attention evaluated in row blocks: arithmetic is
/// identical to [`self_attention`] per row, but only a block of the
/// score matrix is live at a time. Used where no backward pass will
/// follow, so the full `N x N` attention matrix need not be retained.
pub fn self_attention_forward_only(head: &HeadTriplet, mask: &BinaryMask) -> Result<Matrix> {
    let n = head.q.rows();
    if head.k.rows() != n || head.v.rows() != n {
        return Err(Error::Shape("head triplet row counts differ".into()));
    }
    if mask.len() != n {
        return Err(Error::Shape("mask length does not match sequence".into()));
    }
    let d_head = head.q.cols();
    let qs = head.q.scale(1.0 / (d_head as f64).sqrt());
    let kt = head.k.transpose();
    let mut ctx = Matrix::zeros(n, d_head);
    const BLOCK: usize = 64;
    let n_valid = mask.n_valid();
    let mut i0 = 0;
    while i0 < n_valid {
        let i1 = (i0 + BLOCK).min(n_valid);
        let mut s = qs.slice_rows(i0, i1).matmul(&kt)?;
        masked_row_softmax_in_place(&mut s, Some(mask))?;
        let c = s.matmul(&head.v)?;
        for (bi, i) in (i0..i1).enumerate() {
            ctx.row_mut(i).copy_from_slice(c.row(bi));
        }
        i0 = i1;
    }
    Ok(ctx)
}

/// Gradients of a self-attention head. `d_ctx` must have zeroed padded rows.
pub fn self_attention_backward(
    cache: &SelfAttnCache,
    d_ctx: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let d_head = cache.q.cols();
    let scale = 1.0 / (d_head as f64).sqrt();
    let da = d_ctx.matmul(&cache.v.transpose())?;
    let dv = cache.a.transpose().matmul(d_ctx)?;
    let ds = softmax_backward(&cache.a, &da, cache.n_valid).scale(scale);
    let dq = ds.matmul(&cache.k)?;
    let dk = ds.transpose().matmul(&cache.q)?;
    Ok((dq, dk, dv))
}

// ---------------------------------------------------------------------------
// Performer-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PhiCache {
    /// Pre-scaled input.
    xs: Matrix,
    /// Shared max stabilizer and where it was attained.
    stabilizer: f64,
    argmax: (usize, usize),
    pub out: Matrix,
}

impl PhiCache {
    /// The shared max-subtraction constant used by this call.
    pub fn stabilizer(&self) -> f64 {
        self.stabilizer
    }
}

/// Positive random-feature map: row x maps to
/// `exp(omega (x*scale) - ||x*scale||^2/2 - s) / sqrt(r)` with `s` the
/// max of the projected values over the whole call. All outputs are
/// strictly positive.
pub fn performer_phi(m: &Matrix, fm: &FeatureMap, scale: f64) -> Result<Matrix> {
    Ok(phi_forward(m, fm, scale)?.out)
}

pub fn phi_forward(m: &Matrix, fm: &FeatureMap, scale: f64) -> Result<PhiCache> {
    if scale <= 0.0 {
        return Err(Error::InvalidArgument("phi scale must be positive".into()));
    }
    if m.cols() != fm.omega.cols() {
        return Err(Error::Shape(format!(
            "phi input dim {} vs omega dim {}",
            m.cols(),
            fm.omega.cols()
        )));
    }
    let r = fm.r();
    let xs = m.scale(scale);
    let u = xs.matmul(&fm.omega.transpose())?;
    let t: Vec<f64> = (0..xs.rows())
        .map(|i| 0.5 * xs.row(i).iter().map(|v| v * v).sum::<f64>())
        .collect();
    let mut stabilizer = f64::NEG_INFINITY;
    let mut argmax = (0, 0);
    for i in 0..u.rows() {
        for j in 0..u.cols() {
            if u.get(i, j) > stabilizer {
                stabilizer = u.get(i, j);
                argmax = (i, j);
            }
        }
    }
    let inv_sqrt_r = 1.0 / (r as f64).sqrt();
    let mut out = Matrix::zeros(u.rows(), r);
    for i in 0..u.rows() {
        for j in 0..r {
            out.set(i, j, (u.get(i, j) - t[i] - stabilizer).exp() * inv_sqrt_r);
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric("phi produced non-finite features".into()));
    }
    Ok(PhiCache {
        xs,
        stabilizer,
        argmax,
        out,
    })
}

/// Exact gradient through the feature map, including the dependence of
/// the shared stabilizer on its argmax entry. The frozen omega receives
/// no gradient.
pub fn phi_backward(cache: &PhiCache, fm: &FeatureMap, scale: f64, d_out: &Matrix) -> Result<Matrix> {
    let mut du = Matrix::zeros(d_out.rows(), d_out.cols());
    let mut ds = 0.0;
    let mut dt = vec![0.0; d_out.rows()];
    for i in 0..d_out.rows() {
        for j in 0..d_out.cols() {
            let g = d_out.get(i, j) * cache.out.get(i, j);
            du.set(i, j, g);
            ds -= g;
            dt[i] -= g;
        }
    }
    let (mi, mj) = cache.argmax;
    du.set(mi, mj, du.get(mi, mj) + ds);
    let mut dxs = du.matmul(&fm.omega)?;
    for i in 0..dxs.rows() {
        let xs_row = cache.xs.row(i).to_vec();
        for (d, x) in dxs.row_mut(i).iter_mut().zip(xs_row) {
            *d += dt[i] * x;
        }
    }
    Ok(dxs.scale(scale))
}

#[derive(Debug, Clone)]
pub struct PerformerCache {
    qp: PhiCache,
    kp: PhiCache,
    /// K'^T V, `r x d_head`.
    m: Matrix,
    /// K'^T 1, length r.
    z: Vec<f64>,
    /// Row denominators (normalized mode only).
    denom: Vec<f64>,
    ctx_valid: Matrix,
    v_valid: Matrix,
    normalized: bool,
    pub n_valid: usize,
}

/// Kernelized attention for one head, computed strictly as `Q'(K'^T V)`.
///
/// Normalized mode divides each row by `Q'(K'^T 1)`, recovering a
/// row-stochastic weighting; literal mode scales by `1/sqrt(r)`.
pub fn performer_attention(
    head: &HeadTriplet,
    fm: &FeatureMap,
    mask: &BinaryMask,
    normalized: bool,
) -> Result<Matrix> {
    Ok(performer_forward_cached(head, fm, mask, normalized)?.0)
}

pub fn performer_forward_cached(
    head: &HeadTriplet,
    fm: &FeatureMap,
    mask: &BinaryMask,
    normalized: bool,
) -> Result<(Matrix, PerformerCache)> {
    let n = head.q.rows();
    if mask.len() != n {
        return Err(Error::Shape("mask length does not match sequence".into()));
    }
    let d_head = head.q.cols();
    if fm.omega.cols() != d_head {
        return Err(Error::Shape("feature map dimension mismatch".into()));
    }
    let m_valid = mask.n_valid();
    // The stabilizers must see only real frames, so padded rows are
    // sliced away before the feature map is applied.
    let q_valid = head.q.slice_rows(0, m_valid);
    let k_valid = head.k.slice_rows(0, m_valid);
    let v_valid = head.v.slice_rows(0, m_valid);
    let scale = (d_head as f64).powf(-0.25);
    let qp = phi_forward(&q_valid, fm, scale)?;
    let kp = phi_forward(&k_valid, fm, scale)?;
    let kv = kp.out.transpose().matmul(&v_valid)?;
    let mut z = vec![0.0; fm.r()];
    for j in 0..m_valid {
        for (acc, v) in z.iter_mut().zip(kp.out.row(j)) {
            *acc += v;
        }
    }
    let num = qp.out.matmul(&kv)?;
    let mut denom = Vec::new();
    let ctx_valid = if normalized {
        denom = (0..m_valid)
            .map(|i| qp.out.row(i).iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        if denom.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Numeric(
                "performer denominator not strictly positive".into(),
            ));
        }
        let mut ctx = num;
        for i in 0..m_valid {
            let d = denom[i];
            for v in ctx.row_mut(i) {
                *v /= d;
            }
        }
        ctx
    } else {
        num.scale(1.0 / (fm.r() as f64).sqrt())
    };
    let ctx_full = ctx_valid.pad_rows(n);
    Ok((
        ctx_full,
        PerformerCache {
            qp,
            kp,
            m: kv,
            z,
            denom,
            ctx_valid,
            v_valid,
            normalized,
            n_valid: m_valid,
        },
    ))
}

/// Gradients of a performer head with respect to the valid-prefix Q, K, V.
pub fn performer_backward(
    cache: &PerformerCache,
    fm: &FeatureMap,
    d_ctx_valid: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let m_valid = cache.n_valid;
    let r = fm.r();
    let d_head = fm.omega.cols();
    let scale = (d_head as f64).powf(-0.25);

    let (d_num, d_denom) = if cache.normalized {
        let mut d_num = Matrix::zeros(m_valid, d_ctx_valid.cols());
        let mut d_denom = vec![0.0; m_valid];
        for i in 0..m_valid {
            let d = cache.denom[i];
            let mut dot = 0.0;
            for j in 0..d_ctx_valid.cols() {
                d_num.set(i, j, d_ctx_valid.get(i, j) / d);
                dot += cache.ctx_valid.get(i, j) * d_ctx_valid.get(i, j);
            }
            d_denom[i] = -dot / d;
        }
        (d_num, d_denom)
    } else {
        (d_ctx_valid.scale(1.0 / (r as f64).sqrt()), vec![0.0; m_valid])
    };

    // num = Q' M, denom_i = Q'_i . z
    let mut d_qp = d_num.matmul(&cache.m.transpose())?;
    for i in 0..m_valid {
        let dd = d_denom[i];
        for (g, z) in d_qp.row_mut(i).iter_mut().zip(&cache.z) {
            *g += dd * z;
        }
    }
    let d_m = cache.qp.out.transpose().matmul(&d_num)?;
    let mut d_z = vec![0.0; r];
    for i in 0..m_valid {
        let dd = d_denom[i];
        for (acc, q) in d_z.iter_mut().zip(cache.qp.out.row(i)) {
            *acc += dd * q;
        }
    }
    // M = K'^T V, z = K'^T 1
    let mut d_kp = cache.v_valid.matmul(&d_m.transpose())?;
    for i in 0..m_valid {
        for (g, dz) in d_kp.row_mut(i).iter_mut().zip(&d_z) {
            *g += dz;
        }
    }
    let d_v = cache.kp.out.matmul(&d_m)?;

    let d_q = phi_backward(&cache.qp, fm, scale, &d_qp)?;
    let d_k = phi_backward(&cache.kp, fm, scale, &d_kp)?;
    Ok((d_q, d_k, d_v))
}

// ---------------------------------------------------------------------------
// Agent-attention
// ---------------------------------------------------------------------------

/// Agent matrix plus the aggregated values from the first stage.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub g: Matrix,
    pub va: Matrix,
    pub n: usize,
}

/// Linear operator realizing the pair-mean pooling stages, `n x n_valid`.
///
/// Each stage averages consecutive row pairs; an odd trailing row passes
/// through unchanged. After `p/2` stages the row count is truncated to
/// `max(1, floor(n_valid / 2^(p/2)))`. With `n_cap` set, further stages
/// run until the count is at most the cap.
pub fn pooling_matrix(n_valid: usize, p: usize, n_cap: Option<usize>) -> Result<Matrix> {
    if p <= 1 || p % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "agent pooling p must be even and > 1 (got {})",
            p
        )));
    }
    // Rows stay sparse during construction: consecutive pair-means only
    // ever touch disjoint contiguous column ranges, so a stage is just a
    // halved-weight concatenation. Building dense identity rows instead
    // would make this quadratic in the sequence length.
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n_valid).map(|i| vec![(i, 1.0)]).collect();
    let stage = |rows: &[Vec<(usize, f64)>]| -> Vec<Vec<(usize, f64)>> {
        rows.chunks(2)
            .map(|pair| {
                if pair.len() == 2 {
                    pair[0]
                        .iter()
                        .chain(pair[1].iter())
                        .map(|&(c, w)| (c, 0.5 * w))
                        .collect()
                } else {
                    pair[0].clone()
                }
            })
            .collect()
    };
    for _ in 0..p / 2 {
        rows = stage(&rows);
    }
    let target = (n_valid >> (p / 2)).max(1);
    rows.truncate(target);
    if let Some(cap) = n_cap {
        while rows.len() > cap {
            rows = stage(&rows);
        }
    }
    let mut pool = Matrix::zeros(rows.len(), n_valid);
    for (i, row) in rows.iter().enumerate() {
        for &(c, w) in row {
            pool.set(i, c, w);
        }
    }
    Ok(pool)
}

/// Pools the query matrix into the agent matrix G.
pub fn agent_pool(
    q: &Matrix,
    p: usize,
    mask: &BinaryMask,
    n_cap: Option<usize>,
) -> Result<Matrix> {
    if mask.len() != q.rows() {
        return Err(Error::Shape("mask length does not match query rows".into()));
    }
    let pool = pooling_matrix(mask.n_valid(), p, n_cap)?;
    pool.matmul(&q.slice_rows(0, mask.n_valid()))
}

#[derive(Debug, Clone)]
pub struct AgentCache {
    pool: Matrix,
    g: Matrix,
    a1: Matrix,
    a2: Matrix,
    va: Matrix,
    q_valid: Matrix,
    k_valid: Matrix,
    v_valid: Matrix,
    pub n_valid: usize,
}

/// Two-stage agent attention with a depth-wise convolution residual.
pub fn agent_attention(
    head: &HeadTriplet,
    p: usize,
    dwc_kernel: &Matrix,
    mask: &BinaryMask,
    n_cap: Option<usize>,
) -> Result<Matrix> {
    Ok(agent_forward_cached(head, p, dwc_kernel, mask, n_cap)?.0)
}

pub fn agent_forward_cached(
    head: &HeadTriplet,
    p: usize,
    dwc_kernel: &Matrix,
    mask: &BinaryMask,
    n_cap: Option<usize>,
) -> Result<(Matrix, AgentCache)> {
    let n = head.q.rows();
    if mask.len() != n {
        return Err(Error::Shape("mask length does not match sequence".into()));
    }
    let m_valid = mask.n_valid();
    let d_head = head.q.cols();
    let scale = 1.0 / (d_head as f64).sqrt();
    let q_valid = head.q.slice_rows(0, m_valid);
    let k_valid = head.k.slice_rows(0, m_valid);
    let v_valid = head.v.slice_rows(0, m_valid);

    let pool = pooling_matrix(m_valid, p, n_cap)?;
    let g = pool.matmul(&q_valid)?;

    // Aggregation: agents attend over the (valid) keys.
    let s1 = g.matmul(&k_valid.transpose())?.scale(scale);
    let a1 = masked_row_softmax(&s1, None)?;
    let va = a1.matmul(&v_valid)?;

    // Broadcast: queries attend over the agents. All agent rows are
    // pooled from real frames, so no mask applies here.
    let s2 = q_valid.matmul(&g.transpose())?.scale(scale);
    let a2 = masked_row_softmax(&s2, None)?;
    let ca = a2.matmul(&va)?;

    let valid_mask = BinaryMask::all_valid(m_valid)?;
    let dwc = depthwise_conv1d(&v_valid, dwc_kernel, &valid_mask)?;
    let ctx_valid = ca.add(&dwc)?;
    let ctx_full = ctx_valid.pad_rows(n);
    Ok((
        ctx_full,
        AgentCache {
            pool,
            g,
            a1,
            a2,
            va,
            q_valid,
            k_valid,
            v_valid,
            n_valid: m_valid,
        },
    ))
}

/// Gradient of the depth-wise convolution with respect to its input.
fn dwc_backward_input(d_out: &Matrix, kernel: &Matrix, n_valid: usize) -> Matrix {
    let width = kernel.rows();
    let half = width / 2;
    let mut dv = Matrix::zeros(d_out.rows(), d_out.cols());
    for s in 0..n_valid {
        for a in 0..width {
            let i = s as isize - a as isize + half as isize;
            if i < 0 || i as usize >= n_valid {
                continue;
            }
            let i = i as usize;
            for c in 0..d_out.cols() {
                let acc = dv.get(s, c) + kernel.get(a, c) * d_out.get(i, c);
                dv.set(s, c, acc);
            }
        }
    }
    dv
}

/// Gradient of the depth-wise convolution with respect to its kernel.
fn dwc_backward_kernel(d_out: &Matrix, v: &Matrix, width: usize, n_valid: usize) -> Matrix {
    let half = width / 2;
    let mut dk = Matrix::zeros(width, v.cols());
    for i in 0..n_valid {
        for a in 0..width {
            let s = i as isize + a as isize - half as isize;
            if s < 0 || s as usize >= n_valid {
                continue;
            }
            let s = s as usize;
            for c in 0..v.cols() {
                let acc = dk.get(a, c) + d_out.get(i, c) * v.get(s, c);
                dk.set(a, c, acc);
            }
        }
    }
    dk
}

/// Gradients of an agent head with respect to the valid-prefix Q, K, V
/// and the depth-wise convolution kernel columns this head touches.
pub fn agent_backward(
    cache: &AgentCache,
    dwc_kernel: &Matrix,
    d_ctx_valid: &Matrix,
) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
    let d_head = cache.q_valid.cols();
    let scale = 1.0 / (d_head as f64).sqrt();
    let m_valid = cache.n_valid;
    let agent_n = cache.g.rows();

    let mut dv = dwc_backward_input(d_ctx_valid, dwc_kernel, m_valid);
    let d_kernel = dwc_backward_kernel(d_ctx_valid, &cache.v_valid, dwc_kernel.rows(), m_valid);

    // Broadcast stage.
    let da2 = d_ctx_valid.matmul(&cache.va.transpose())?;
    let dva = cache.a2.transpose().matmul(d_ctx_valid)?;
    let ds2 = softmax_backward(&cache.a2, &da2, agent_n).scale(scale);
    let mut dq = ds2.matmul(&cache.g)?;
    let mut dg = ds2.transpose().matmul(&cache.q_valid)?;

    // Aggregation stage.
    let da1 = dva.matmul(&cache.v_valid.transpose())?;
    dv.add_scaled_assign(&cache.a1.transpose().matmul(&dva)?, 1.0)?;
    let ds1 = softmax_backward(&cache.a1, &da1, m_valid).scale(scale);
    dg.add_scaled_assign(&ds1.matmul(&cache.k_valid)?, 1.0)?;
    let dk = ds1.transpose().matmul(&cache.g)?;

    // Pooling is linear in Q.
    dq.add_scaled_assign(&cache.pool.transpose().matmul(&dg)?, 1.0)?;
    Ok((dq, dk, dv, d_kernel))
}

// ---------------------------------------------------------------------------
// Multi-head dispatch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum HeadCache {
    SelfAttn(SelfAttnCache),
    Performer(PerformerCache),
    Agent(AgentCache),
}

#[derive(Debug, Clone)]
pub struct MhCache {
    pub heads: Vec<HeadCache>,
    pub n: usize,
    pub n_valid: usize,
}

/// Gradients flowing out of the attention block.
#[derive(Debug, Clone)]
pub struct MhGrads {
    /// `N x d_attn`, padded rows zero.
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    /// Full-width kernel gradient; agent only.
    pub d_dwc: Option<Matrix>,
}

/// Runs the configured mechanism on every head and concatenates the
/// per-head contexts into an `N x d_attn` context matrix with padded
/// rows exactly zero.
pub fn multi_head_forward(
    x: &Matrix,
    params: &AttentionParams,
    config: &AttentionConfig,
    mask: &BinaryMask,
) -> Result<Matrix> {
    if config.mechanism == Mechanism::SelfAttn {
        // Inference needs no attention matrix; the blocked evaluation
        // avoids holding N x N scores.
        config.validate()?;
        if mask.len() != x.rows() {
            return Err(Error::Shape("mask length does not match input rows".into()));
        }
        let triplets = project_qkv(x, &params.proj, config)?;
        let contexts = triplets
            .iter()
            .map(|t| self_attention_forward_only(t, mask))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = contexts.iter().collect();
        return Matrix::hconcat(&refs);
    }
    Ok(multi_head_forward_cached(x, params, config, mask)?.0)
}

pub fn multi_head_forward_cached(
    x: &Matrix,
    params: &AttentionParams,
    config: &AttentionConfig,
    mask: &BinaryMask,
) -> Result<(Matrix, MhCache)> {
    config.validate()?;
    if mask.len() != x.rows() {
        return Err(Error::Shape("mask length does not match input rows".into()));
    }
    let triplets = project_qkv(x, &params.proj, config)?;
    let d_head = config.d_head();
    let mut contexts = Vec::with_capacity(config.heads);
    let mut caches = Vec::with_capacity(config.heads);
    for (h, triplet) in triplets.iter().enumerate() {
        let (ctx, cache) = match config.mechanism {
            Mechanism::SelfAttn => {
                let (ctx, cache) = self_attention_cached(triplet, mask)?;
                (ctx, HeadCache::SelfAttn(cache))
            }
            Mechanism::Performer => {
                let fm = params
                    .feature_map
                    .as_ref()
                    .ok_or_else(|| Error::Config("performer requires a feature map".into()))?;
                let (ctx, cache) =
                    performer_forward_cached(triplet, fm, mask, config.performer_normalized)?;
                (ctx, HeadCache::Performer(cache))
            }
            Mechanism::Agent => {
                let kernel = params
                    .dwc_kernel
                    .as_ref()
                    .ok_or_else(|| Error::Config("agent requires a dwc kernel".into()))?;
                let head_kernel = kernel.slice_cols(h * d_head, (h + 1) * d_head);
                let (ctx, cache) =
                    agent_forward_cached(triplet, config.p, &head_kernel, mask, config.n_cap)?;
                (ctx, HeadCache::Agent(cache))
            }
        };
        contexts.push(ctx);
        caches.push(cache);
    }
    let refs: Vec<&Matrix> = contexts.iter().collect();
    let full = Matrix::hconcat(&refs)?;
    Ok((
        full,
        MhCache {
            heads: caches,
            n: x.rows(),
            n_valid: mask.n_valid(),
        },
    ))
}

/// Backward through every head given the gradient of the concatenated
/// context (`N x d_attn`, padded rows zero).
pub fn multi_head_backward(
    cache: &MhCache,
    params: &AttentionParams,
    config: &AttentionConfig,
    d_ctx: &Matrix,
) -> Result<MhGrads> {
    let d_head = config.d_head();
    let n = cache.n;
    let mut dq_parts = Vec::with_capacity(config.heads);
    let mut dk_parts = Vec::with_capacity(config.heads);
    let mut dv_parts = Vec::with_capacity(config.heads);
    let mut d_dwc: Option<Matrix> = None;
    for (h, head_cache) in cache.heads.iter().enumerate() {
        let d_ctx_head = d_ctx.slice_cols(h * d_head, (h + 1) * d_head);
        match head_cache {
            HeadCache::SelfAttn(c) => {
                let (dq, dk, dv) = self_attention_backward(c, &d_ctx_head)?;
                dq_parts.push(dq);
                dk_parts.push(dk);
                dv_parts.push(dv);
            }
            HeadCache::Performer(c) => {
                let fm = params
                    .feature_map
                    .as_ref()
                    .ok_or_else(|| Error::Config("performer requires a feature map".into()))?;
                let d_valid = d_ctx_head.slice_rows(0, c.n_valid);
                let (dq, dk, dv) = performer_backward(c, fm, &d_valid)?;
                dq_parts.push(dq.pad_rows(n));
                dk_parts.push(dk.pad_rows(n));
                dv_parts.push(dv.pad_rows(n));
            }
            HeadCache::Agent(c) => {
                let kernel = params
                    .dwc_kernel
                    .as_ref()
                    .ok_or_else(|| Error::Config("agent requires a dwc kernel".into()))?;
                let head_kernel = kernel.slice_cols(h * d_head, (h + 1) * d_head);
                let d_valid = d_ctx_head.slice_rows(0, c.n_valid);
                let (dq, dk, dv, dker) = agent_backward(c, &head_kernel, &d_valid)?;
                dq_parts.push(dq.pad_rows(n));
                dk_parts.push(dk.pad_rows(n));
                dv_parts.push(dv.pad_rows(n));
                let full = d_dwc
                    .get_or_insert_with(|| Matrix::zeros(kernel.rows(), kernel.cols()));
                for a in 0..dker.rows() {
                    for c2 in 0..dker.cols() {
                        let col = h * d_head + c2;
                        full.set(a, col, full.get(a, col) + dker.get(a, c2));
                    }
                }
            }
        }
    }
    let dq = Matrix::hconcat(&dq_parts.iter().collect::<Vec<_>>())?;
    let dk = Matrix::hconcat(&dk_parts.iter().collect::<Vec<_>>())?;
    let dv = Matrix::hconcat(&dv_parts.iter().collect::<Vec<_>>())?;
    Ok(MhGrads { dq, dk, dv, d_dwc })
}
