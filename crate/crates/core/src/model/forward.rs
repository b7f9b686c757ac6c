//! Batched forward and backward passes.
//!
//! Activations are [N, d] row-major matrices with N = n_rows * t_len. All
//! parallel loops write disjoint regions and reduce in a fixed order, so
//! results are bit-identical across runs for a given seed.

use super::{EncodedBatch, Grads, ModelConfig, ModelState, Params};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_a_bt_into, matmul_at_b_into, par_for, Mat, Real, SendPtr};
use crate::rng::{derive_seed, SplitMix64};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    /// Dropout active, activations cached for backward.
    Train { dropout_seed: u64 },
    /// Dropout off, no cache retained.
    Eval,
}

impl Phase {
    fn is_train(self) -> bool {
        matches!(self, Phase::Train { .. })
    }
}

/// Per-layer, per-head attention probabilities for a batch of rows,
/// stored row-major as [row, layer, head, i, j].
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    pub n_rows: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub t_len: usize,
    pub data: Vec<f32>,
}

impl AttentionCapture {
    pub fn mat(&self, row: usize, layer: usize, head: usize) -> &[f32] {
        let t = self.t_len;
        let idx = ((row * self.n_layers + layer) * self.n_heads + head) * t * t;
        &self.data[idx..idx + t * t]
    }
}

pub struct ForwardOut<F> {
    pub loss: F,
    pub per_row: Vec<F>,
    pub capture: Option<AttentionCapture>,
}

pub(crate) struct LnCache<F> {
    pub norm: Mat<F>,
    pub inv_std: Vec<F>,
    pub out: Mat<F>,
}

pub(crate) struct LayerCache<F> {
    pub ln1: LnCache<F>,
    pub q: Mat<F>,
    pub k: Mat<F>,
    pub v: Mat<F>,
    /// [row, head, i, j] attention probabilities.
    pub probs: Vec<F>,
    pub ctx: Mat<F>,
    pub attn_mask: Option<Vec<F>>,
    pub ln2: LnCache<F>,
    pub h_pre: Mat<F>,
    pub h_act: Mat<F>,
    pub ffn_mask: Option<Vec<F>>,
}

/// Everything after the embedding lookup.
pub(crate) struct BodyCache<F> {
    pub emb_mask: Option<Vec<F>>,
    pub layers: Vec<LayerCache<F>>,
    pub lnf: LnCache<F>,
}

/// Full train-mode cache consumed by `backward`.
pub(crate) struct Cache<F> {
    pub n_rows: usize,
    pub t_len: usize,
    pub tokens: Vec<u32>,
    pub body: BodyCache<F>,
    pub dlogits: Mat<F>,
}

impl<F: Real> std::fmt::Debug for Cache<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Cache(n_rows={}, t_len={})", self.n_rows, self.t_len)
    }
}

fn for_rows_mut<F: Real>(m: &mut Mat<F>, grain: usize, f: impl Fn(usize, &mut [F]) + Sync + Send) {
    let cols = m.cols;
    let ptr = SendPtr(m.data.as_mut_ptr());
    par_for(m.rows, grain, move |r| {
        let row = unsafe { ptr.slice_mut(r * cols, cols) };
        f(r, row);
    });
}

fn for_rows_mut_read<F: Real>(
    dst: &mut Mat<F>,
    src: &Mat<F>,
    grain: usize,
    f: impl Fn(usize, &mut [F], &[F]) + Sync + Send,
) {
    assert_eq!(dst.rows, src.rows);
    let (dc, sc) = (dst.cols, src.cols);
    let ptr = SendPtr(dst.data.as_mut_ptr());
    let src_ref = &src.data;
    par_for(dst.rows, grain, move |r| {
        let row = unsafe { ptr.slice_mut(r * dc, dc) };
        f(r, row, &src_ref[r * sc..(r + 1) * sc]);
    });
}

/// Dropout mask with inverted scaling: entries are 0 or 1/(1-p). Sampling is
/// seeded per (site, row), so masks do not depend on scheduling.
fn sample_mask<F: Real>(n_rows: usize, cols: usize, p: f64, seed: u64, site: u64) -> Vec<F> {
    let mut mask = vec![F::zero(); n_rows * cols];
    let keep = F::from_f64(1.0 / (1.0 - p));
    let ptr = SendPtr(mask.as_mut_ptr());
    par_for(n_rows, 16, move |r| {
        let row = unsafe { ptr.slice_mut(r * cols, cols) };
        let mut rng = SplitMix64::new(derive_seed(seed, site * 0x1_0000_0000 + r as u64));
        for v in row.iter_mut() {
            *v = if rng.next_f64() < p { F::zero() } else { keep };
        }
    });
    mask
}

fn apply_mask<F: Real>(m: &mut Mat<F>, mask: &[F]) {
    let cols = m.cols;
    let ptr = SendPtr(m.data.as_mut_ptr());
    par_for(m.rows, 64, move |r| {
        let row = unsafe { ptr.slice_mut(r * cols, cols) };
        for (v, &k) in row.iter_mut().zip(&mask[r * cols..(r + 1) * cols]) {
            *v *= k;
        }
    });
}

fn layer_norm<F: Real>(x: &Mat<F>, gain: &Mat<F>, bias: &Mat<F>) -> LnCache<F> {
    let (n, d) = (x.rows, x.cols);
    let mut norm = Mat::zeros(n, d);
    let mut out = Mat::zeros(n, d);
    let mut inv_std = vec![F::zero(); n];
    let eps = F::from_f64(LN_EPS);
    let dn = F::from_f64(d as f64);
    let np = SendPtr(norm.data.as_mut_ptr());
    let op = SendPtr(out.data.as_mut_ptr());
    let ip = SendPtr(inv_std.as_mut_ptr());
    let (g, b) = (&gain.data, &bias.data);
    par_for(n, 64, move |r| {
        let xr = &x.data[r * d..(r + 1) * d];
        let nr = unsafe { np.slice_mut(r * d, d) };
        let or = unsafe { op.slice_mut(r * d, d) };
        let mean = xr.iter().copied().sum::<F>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
        let inv = (var + eps).sqrt().recip();
        unsafe { *ip.slice_mut(r, 1).get_unchecked_mut(0) = inv };
        for i in 0..d {
            let nv = (xr[i] - mean) * inv;
            nr[i] = nv;
            or[i] = nv * g[i] + b[i];
        }
    });
    LnCache { norm, inv_std, out }
}

/// Backward through layer norm. Returns d_input; accumulates d_gain/d_bias.
fn layer_norm_bwd<F: Real>(
    cache: &LnCache<F>,
    gain: &Mat<F>,
    d_out: &Mat<F>,
    d_gain: &mut Mat<F>,
    d_bias: &mut Mat<F>,
) -> Mat<F> {
    let (n, d) = (cache.norm.rows, cache.norm.cols);
    // Parameter gradients: fixed-order serial reduction over rows.
    for r in 0..n {
        let dor = d_out.row(r);
        let nr = cache.norm.row(r);
        for i in 0..d {
            d_gain.data[i] += dor[i] * nr[i];
            d_bias.data[i] += dor[i];
        }
    }
    let mut dx = Mat::zeros(n, d);
    let dn = F::from_f64(d as f64);
    let ptr = SendPtr(dx.data.as_mut_ptr());
    let g = &gain.data;
    par_for(n, 64, move |r| {
        let dor = &d_out.data[r * d..(r + 1) * d];
        let nr = &cache.norm.data[r * d..(r + 1) * d];
        let inv = cache.inv_std[r];
        let dxr = unsafe { ptr.slice_mut(r * d, d) };
        let mut sum_dn = F::zero();
        let mut sum_dnn = F::zero();
        for i in 0..d {
            let dni = dor[i] * g[i];
            sum_dn += dni;
            sum_dnn += dni * nr[i];
        }
        let a = sum_dn / dn;
        let b = sum_dnn / dn;
        for i in 0..d {
            let dni = dor[i] * g[i];
            dxr[i] = inv * (dni - a - nr[i] * b);
        }
    });
    dx
}

fn add_bias<F: Real>(m: &mut Mat<F>, bias: &Mat<F>) {
    let b = &bias.data;
    for_rows_mut(m, 64, move |_, row| {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    });
}

fn bias_grad<F: Real>(d_out: &Mat<F>, d_bias: &mut Mat<F>) {
    for r in 0..d_out.rows {
        for (g, &v) in d_bias.data.iter_mut().zip(d_out.row(r)) {
            *g += v;
        }
    }
}

fn residual_add<F: Real>(x: &mut Mat<F>, branch: &Mat<F>) {
    for_rows_mut_read(x, branch, 64, |_, xr, br| {
        for (a, &b) in xr.iter_mut().zip(br) {
            *a += b;
        }
    });
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Token + positional embedding lookup: x[n] = wte[token_n] + wpe[n % t_len].
pub(crate) fn embed<F: Real>(params: &Params<F>, tokens: &[u32], t_len: usize) -> Mat<F> {
    let d = params.wte.cols;
    let n = tokens.len();
    let mut x = Mat::zeros(n, d);
    let ptr = SendPtr(x.data.as_mut_ptr());
    let (wte, wpe) = (&params.wte, &params.wpe);
    par_for(n, 256, move |i| {
        let row = unsafe { ptr.slice_mut(i * d, d) };
        let te = wte.row(tokens[i] as usize);
        let pe = wpe.row(i % t_len);
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    });
    x
}

struct AttnShape {
    n_rows: usize,
    t_len: usize,
    n_heads: usize,
    head_dim: usize,
}

/// Causal multi-head attention: fills probs ([row, head, i, j]) and ctx.
fn attention_fwd<F: Real>(q: &Mat<F>, k: &Mat<F>, v: &Mat<F>, shape: &AttnShape, probs: &mut [F], ctx: &mut Mat<F>) {
    let AttnShape { n_rows, t_len, n_heads, head_dim } = *shape;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let d = q.cols;
    let pp = SendPtr(probs.as_mut_ptr());
    let cp = SendPtr(ctx.data.as_mut_ptr());
    par_for(n_rows, 1, move |b| {
        let base = b * t_len;
        let pr = unsafe { pp.slice_mut(b * n_heads * t_len * t_len, n_heads * t_len * t_len) };
        let cr = unsafe { cp.slice_mut(base * d, t_len * d) };
        for h in 0..n_heads {
            let hoff = h * head_dim;
            for i in 0..t_len {
                let qi = &q.data[(base + i) * d + hoff..(base + i) * d + hoff + head_dim];
                let row = &mut pr[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                let mut maxv = F::neg_infinity();
                for j in 0..=i {
                    let kj = &k.data[(base + j) * d + hoff..(base + j) * d + hoff + head_dim];
                    let mut s = F::zero();
                    for t in 0..head_dim {
                        s += qi[t] * kj[t];
                    }
                    let s = s * scale;
                    row[j] = s;
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut denom = F::zero();
                for j in 0..=i {
                    let e = (row[j] - maxv).exp();
                    row[j] = e;
                    denom += e;
                }
                let inv = denom.recip();
                for j in 0..=i {
                    row[j] *= inv;
                }
                for j in i + 1..t_len {
                    row[j] = F::zero();
                }
                // ctx_i = sum_j p_ij * v_j
                let ci = &mut cr[i * d + hoff..i * d + hoff + head_dim];
                ci.iter_mut().for_each(|x| *x = F::zero());
                for j in 0..=i {
                    let pij = row[j];
                    if pij == F::zero() {
                        continue;
                    }
                    let vj = &v.data[(base + j) * d + hoff..(base + j) * d + hoff + head_dim];
                    for t in 0..head_dim {
                        ci[t] += pij * vj[t];
                    }
                }
            }
        }
    });
}

/// Backward through attention. `d_extra` optionally injects an objective
/// gradient on the attention probabilities themselves.
#[allow(clippy::too_many_arguments)]
fn attention_bwd<F: Real>(
    cache: &LayerCache<F>,
    shape: &AttnShape,
    d_ctx: &Mat<F>,
    d_extra: Option<&[F]>,
    d_q: &mut Mat<F>,
    d_k: &mut Mat<F>,
    d_v: &mut Mat<F>,
) {
    let AttnShape { n_rows, t_len, n_heads, head_dim } = *shape;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let d = d_ctx.cols;
    let dqp = SendPtr(d_q.data.as_mut_ptr());
    let dkp = SendPtr(d_k.data.as_mut_ptr());
    let dvp = SendPtr(d_v.data.as_mut_ptr());
    let (q, k, v, probs) = (&cache.q, &cache.k, &cache.v, &cache.probs);
    par_for(n_rows, 1, move |b| {
        let base = b * t_len;
        let dqr = unsafe { dqp.slice_mut(base * d, t_len * d) };
        let dkr = unsafe { dkp.slice_mut(base * d, t_len * d) };
        let dvr = unsafe { dvp.slice_mut(base * d, t_len * d) };
        let mut dp = vec![F::zero(); t_len];
        for h in 0..n_heads {
            let hoff = h * head_dim;
            for i in 0..t_len {
                let poff = ((b * n_heads + h) * t_len + i) * t_len;
                let prow = &probs[poff..poff + t_len];
                let dci = &d_ctx.data[(base + i) * d + hoff..(base + i) * d + hoff + head_dim];
                // d_p and d_v
                for j in 0..=i {
                    let vj = &v.data[(base + j) * d + hoff..(base + j) * d + hoff + head_dim];
                    let mut s = F::zero();
                    for t in 0..head_dim {
                        s += dci[t] * vj[t];
                    }
                    if let Some(extra) = d_extra {
                        s += extra[poff + j];
                    }
                    dp[j] = s;
                    let pij = prow[j];
                    let dvj = &mut dvr[j * d + hoff..j * d + hoff + head_dim];
                    for t in 0..head_dim {
                        dvj[t] += pij * dci[t];
                    }
                }
                // softmax backward
                let mut dot = F::zero();
                for j in 0..=i {
                    dot += prow[j] * dp[j];
                }
                let qi = &q.data[(base + i) * d + hoff..(base + i) * d + hoff + head_dim];
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let kj = &k.data[(base + j) * d + hoff..(base + j) * d + hoff + head_dim];
                    let dqi = &mut dqr[i * d + hoff..i * d + hoff + head_dim];
                    for t in 0..head_dim {
                        dqi[t] += ds * kj[t];
                    }
                    let dkj = &mut dkr[j * d + hoff..j * d + hoff + head_dim];
                    for t in 0..head_dim {
                        dkj[t] += ds * qi[t];
                    }
                }
            }
        }
    });
}

/// Runs every transformer block plus the final layer norm.
/// `x` is consumed as the layer-0 input (embedding output, pre-dropout).
pub(crate) fn body_forward<F: Real>(
    params: &Params<F>,
    cfg: &ModelConfig,
    mut x: Mat<F>,
    n_rows: usize,
    t_len: usize,
    phase: Phase,
    capture: bool,
) -> Result<(BodyCache<F>, Option<AttentionCapture>)> {
    let d = cfg.d_emb;
    let shape = AttnShape { n_rows, t_len, n_heads: cfg.n_heads, head_dim: cfg.head_dim() };
    let dropout = cfg.dropout;
    let dseed = match phase {
        Phase::Train { dropout_seed } => dropout_seed,
        Phase::Eval => 0,
    };
    let use_dropout = phase.is_train() && dropout > 0.0;
    let n = n_rows * t_len;

    let emb_mask = if use_dropout {
        let mask = sample_mask(n, d, dropout, dseed, 0);
        apply_mask(&mut x, &mask);
        Some(mask)
    } else {
        None
    };

    let mut cap = capture.then(|| AttentionCapture {
        n_rows,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        t_len,
        data: vec![0.0; n_rows * cfg.n_layers * cfg.n_heads * t_len * t_len],
    });

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let ln1 = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let mut q = Mat::zeros(n, d);
        let mut k = Mat::zeros(n, d);
        let mut v = Mat::zeros(n, d);
        matmul(&mut q, &ln1.out, &lp.wq);
        add_bias(&mut q, &lp.bq);
        matmul(&mut k, &ln1.out, &lp.wk);
        add_bias(&mut k, &lp.bk);
        matmul(&mut v, &ln1.out, &lp.wv);
        add_bias(&mut v, &lp.bv);

        let mut probs = vec![F::zero(); n_rows * cfg.n_heads * t_len * t_len];
        let mut ctx = Mat::zeros(n, d);
        attention_fwd(&q, &k, &v, &shape, &mut probs, &mut ctx);
        if let Some(c) = cap.as_mut() {
            let stride = cfg.n_heads * t_len * t_len;
            for b in 0..n_rows {
                let dst = ((b * cfg.n_layers) + li) * stride;
                for (o, &p) in c.data[dst..dst + stride].iter_mut().zip(&probs[b * stride..(b + 1) * stride]) {
                    *o = p.as_f64() as f32;
                }
            }
        }

        let mut attn_out = Mat::zeros(n, d);
        matmul(&mut attn_out, &ctx, &lp.wo);
        add_bias(&mut attn_out, &lp.bo);
        let attn_mask = if use_dropout {
            let mask = sample_mask(n, d, dropout, dseed, 1 + 2 * li as u64);
            apply_mask(&mut attn_out, &mask);
            Some(mask)
        } else {
            None
        };
        residual_add(&mut x, &attn_out);

        let ln2 = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
        let mut h_pre = Mat::zeros(n, cfg.d_ffn);
        matmul(&mut h_pre, &ln2.out, &lp.w1);
        add_bias(&mut h_pre, &lp.b1);
        let mut h_act = Mat::zeros(n, cfg.d_ffn);
        for_rows_mut_read(&mut h_act, &h_pre, 32, |_, act, pre| {
            for (a, &p) in act.iter_mut().zip(pre) {
                *a = gelu(p);
            }
        });
        let mut ffn_out = Mat::zeros(n, d);
        matmul(&mut ffn_out, &h_act, &lp.w2);
        add_bias(&mut ffn_out, &lp.b2);
        let ffn_mask = if use_dropout {
            let mask = sample_mask(n, d, dropout, dseed, 2 + 2 * li as u64);
            apply_mask(&mut ffn_out, &mask);
            Some(mask)
        } else {
            None
        };
        residual_add(&mut x, &ffn_out);

        layers.push(LayerCache { ln1, q, k, v, probs, ctx, attn_mask, ln2, h_pre, h_act, ffn_mask });
    }

    let lnf = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    if !lnf.out.all_finite() {
        return Err(Error::NumericOverflow("activations"));
    }
    Ok((BodyCache { emb_mask, layers, lnf }, cap))
}

pub(crate) fn logits<F: Real>(params: &Params<F>, body: &BodyCache<F>) -> Mat<F> {
    let mut out = Mat::zeros(body.lnf.out.rows, params.head.cols);
    matmul(&mut out, &body.lnf.out, &params.head);
    out
}

/// Next-token cross-entropy over masked positions. Returns (mean loss,
/// per-row mean loss, dlogits if requested). dlogits carries the global
/// 1/total_masked scaling.
pub(crate) fn hard_loss<F: Real>(
    logits: &Mat<F>,
    tokens: &[u32],
    mask: &[bool],
    n_rows: usize,
    t_len: usize,
    want_grad: bool,
) -> Result<(F, Vec<F>, Option<Mat<F>>)> {
    let vs = logits.cols;
    let total_masked: usize = mask.iter().filter(|&&b| b).count();
    if total_masked == 0 {
        let d = want_grad.then(|| Mat::zeros(logits.rows, vs));
        return Ok((F::zero(), vec![F::zero(); n_rows], d));
    }
    let inv_total = F::from_f64(1.0 / total_masked as f64);
    let mut per_row = vec![F::zero(); n_rows];
    let mut dlogits = want_grad.then(|| Mat::zeros(logits.rows, vs));
    let prp = SendPtr(per_row.as_mut_ptr());
    let dlp = dlogits.as_mut().map(|m| SendPtr(m.data.as_mut_ptr()));
    par_for(n_rows, 4, move |r| {
        let mut sum = F::zero();
        let mut count = 0usize;
        for p in 0..t_len {
            let np = r * t_len + p;
            if !mask[np] {
                continue;
            }
            debug_assert!(p + 1 < t_len);
            let target = tokens[np + 1] as usize;
            let lrow = &logits.data[np * vs..(np + 1) * vs];
            let mut maxv = F::neg_infinity();
            for &v in lrow {
                if v > maxv {
                    maxv = v;
                }
            }
            let mut denom = F::zero();
            for &v in lrow {
                denom += (v - maxv).exp();
            }
            let log_denom = denom.ln();
            let logp = lrow[target] - maxv - log_denom;
            sum -= logp;
            count += 1;
            if let Some(dl) = dlp {
                let drow = unsafe { dl.slice_mut(np * vs, vs) };
                let inv_denom = denom.recip();
                for (dv, &v) in drow.iter_mut().zip(lrow) {
                    *dv = (v - maxv).exp() * inv_denom * inv_total;
                }
                drow[target] -= inv_total;
            }
        }
        let pr = unsafe { prp.slice_mut(r, 1) };
        pr[0] = if count > 0 { sum / F::from_f64(count as f64) } else { F::zero() };
    });
    // Fixed-order reduction for the global mean.
    let mut total = F::zero();
    for r in 0..n_rows {
        let count = mask[r * t_len..(r + 1) * t_len].iter().filter(|&&b| b).count();
        total += per_row[r] * F::from_f64(count as f64);
    }
    let loss = total / F::from_f64(total_masked as f64);
    if !loss.is_finite() {
        return Err(Error::NumericOverflow("loss"));
    }
    Ok((loss, per_row, dlogits))
}

/// Backward from dlogits (plus optional attention-probability gradients)
/// down to the embedding output. Returns (grads, d_x0); wte/wpe gradients
/// are left zero for the caller to scatter.
pub(crate) fn body_backward<F: Real>(
    params: &Params<F>,
    cfg: &ModelConfig,
    body: &BodyCache<F>,
    dlogits: &Mat<F>,
    d_probs: Option<&[Vec<F>]>,
    n_rows: usize,
    t_len: usize,
) -> (Grads<F>, Mat<F>) {
    let d = cfg.d_emb;
    let n = n_rows * t_len;
    let shape = AttnShape { n_rows, t_len, n_heads: cfg.n_heads, head_dim: cfg.head_dim() };
    let mut g = Grads::zeros(cfg);

    // Head: logits = lnf.out · head
    matmul_at_b_into(&mut g.head, &body.lnf.out, dlogits, F::zero());
    let mut d_lnf_out = Mat::zeros(n, d);
    matmul_a_bt_into(&mut d_lnf_out, dlogits, &params.head, F::zero());
    let mut dx = layer_norm_bwd(&body.lnf, &params.lnf_g, &d_lnf_out, &mut g.lnf_g, &mut g.lnf_b);

    for li in (0..cfg.n_layers).rev() {
        let lp = &params.layers[li];
        let lc = &body.layers[li];
        let lg = &mut g.layers[li];

        // FFN branch
        let mut d_ffn_out = dx.clone();
        if let Some(mask) = &lc.ffn_mask {
            apply_mask(&mut d_ffn_out, mask);
        }
        matmul_at_b_into(&mut lg.w2, &lc.h_act, &d_ffn_out, F::zero());
        bias_grad(&d_ffn_out, &mut lg.b2);
        let mut d_hact = Mat::zeros(n, cfg.d_ffn);
        matmul_a_bt_into(&mut d_hact, &d_ffn_out, &lp.w2, F::zero());
        // through GELU
        for_rows_mut_read(&mut d_hact, &lc.h_pre, 32, |_, da, pre| {
            for (a, &p) in da.iter_mut().zip(pre) {
                *a *= gelu_grad(p);
            }
        });
        matmul_at_b_into(&mut lg.w1, &lc.ln2.out, &d_hact, F::zero());
        bias_grad(&d_hact, &mut lg.b1);
        let mut d_ln2_out = Mat::zeros(n, d);
        matmul_a_bt_into(&mut d_ln2_out, &d_hact, &lp.w1, F::zero());
        let d_resid_ffn = layer_norm_bwd(&lc.ln2, &lp.ln2_g, &d_ln2_out, &mut lg.ln2_g, &mut lg.ln2_b);
        residual_add(&mut dx, &d_resid_ffn);

        // Attention branch
        let mut d_attn_out = dx.clone();
        if let Some(mask) = &lc.attn_mask {
            apply_mask(&mut d_attn_out, mask);
        }
        matmul_at_b_into(&mut lg.wo, &lc.ctx, &d_attn_out, F::zero());
        bias_grad(&d_attn_out, &mut lg.bo);
        let mut d_ctx = Mat::zeros(n, d);
        matmul_a_bt_into(&mut d_ctx, &d_attn_out, &lp.wo, F::zero());

        let mut d_q = Mat::zeros(n, d);
        let mut d_k = Mat::zeros(n, d);
        let mut d_v = Mat::zeros(n, d);
        attention_bwd(lc, &shape, &d_ctx, d_probs.map(|ps| ps[li].as_slice()), &mut d_q, &mut d_k, &mut d_v);

        matmul_at_b_into(&mut lg.wq, &lc.ln1.out, &d_q, F::zero());
        bias_grad(&d_q, &mut lg.bq);
        matmul_at_b_into(&mut lg.wk, &lc.ln1.out, &d_k, F::zero());
        bias_grad(&d_k, &mut lg.bk);
        matmul_at_b_into(&mut lg.wv, &lc.ln1.out, &d_v, F::zero());
        bias_grad(&d_v, &mut lg.bv);

        let mut d_ln1_out = Mat::zeros(n, d);
        matmul_a_bt_into(&mut d_ln1_out, &d_q, &lp.wq, F::zero());
        matmul_a_bt_into(&mut d_ln1_out, &d_k, &lp.wk, F::one());
        matmul_a_bt_into(&mut d_ln1_out, &d_v, &lp.wv, F::one());
        let d_resid_attn = layer_norm_bwd(&lc.ln1, &lp.ln1_g, &d_ln1_out, &mut lg.ln1_g, &mut lg.ln1_b);
        residual_add(&mut dx, &d_resid_attn);
    }

    if let Some(mask) = &body.emb_mask {
        apply_mask(&mut dx, mask);
    }
    (g, dx)
}

/// Scatters d_x0 into the token and positional embedding tables.
pub(crate) fn scatter_embedding_grads<F: Real>(g: &mut Grads<F>, d_x0: &Mat<F>, tokens: &[u32], t_len: usize) {
    let d = d_x0.cols;
    for (i, &tok) in tokens.iter().enumerate() {
        let src = d_x0.row(i);
        let te = g.wte.row_mut(tok as usize);
        for j in 0..d {
            te[j] += src[j];
        }
        let pe = g.wpe.row_mut(i % t_len);
        for j in 0..d {
            pe[j] += src[j];
        }
    }
}

impl<F: Real> ModelState<F> {
    /// Full forward pass over a batch. In train mode the activation cache is
    /// retained for [`ModelState::backward`]; in eval mode dropout is off and
    /// nothing is cached.
    pub fn forward(&mut self, batch: &EncodedBatch, phase: Phase, capture: bool) -> Result<ForwardOut<F>> {
        if batch.t_len > self.config.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.t_len, self.config.max_seq_len
            )));
        }
        let x0 = embed(&self.params, &batch.tokens, batch.t_len);
        let (body, cap) = body_forward(&self.params, &self.config, x0, batch.n_rows, batch.t_len, phase, capture)?;
        let lg = logits(&self.params, &body);
        let want_grad = phase.is_train();
        let (loss, per_row, dlogits) = hard_loss(&lg, &batch.tokens, &batch.mask, batch.n_rows, batch.t_len, want_grad)?;
        if want_grad {
            self.cache = Some(Cache {
                n_rows: batch.n_rows,
                t_len: batch.t_len,
                tokens: batch.tokens.clone(),
                body,
                dlogits: dlogits.expect("grad requested"),
            });
        } else {
            self.cache = None;
        }
        Ok(ForwardOut { loss, per_row, capture: cap })
    }

    /// Exact analytic gradients for every parameter tensor, from the most
    /// recent train-mode forward pass. The cache is consumed.
    pub fn backward(&mut self, batch: &EncodedBatch) -> Result<Grads<F>> {
        let cache = self.cache.take().ok_or(Error::BackwardBeforeForward)?;
        if cache.n_rows != batch.n_rows || cache.t_len != batch.t_len || cache.tokens != batch.tokens {
            return Err(Error::InvalidConfig("backward called with a different batch than forward".into()));
        }
        let (mut g, d_x0) =
            body_backward(&self.params, &self.config, &cache.body, &cache.dlogits, None, cache.n_rows, cache.t_len);
        scatter_embedding_grads(&mut g, &d_x0, &cache.tokens, cache.t_len);
        Ok(g)
    }
}
