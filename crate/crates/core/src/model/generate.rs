//! Greedy autoregressive decoding with a per-sequence KV cache.

use super::encode::encode_prefix;
use super::{ModelConfig, ModelState, Params};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};
use crate::taskgen::{TaskSpec, Vocabulary, EOS};

const LN_EPS: f64 = 1e-5;

fn ln_vec<F: Real>(x: &[F], gain: &Mat<F>, bias: &Mat<F>) -> Vec<F> {
    let d = x.len();
    let dn = F::from_f64(d as f64);
    let mean = x.iter().copied().sum::<F>() / dn;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
    let inv = (var + F::from_f64(LN_EPS)).sqrt().recip();
    (0..d).map(|i| (x[i] - mean) * inv * gain.data[i] + bias.data[i]).collect()
}

/// y += x · W for row-major W.
fn matvec_acc<F: Real>(y: &mut [F], x: &[F], w: &Mat<F>) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(y.len(), w.cols);
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::zero() {
            continue;
        }
        let wrow = w.row(i);
        for (yj, &wij) in y.iter_mut().zip(wrow) {
            *yj += xi * wij;
        }
    }
}

fn linear<F: Real>(x: &[F], w: &Mat<F>, b: Option<&Mat<F>>) -> Vec<F> {
    let mut y = match b {
        Some(bias) => bias.data.clone(),
        None => vec![F::zero(); w.cols],
    };
    matvec_acc(&mut y, x, w);
    y
}

struct KvCache<F> {
    k: Vec<F>,
    v: Vec<F>,
    len: usize,
}

/// Incremental single-token decoder state.
struct Decoder<'a, F: Real> {
    params: &'a Params<F>,
    cfg: &'a ModelConfig,
    layers: Vec<KvCache<F>>,
}

impl<'a, F: Real> Decoder<'a, F> {
    fn new(params: &'a Params<F>, cfg: &'a ModelConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|_| KvCache {
                k: Vec::with_capacity(cfg.max_seq_len * cfg.d_emb),
                v: Vec::with_capacity(cfg.max_seq_len * cfg.d_emb),
                len: 0,
            })
            .collect();
        Decoder { params, cfg, layers }
    }

    /// Feeds one token; returns the logits predicting the next position.
    fn step(&mut self, token: u32, pos: usize) -> Vec<F> {
        let d = self.cfg.d_emb;
        let heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());
        let te = self.params.wte.row(token as usize);
        let pe = self.params.wpe.row(pos);
        let mut x: Vec<F> = (0..d).map(|i| te[i] + pe[i]).collect();
        for (li, lp) in self.params.layers.iter().enumerate() {
            let n1 = ln_vec(&x, &lp.ln1_g, &lp.ln1_b);
            let q = linear(&n1, &lp.wq, Some(&lp.bq));
            let k = linear(&n1, &lp.wk, Some(&lp.bk));
            let v = linear(&n1, &lp.wv, Some(&lp.bv));
            let cache = &mut self.layers[li];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            cache.len += 1;
            let t = cache.len;
            let mut ctx = vec![F::zero(); d];
            for h in 0..heads {
                let hoff = h * hd;
                let qh = &q[hoff..hoff + hd];
                let mut scores = Vec::with_capacity(t);
                let mut maxv = F::neg_infinity();
                for j in 0..t {
                    let kj = &cache.k[j * d + hoff..j * d + hoff + hd];
                    let mut s = F::zero();
                    for i in 0..hd {
                        s += qh[i] * kj[i];
                    }
                    let s = s * scale;
                    scores.push(s);
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut denom = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - maxv).exp();
                    denom += *s;
                }
                let inv = denom.recip();
                for (j, s) in scores.iter().enumerate() {
                    let p = *s * inv;
                    let vj = &cache.v[j * d + hoff..j * d + hoff + hd];
                    for i in 0..hd {
                        ctx[hoff + i] += p * vj[i];
                    }
                }
            }
            let attn_out = linear(&ctx, &lp.wo, Some(&lp.bo));
            for i in 0..d {
                x[i] += attn_out[i];
            }
            let n2 = ln_vec(&x, &lp.ln2_g, &lp.ln2_b);
            let mut h = linear(&n2, &lp.w1, Some(&lp.b1));
            for hv in h.iter_mut() {
                *hv = super::forward_gelu(*hv);
            }
            let ffn_out = linear(&h, &lp.w2, Some(&lp.b2));
            for i in 0..d {
                x[i] += ffn_out[i];
            }
        }
        let nf = ln_vec(&x, &self.params.lnf_g, &self.params.lnf_b);
        linear(&nf, &self.params.head, None)
    }
}

fn argmax<F: Real>(logits: &[F]) -> u32 {
    let mut best = 0usize;
    let mut best_v = F::neg_infinity();
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

/// Greedy decode of exactly L target tokens after the SEP; stops early only
/// on EOS (the caller counts a short sequence as a failure).
pub fn generate<F: Real>(
    state: &ModelState<F>,
    x: &[i64],
    spec: &TaskSpec,
    vocab: &Vocabulary,
) -> Result<Vec<u32>> {
    let l = spec.target_len;
    let prefix = encode_prefix(spec, x, vocab)?;
    if prefix.len() + l + 1 > state.config.max_seq_len {
        return Err(Error::InvalidConfig(format!(
            "decode length {} exceeds max_seq_len {}",
            prefix.len() + l + 1,
            state.config.max_seq_len
        )));
    }
    let mut dec = Decoder::new(&state.params, &state.config);
    let mut logits = Vec::new();
    for (pos, &tok) in prefix.iter().enumerate() {
        logits = dec.step(tok, pos);
    }
    let mut out = Vec::with_capacity(l);
    for step in 0..l {
        let next = argmax(&logits);
        if next == EOS {
            break;
        }
        out.push(next);
        if step + 1 < l {
            logits = dec.step(next, prefix.len() + step);
        }
    }
    Ok(out)
}

/// Maps decoded token ids back to integer values; special tokens map to
/// i64::MIN so they can never match a real target value.
pub fn decode_values(vocab: &Vocabulary, ids: &[u32]) -> Vec<i64> {
    ids.iter().map(|&id| vocab.value_of(id).unwrap_or(i64::MIN)).collect()
}
