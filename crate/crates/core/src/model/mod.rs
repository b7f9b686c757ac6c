//! Decoder-only transformer (GPT-2 style) with exact analytic gradients.
//!
//! Pre-norm blocks, trainable positional embeddings, causal masking, a
//! separate (untied) output head, and optional attention capture. The whole
//! numeric core is generic over [`Real`] so gradient checks can run in f64
//! while production training runs in f32.

mod encode;
mod forward;
mod generate;

pub use encode::{encode_batch, encode_rows, encoded_len, EncodedBatch, MixedRow};
pub use forward::{AttentionCapture, ForwardOut, Phase};
pub(crate) use forward::gelu as forward_gelu;
pub use generate::{decode_values, generate};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_emb: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train on a CPU in minutes.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig { n_layers: 2, n_heads: 1, d_emb: 128, d_ffn: 512, dropout: 0.1, max_seq_len, vocab_size }
    }

    /// The full-scale reference configuration (six layers, one head,
    /// d_emb 512, d_ffn 2048, dropout 0.1).
    pub fn full(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig { n_layers: 6, n_heads: 1, d_emb: 512, d_ffn: 2048, dropout: 0.1, max_seq_len, vocab_size }
    }

    /// Tiny configuration used by gradient checks.
    pub fn tiny(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig { n_layers: 1, n_heads: 1, d_emb: 8, d_ffn: 16, dropout: 0.0, max_seq_len, vocab_size }
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.n_heads == 0 || self.d_emb % self.n_heads != 0 {
            return Err(Error::InvalidConfig("d_emb must be a positive multiple of n_heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerParams<F> {
    pub ln1_g: Mat<F>,
    pub ln1_b: Mat<F>,
    pub wq: Mat<F>,
    pub bq: Mat<F>,
    pub wk: Mat<F>,
    pub bk: Mat<F>,
    pub wv: Mat<F>,
    pub bv: Mat<F>,
    pub wo: Mat<F>,
    pub bo: Mat<F>,
    pub ln2_g: Mat<F>,
    pub ln2_b: Mat<F>,
    pub w1: Mat<F>,
    pub b1: Mat<F>,
    pub w2: Mat<F>,
    pub b2: Mat<F>,
}

/// All trainable tensors. The same container doubles as the gradient
/// accumulator ([`Grads`]).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Params<F> {
    pub wte: Mat<F>,
    pub wpe: Mat<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Mat<F>,
    pub lnf_b: Mat<F>,
    pub head: Mat<F>,
}

pub type Grads<F> = Params<F>;

impl<F: Real> Params<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_emb;
        let layer = || LayerParams {
            ln1_g: Mat::zeros(1, d),
            ln1_b: Mat::zeros(1, d),
            wq: Mat::zeros(d, d),
            bq: Mat::zeros(1, d),
            wk: Mat::zeros(d, d),
            bk: Mat::zeros(1, d),
            wv: Mat::zeros(d, d),
            bv: Mat::zeros(1, d),
            wo: Mat::zeros(d, d),
            bo: Mat::zeros(1, d),
            ln2_g: Mat::zeros(1, d),
            ln2_b: Mat::zeros(1, d),
            w1: Mat::zeros(d, cfg.d_ffn),
            b1: Mat::zeros(1, cfg.d_ffn),
            w2: Mat::zeros(cfg.d_ffn, d),
            b2: Mat::zeros(1, d),
        };
        Params {
            wte: Mat::zeros(cfg.vocab_size, d),
            wpe: Mat::zeros(cfg.max_seq_len, d),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            lnf_g: Mat::zeros(1, d),
            lnf_b: Mat::zeros(1, d),
            head: Mat::zeros(d, cfg.vocab_size),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut out: Vec<(String, &Mat<F>)> =
            vec![("wte".into(), &self.wte), ("wpe".into(), &self.wpe)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable tensor list in the same order as [`Params::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<F>> {
        let mut out: Vec<&mut Mat<F>> = vec![&mut self.wte, &mut self.wpe];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.head);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Transformer parameters plus the activation cache of the most recent
/// train-mode forward pass (consumed by [`ModelState::backward`]).
#[derive(Debug)]
pub struct ModelState<F: Real> {
    pub config: ModelConfig,
    pub params: Params<F>,
    pub(crate) cache: Option<forward::Cache<F>>,
}

impl<F: Real> Clone for ModelState<F> {
    fn clone(&self) -> Self {
        // Caches are transient; a cloned state starts without one.
        ModelState { config: self.config.clone(), params: self.params.clone(), cache: None }
    }
}

impl<F: Real> ModelState<F> {
    /// Fresh model: normal(0, 0.02) projections and embeddings, zero biases,
    /// unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut params = Params::zeros(config);
        let mut fill_normal = |m: &mut Mat<F>| {
            for v in m.data.iter_mut() {
                *v = F::from_f64(normal.sample(&mut rng));
            }
        };
        fill_normal(&mut params.wte);
        fill_normal(&mut params.wpe);
        for i in 0..config.n_layers {
            fill_normal(&mut params.layers[i].wq);
            fill_normal(&mut params.layers[i].wk);
            fill_normal(&mut params.layers[i].wv);
            fill_normal(&mut params.layers[i].wo);
            fill_normal(&mut params.layers[i].w1);
            fill_normal(&mut params.layers[i].w2);
        }
        fill_normal(&mut params.head);
        for l in params.layers.iter_mut() {
            l.ln1_g.fill(F::one());
            l.ln2_g.fill(F::one());
        }
        params.lnf_g.fill(F::one());
        Ok(ModelState { config: config.clone(), params, cache: None })
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Versioned checkpoint: config header plus a full tensor dump.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Params<f32>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(state: &ModelState<f32>, path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let ckpt = Checkpoint { version: CHECKPOINT_VERSION, config: state.config.clone(), params: state.params.clone() };
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, &ckpt)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelState<f32>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(f)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::InvalidConfig(format!("unsupported checkpoint version {}", ckpt.version)));
    }
    ckpt.config.validate()?;
    Ok(ModelState { config: ckpt.config, params: ckpt.params, cache: None })
}
