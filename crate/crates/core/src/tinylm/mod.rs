//! A small pre-norm decoder-only transformer with rotary positions.
//!
//! The model accepts arbitrary input embeddings, so token embeddings and
//! compressor-produced concept embeddings go through the same forward pass.
//! Hidden states are tapped on the residual stream after each block, before
//! the final norm.

mod backward;
mod forward;
mod lora;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{digest_tensors, TensorBundle};
use crate::error::{Error, Result};
use crate::segmenter::{TokenId, TOKENIZER_VOCAB};
use crate::tensor::{Float, Mat};

pub use forward::{ForwardTrace, Generation, GenerationTiming, KVCache, PrefillOutput};
pub(crate) use forward::Tape;
pub use lora::{LayerLora, LoraAdapters, LoraPair};

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// The desk-scale model used for training, evaluation and benchmarks.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 32,
            n_heads: 4,
            ffn_dim: 128,
            vocab_size: TOKENIZER_VOCAB,
            max_positions: 16_640,
        }
    }

    /// Small enough for finite-difference gradient checks in `f64`.
    pub fn grad_check() -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            vocab_size: TOKENIZER_VOCAB,
            max_positions: 512,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config("rotary embeddings need an even head_dim".into()));
        }
        if self.vocab_size < TOKENIZER_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must be at least {TOKENIZER_VOCAB}, got {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub ffn_norm: Vec<T>,
    /// hidden_dim × ffn_dim
    pub w_up: Mat<T>,
    /// ffn_dim × hidden_dim
    pub w_down: Mat<T>,
}

/// Frozen base-model weights. Projections use the row-vector convention
/// `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub embedding: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub unembed: Mat<T>,
}

fn gaussian<T: Float>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect(),
    )
}

impl<T: Float> ModelParams<T> {
    /// Deterministic random initialisation. Embeddings have unit variance so
    /// token embeddings sit at the same scale as normalised hidden states.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let proj = 1.0 / (d as f64).sqrt();
        let residual = proj / (2.0 * config.n_layers as f64).sqrt();
        let embedding = gaussian(&mut rng, config.vocab_size, d, 1.0);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: vec![T::one(); d],
                wq: gaussian(&mut rng, d, d, proj),
                wk: gaussian(&mut rng, d, d, proj),
                wv: gaussian(&mut rng, d, d, proj),
                wo: gaussian(&mut rng, d, d, residual),
                ffn_norm: vec![T::one(); d],
                w_up: gaussian(&mut rng, d, f, proj),
                w_down: gaussian(&mut rng, f, d, 1.0 / (f as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt()),
            })
            .collect();
        let unembed = gaussian(&mut rng, d, config.vocab_size, proj);
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            final_norm: vec![T::one(); d],
            unembed,
        })
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        let v = |x: &[T]| x.iter().map(|&e| U::lit(e.as_f64())).collect::<Vec<U>>();
        ModelParams {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: v(&l.attn_norm),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: v(&l.ffn_norm),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: v(&self.final_norm),
            unembed: self.unembed.cast(),
        }
    }

    /// Token-embedding lookup.
    pub fn embed(&self, token_ids: &[TokenId]) -> Result<Mat<T>> {
        let d = self.config.hidden_dim;
        let mut out = Mat::zeros(0, d);
        for &id in token_ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::input(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            out.push_row(self.embedding.row(id as usize));
        }
        Ok(out)
    }

    /// Every tensor with a stable name and shape, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        fn m<T: Float>(name: String, t: &Mat<T>) -> (String, Vec<usize>, &[T]) {
            (name, vec![t.rows(), t.cols()], t.data())
        }
        out.push(m("embedding".into(), &self.embedding));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), vec![l.attn_norm.len()], &l.attn_norm[..]));
            out.push(m(format!("layers.{i}.wq"), &l.wq));
            out.push(m(format!("layers.{i}.wk"), &l.wk));
            out.push(m(format!("layers.{i}.wv"), &l.wv));
            out.push(m(format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), vec![l.ffn_norm.len()], &l.ffn_norm[..]));
            out.push(m(format!("layers.{i}.w_up"), &l.w_up));
            out.push(m(format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm[..]));
        out.push(m("unembed".into(), &self.unembed));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        out.push(("embedding".into(), self.embedding.data_mut()));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm[..]));
            out.push((format!("layers.{i}.wq"), l.wq.data_mut()));
            out.push((format!("layers.{i}.wk"), l.wk.data_mut()));
            out.push((format!("layers.{i}.wv"), l.wv.data_mut()));
            out.push((format!("layers.{i}.wo"), l.wo.data_mut()));
            out.push((format!("layers.{i}.ffn_norm"), &mut l.ffn_norm[..]));
            out.push((format!("layers.{i}.w_up"), l.w_up.data_mut()));
            out.push((format!("layers.{i}.w_down"), l.w_down.data_mut()));
        }
        out.push(("final_norm".into(), &mut self.final_norm[..]));
        out.push(("unembed".into(), self.unembed.data_mut()));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}

impl<T: Float> ModelParams<T> {
    /// Hex SHA-256 over every tensor; the frozen-base fingerprint.
    pub fn digest(&self) -> String {
        digest_tensors(self.named_tensors())
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::default();
        b.meta.insert("kind".into(), "model".into());
        b.meta.insert(
            "model_config".into(),
            serde_json::to_string(&self.config).expect("config serialises"),
        );
        for (name, shape, data) in self.named_tensors() {
            b.push(name, shape, data);
        }
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let config: ModelConfig = bundle
            .meta
            .get("model_config")
            .ok_or_else(|| Error::input("container carries no model_config"))
            .and_then(|s| serde_json::from_str(s).map_err(|e| Error::Config(e.to_string())))?;
        let mut params = Self::init(&config, 0)?;
        for (name, dst) in params.named_tensors_mut() {
            bundle.load_into(&name, dst)?;
        }
        Ok(params)
    }
}

/// Row-wise RMS normalisation. Returns the normalised rows and `1/rms` per row.
pub fn rms_norm<T: Float>(x: &Mat<T>, gain: &[T]) -> (Mat<T>, Vec<T>) {
    let d = x.cols();
    let mut out = Mat::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    let eps = T::lit(NORM_EPS);
    let dn = T::lit(d as f64);
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        inv.push(r);
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(gain) {
            *o = v * r * g;
        }
    }
    (out, inv)
}

/// Gradient of `rms_norm` with respect to its input.
pub(crate) fn rms_norm_backward<T: Float>(dy: &Mat<T>, x: &Mat<T>, inv: &[T], gain: &[T]) -> Mat<T> {
    let d = x.cols();
    let dn = T::lit(d as f64);
    let mut dx = Mat::zeros(x.rows(), d);
    for (i, &r) in inv.iter().enumerate().take(x.rows()) {
        let (xr, gr) = (x.row(i), dy.row(i));
        let proj = xr
            .iter()
            .zip(gr)
            .zip(gain)
            .map(|((&xv, &g), &w)| w * g * xv)
            .sum::<T>();
        let coef = r * r * r * proj / dn;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * gain[j] * gr[j] - coef * xr[j];
        }
    }
    dx
}
