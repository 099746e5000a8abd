//! A desk-scale multimodal reasoner.
//!
//! Image patches enter as a prefix of the token sequence, so every self-attention
//! row holds weights on the image keys alongside the text keys. Blocks are
//! `x + Attn(x)` followed by `x + W2 tanh(W1 x + b1) + b2`; there is no
//! normalization layer. Low-rank adapters sit on the four attention projections
//! of every layer and are the only trainable parameters during distillation.

mod checkpoint;
mod info;
pub mod linalg;
mod lora;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use info::{merge_chain_symbols, mi_diagnostic, JointTable, MiDiagnostic};
pub use linalg::Matrix;
pub use lora::{AdapterGrads, LoraAdapter, LoraPair, LoraTarget};
pub use model::{forward, generate_cot, Decoding, ForwardOutput, GeneratedChain};
pub use train::{adapter_gradients, distill_loss, distill_step, train_adapter, DistillExample, TrainConfig, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VskipError};
use crate::vocab::fnv1a64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub image_patches: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab_size: 64,
            d_model: 32,
            layers: 4,
            heads: 2,
            ffn_dim: 64,
            image_patches: 4,
            max_seq: 64,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn check(&self) -> Result<()> {
        let positive = [self.vocab_size, self.d_model, self.layers, self.heads, self.ffn_dim, self.image_patches];
        if positive.contains(&0) {
            return Err(VskipError::Config("toy model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(VskipError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_seq <= self.image_patches {
            return Err(VskipError::Config("max_seq must exceed image_patches".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReasonerParams {
    pub config: ToyConfig,
    pub token_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl ToyReasonerParams {
    /// Gaussian initialization scaled by fan-in, seeded from `config.seed`.
    pub fn init(config: ToyConfig) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let ff = config.ffn_dim;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let token_emb = Matrix::randn(config.vocab_size, d, 1.0, &mut rng);
        let pos_emb = Matrix::randn(config.max_seq, d, 0.5, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: Matrix::randn(d, d, inv(d), &mut rng),
                wk: Matrix::randn(d, d, inv(d), &mut rng),
                wv: Matrix::randn(d, d, inv(d), &mut rng),
                wo: Matrix::randn(d, d, inv(d) * 0.5, &mut rng),
                w1: Matrix::randn(ff, d, inv(d), &mut rng),
                b1: vec![0.0; ff],
                w2: Matrix::randn(d, ff, inv(ff) * 0.5, &mut rng),
                b2: vec![0.0; d],
            })
            .collect();
        let w_out = Matrix::randn(config.vocab_size, d, inv(d), &mut rng);
        let b_out = vec![0.0; config.vocab_size];
        Ok(ToyReasonerParams { config, token_emb, pos_emb, layers, w_out, b_out })
    }

    pub fn is_finite(&self) -> bool {
        self.token_emb.is_finite()
            && self.pos_emb.is_finite()
            && self.w_out.is_finite()
            && self.b_out.iter().all(|v| v.is_finite())
            && self.layers.iter().all(|l| {
                [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2].iter().all(|m| m.is_finite())
                    && l.b1.iter().chain(&l.b2).all(|v| v.is_finite())
            })
    }
}

/// Separates an image id from the words it depicts.
pub const IMAGE_CONTENT_SEP: char = ':';

/// Deterministic stand-in features for an image, derived from its id.
///
/// An id of the form `name:word+word+...` depicts those words: patch `j`
/// holds a fixed codebook vector for word `j`, wrapping around the patches.
/// Any other id yields unit Gaussian noise seeded by the id.
pub fn image_features(image_id: &str, patches: usize, d_model: usize) -> Matrix {
    let Some((_, content)) = image_id.split_once(IMAGE_CONTENT_SEP) else {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(image_id.as_bytes()));
        return Matrix::randn(patches, d_model, 1.0, &mut rng);
    };
    let mut m = Matrix::zeros(patches, d_model);
    for (j, word) in content.split('+').filter(|w| !w.is_empty()).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(format!("codebook/{word}").as_bytes()));
        let code = Matrix::randn(1, d_model, 1.0, &mut rng);
        for (v, c) in m.row_mut(j % patches).iter_mut().zip(&code.data) {
            *v += c;
        }
    }
    m
}
