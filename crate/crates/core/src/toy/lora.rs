use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::Matrix;
use super::ToyConfig;
use crate::error::{Result, VskipError};

/// Attention projection an adapter pair attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Query => "wq",
            LoraTarget::Key => "wk",
            LoraTarget::Value => "wv",
            LoraTarget::Output => "wo",
        }
    }
}

/// `delta W = scale * B A` with `A: r x d_in` and `B: d_out x r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Per layer, pairs for `[wq, wk, wv, wo]`.
    pub layers: Vec<[LoraPair; 4]>,
}

impl LoraAdapter {
    /// `A` drawn from N(0, 1/d_in), `B` zero, so the initial delta vanishes.
    pub fn init(config: &ToyConfig, rank: usize, alpha: f64, dropout: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(VskipError::Config("adapter rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(VskipError::Config(format!("dropout {dropout} must lie in [0, 1)")));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(VskipError::Config(format!("alpha {alpha} must be positive")));
        }
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| {
                let mut pair = || LoraPair { a: Matrix::randn(rank, d, std, &mut rng), b: Matrix::zeros(d, rank) };
                [pair(), pair(), pair(), pair()]
            })
            .collect();
        Ok(LoraAdapter { rank, alpha, dropout, layers })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn pair(&self, layer: usize, target: LoraTarget) -> &LoraPair {
        &self.layers[layer][target as usize]
    }

    /// True when every `B` is zero, i.e. the adapter cannot change outputs.
    pub fn is_zero_delta(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|p| p.b.is_zero()))
    }

    /// Fills every `B` with Gaussian noise. Used to move off the zero-delta
    /// point, e.g. for gradient checks.
    pub fn randomize_b(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            for pair in layer.iter_mut() {
                pair.b = Matrix::randn(pair.b.rows, pair.b.cols, std, &mut rng);
            }
        }
    }

    pub fn trainable_parameters(&self) -> usize {
        self.layers.iter().flat_map(|l| l.iter()).map(|p| p.a.data.len() + p.b.data.len()).sum()
    }

    /// Every adapter matrix with a stable name, in a fixed order.
    pub fn matrices_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (t, pair) in layer.iter_mut().enumerate() {
                let name = LoraTarget::ALL[t].name();
                out.push((format!("layer{l}.{name}.A"), &mut pair.a));
                out.push((format!("layer{l}.{name}.B"), &mut pair.b));
            }
        }
        out
    }

    pub(crate) fn check_matches(&self, config: &ToyConfig) -> Result<()> {
        let ok = self.layers.len() == config.layers
            && self.layers.iter().all(|l| {
                l.iter().all(|p| {
                    (p.a.rows, p.a.cols) == (self.rank, config.d_model) && (p.b.rows, p.b.cols) == (config.d_model, self.rank)
                })
            });
        if !ok {
            return Err(VskipError::Config("adapter shape does not match the model".into()));
        }
        Ok(())
    }
}

/// Gradients with the same layout as [`LoraAdapter::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub layers: Vec<[LoraPair; 4]>,
}

impl AdapterGrads {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        AdapterGrads {
            layers: adapter
                .layers
                .iter()
                .map(|l| {
                    l.clone().map(|p| LoraPair {
                        a: Matrix::zeros(p.a.rows, p.a.cols),
                        b: Matrix::zeros(p.b.rows, p.b.cols),
                    })
                })
                .collect(),
        }
    }

    /// Same order and names as [`LoraAdapter::matrices_mut`].
    pub fn matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (t, pair) in layer.iter().enumerate() {
                let name = LoraTarget::ALL[t].name();
                out.push((format!("layer{l}.{name}.A"), &pair.a));
                out.push((format!("layer{l}.{name}.B"), &pair.b));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &AdapterGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (pa, pb) in a.iter_mut().zip(b) {
                pa.a.add_assign(&pb.a);
                pa.b.add_assign(&pb.b);
            }
        }
    }
}
