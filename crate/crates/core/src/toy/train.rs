//! Distillation of compressed chains into a low-rank adapter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::Matrix;
use super::lora::{AdapterGrads, LoraAdapter};
use super::model::{backward, run_forward, DropoutCtx};
use super::ToyReasonerParams;
use crate::error::{Result, VskipError};

/// One supervision target: the compressed chain given its image and question.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillExample {
    pub image: Matrix,
    pub question_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Rescales the full gradient to at most this L2 norm when set.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { rank: 4, alpha: 32.0, dropout: 0.05, lr: 3e-4, steps: 1200, batch_size: 10, clip_norm: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub adapter: LoraAdapter,
    /// Training batch loss at each step, before that step's update.
    pub curve: Vec<f64>,
}

/// Summed NLL of one example. With `grad`, also backpropagates
/// `weight * (softmax - onehot)` into the adapter gradients.
fn example_pass(
    params: &ToyReasonerParams,
    adapter: Option<&LoraAdapter>,
    ex: &DistillExample,
    dropout: Option<DropoutCtx<'_>>,
    grad: Option<(f64, &mut AdapterGrads)>,
) -> Result<f64> {
    let c = ex.target_ids.len();
    if c == 0 {
        return Ok(0.0);
    }
    let mut inputs = ex.question_ids.clone();
    inputs.extend_from_slice(&ex.target_ids[..c - 1]);
    let cache = run_forward(params, adapter, &ex.image, &inputs, dropout)?;
    let first = ex.image.rows + ex.question_ids.len() - 1;
    let mut nll = 0.0;
    for (j, &target) in ex.target_ids.iter().enumerate() {
        nll -= cache.logprobs.at(first + j, target as usize);
    }
    if let (Some((weight, grads)), Some(adapter)) = (grad, adapter) {
        let mut dlogits = Matrix::zeros(cache.logprobs.rows, cache.logprobs.cols);
        for (j, &target) in ex.target_ids.iter().enumerate() {
            let row = first + j;
            for (d, lp) in dlogits.row_mut(row).iter_mut().zip(cache.logprobs.row(row)) {
                *d = weight * lp.exp();
            }
            *dlogits.at_mut(row, target as usize) -= weight;
        }
        grads.add_assign(&backward(params, adapter, &cache, &dlogits));
    }
    Ok(nll)
}

fn token_total(batch: &[DistillExample]) -> Result<usize> {
    if batch.is_empty() {
        return Err(VskipError::domain("distillation batch is empty"));
    }
    let total: usize = batch.iter().map(|e| e.target_ids.len()).sum();
    if total == 0 {
        return Err(VskipError::domain("distillation batch has no target tokens"));
    }
    Ok(total)
}

/// Mean token-level negative log-likelihood of the targets.
pub fn distill_loss(params: &ToyReasonerParams, adapter: Option<&LoraAdapter>, batch: &[DistillExample]) -> Result<f64> {
    let total = token_total(batch)?;
    let mut nll = 0.0;
    for ex in batch {
        nll += example_pass(params, adapter, ex, None, None)?;
    }
    Ok(nll / total as f64)
}

/// Loss and exact adapter gradients with dropout disabled.
pub fn adapter_gradients(
    params: &ToyReasonerParams,
    adapter: &LoraAdapter,
    batch: &[DistillExample],
) -> Result<(f64, AdapterGrads)> {
    gradients(params, adapter, batch, None)
}

fn gradients(
    params: &ToyReasonerParams,
    adapter: &LoraAdapter,
    batch: &[DistillExample],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, AdapterGrads)> {
    let total = token_total(batch)?;
    let weight = 1.0 / total as f64;
    let mut grads = AdapterGrads::zeros_like(adapter);
    let mut nll = 0.0;
    for ex in batch {
        let dropout = rng.as_deref_mut().map(|rng| DropoutCtx { rng, p: adapter.dropout });
        nll += example_pass(params, Some(adapter), ex, dropout, Some((weight, &mut grads)))?;
    }
    Ok((nll * weight, grads))
}

/// One SGD step on the adapter. Base parameters are only read. Returns the
/// batch loss before the update. When `dropout_rng` is given, adapter
/// dropout is active with the adapter's rate.
pub fn distill_step(
    params: &ToyReasonerParams,
    adapter: &mut LoraAdapter,
    batch: &[DistillExample],
    lr: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    clipped_step(params, adapter, batch, lr, None, dropout_rng)
}

fn clipped_step(
    params: &ToyReasonerParams,
    adapter: &mut LoraAdapter,
    batch: &[DistillExample],
    lr: f64,
    clip_norm: Option<f64>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(VskipError::domain(format!("learning rate {lr} must be finite and non-negative")));
    }
    let (loss, grads) = gradients(params, adapter, batch, dropout_rng)?;
    for (name, g) in grads.matrices() {
        if !g.is_finite() {
            return Err(VskipError::Training { matrix: name, message: "non-finite gradient".into() });
        }
    }
    if lr == 0.0 {
        return Ok(loss);
    }
    let mut step = lr;
    if let Some(max) = clip_norm {
        let norm = grads.matrices().iter().flat_map(|(_, g)| &g.data).map(|v| v * v).sum::<f64>().sqrt();
        if norm > max {
            step *= max / norm;
        }
    }
    for ((_, m), (_, g)) in adapter.matrices_mut().into_iter().zip(grads.matrices()) {
        for (w, d) in m.data.iter_mut().zip(&g.data) {
            *w -= step * d;
        }
    }
    Ok(loss)
}

/// Mini-batch SGD over `dataset`, reshuffled each epoch with a seeded
/// Fisher-Yates pass.
pub fn train_adapter(params: &ToyReasonerParams, dataset: &[DistillExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(VskipError::Pipeline("distillation dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(VskipError::Config("batch_size must be positive".into()));
    }
    if cfg.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
        return Err(VskipError::Config("clip_norm must be positive".into()));
    }
    let mut adapter = LoraAdapter::init(&params.config, cfg.rank, cfg.alpha, cfg.dropout, cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    let batch_size = cfg.batch_size.min(dataset.len());

    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                for i in (1..order.len()).rev() {
                    let j = order_rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let rng = (cfg.dropout > 0.0).then_some(&mut dropout_rng);
        curve.push(clipped_step(params, &mut adapter, &batch, cfg.lr, cfg.clip_norm, rng)?);
    }
    Ok(TrainOutcome { adapter, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{image_features, ToyConfig};

    fn tiny() -> ToyReasonerParams {
        ToyReasonerParams::init(ToyConfig { vocab_size: 12, d_model: 8, layers: 2, heads: 2, ffn_dim: 8, image_patches: 2, max_seq: 24, seed: 2 })
            .unwrap()
    }

    fn batch() -> Vec<DistillExample> {
        (0..3)
            .map(|i| DistillExample {
                image: image_features(&format!("im{i}"), 2, 8),
                question_ids: vec![1, 2],
                target_ids: vec![3, (4 + i) as u32, 5],
            })
            .collect()
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let mut p = tiny();
        p.w_out = Matrix::zeros(p.w_out.rows, p.w_out.cols);
        let loss = distill_loss(&p, None, &batch()).unwrap();
        assert!((loss - (12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_delta_adapter_loss_matches_base() {
        let p = tiny();
        let a = LoraAdapter::init(&p.config, 2, 4.0, 0.05, 0).unwrap();
        assert_eq!(distill_loss(&p, None, &batch()).unwrap(), distill_loss(&p, Some(&a), &batch()).unwrap());
    }

    #[test]
    fn empty_batch_is_an_error() {
        let p = tiny();
        assert!(distill_loss(&p, None, &[]).is_err());
        let empty_targets = vec![DistillExample { image: image_features("x", 2, 8), question_ids: vec![1], target_ids: vec![] }];
        assert!(distill_loss(&p, None, &empty_targets).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_adapter() {
        let p = tiny();
        let mut a = LoraAdapter::init(&p.config, 2, 4.0, 0.0, 0).unwrap();
        a.randomize_b(0.1, 1);
        let before = a.clone();
        distill_step(&p, &mut a, &batch(), 0.0, None).unwrap();
        assert_eq!(a, before);
        assert!(distill_step(&p, &mut a, &batch(), -1.0, None).is_err());
    }

    #[test]
    fn step_leaves_base_untouched() {
        let p = tiny();
        let snapshot = p.clone();
        let mut a = LoraAdapter::init(&p.config, 2, 4.0, 0.0, 0).unwrap();
        distill_step(&p, &mut a, &batch(), 0.1, None).unwrap();
        assert_eq!(p, snapshot);
        assert!(!a.is_zero_delta());
    }

    #[test]
    fn training_is_reproducible() {
        let p = tiny();
        let cfg = TrainConfig { rank: 2, alpha: 4.0, steps: 5, batch_size: 2, ..TrainConfig::default() };
        let a = train_adapter(&p, &batch(), &cfg).unwrap();
        let b = train_adapter(&p, &batch(), &cfg).unwrap();
        assert_eq!(a, b);
        let none = train_adapter(&p, &batch(), &TrainConfig { steps: 0, ..cfg }).unwrap();
        assert!(none.adapter.is_zero_delta());
        assert!(none.curve.is_empty());
    }
}
