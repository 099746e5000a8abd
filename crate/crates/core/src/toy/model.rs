//! Forward pass, greedy generation and the backward pass for adapter gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{atb, log_softmax_in_place, matmul, xwt, Matrix};
use super::lora::{AdapterGrads, LoraAdapter, LoraPair, LoraTarget};
use super::ToyReasonerParams;
use crate::error::{Result, VskipError};
use crate::trace::{AttentionLayout, AttentionTensor, ReasoningTrace, TokenRecord};
use crate::vocab::Vocabulary;

/// Dropout state for the adapter path during training.
pub(crate) struct DropoutCtx<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub p: f64,
}

struct LinearCache {
    /// Input seen by the adapter path (dropped out in training).
    lora_input: Matrix,
    /// `0` or `1/(1-p)` per input entry when dropout was applied.
    keep: Option<Matrix>,
    z: Matrix,
}

struct LayerCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per head, causal `n x n` attention probabilities.
    probs: Vec<Matrix>,
    act: Matrix,
    lora: Option<[LinearCache; 4]>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    /// Row `i` is the log-distribution of the token after position `i`.
    pub logprobs: Matrix,
}

impl ForwardCache {
    pub fn seq_len(&self) -> usize {
        self.logprobs.rows
    }

    /// `[L][H]` attention rows of query `i`, padded to `i + 1` keys.
    pub fn attention_row(&self, i: usize) -> Vec<Vec<Vec<f64>>> {
        self.layers
            .iter()
            .map(|l| l.probs.iter().map(|p| p.row(i)[..=i].to_vec()).collect())
            .collect()
    }
}

fn linear(
    x: &Matrix,
    w: &Matrix,
    lora: Option<(&LoraPair, f64)>,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> (Matrix, Option<LinearCache>) {
    let mut y = xwt(x, w);
    let Some((pair, scale)) = lora else {
        return (y, None);
    };
    let (lora_input, keep) = match dropout {
        Some(d) if d.p > 0.0 => {
            let keep_scale = 1.0 / (1.0 - d.p);
            let keep = Matrix::from_vec(
                x.rows,
                x.cols,
                (0..x.data.len()).map(|_| if d.rng.gen::<f64>() < d.p { 0.0 } else { keep_scale }).collect(),
            );
            let mut xin = x.clone();
            xin.hadamard_assign(&keep);
            (xin, Some(keep))
        }
        _ => (x.clone(), None),
    };
    let z = xwt(&lora_input, &pair.a);
    let mut delta = xwt(&z, &pair.b);
    delta.scale(scale);
    y.add_assign(&delta);
    (y, Some(LinearCache { lora_input, keep, z }))
}

/// Returns `dx` and accumulates adapter gradients into `grad`.
fn linear_backward(dy: &Matrix, w: &Matrix, lora: Option<(&LoraPair, f64, &LinearCache)>, grad: Option<&mut LoraPair>) -> Matrix {
    let mut dx = matmul(dy, w);
    if let (Some((pair, scale, cache)), Some(grad)) = (lora, grad) {
        let mut db = atb(dy, &cache.z);
        db.scale(scale);
        grad.b.add_assign(&db);
        let mut dz = matmul(dy, &pair.b);
        dz.scale(scale);
        grad.a.add_assign(&atb(&dz, &cache.lora_input));
        let mut dxl = matmul(&dz, &pair.a);
        if let Some(keep) = &cache.keep {
            dxl.hadamard_assign(keep);
        }
        dx.add_assign(&dxl);
    }
    dx
}

fn embed(params: &ToyReasonerParams, image: &Matrix, ids: &[u32]) -> Result<Matrix> {
    let cfg = &params.config;
    let d = cfg.d_model;
    if image.cols != d || image.rows != cfg.image_patches {
        return Err(VskipError::domain(format!(
            "image features are {}x{}, expected {}x{}",
            image.rows, image.cols, cfg.image_patches, d
        )));
    }
    let n = image.rows + ids.len();
    if n > cfg.max_seq {
        return Err(VskipError::domain(format!(
            "sequence of {n} positions exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let row = x.row_mut(i);
        if i < image.rows {
            row.copy_from_slice(image.row(i));
        } else {
            let id = ids[i - image.rows] as usize;
            if id >= cfg.vocab_size {
                return Err(VskipError::domain(format!("token id {id} outside vocabulary of {}", cfg.vocab_size)));
            }
            row.copy_from_slice(params.token_emb.row(id));
        }
        for (v, p) in row.iter_mut().zip(params.pos_emb.row(i)) {
            *v += p;
        }
    }
    Ok(x)
}

pub(crate) fn run_forward(
    params: &ToyReasonerParams,
    adapter: Option<&LoraAdapter>,
    image: &Matrix,
    ids: &[u32],
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<ForwardCache> {
    let cfg = &params.config;
    if let Some(a) = adapter {
        a.check_matches(cfg)?;
    }
    let mut x = embed(params, image, ids)?;
    let n = x.rows;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut caches = Vec::with_capacity(cfg.layers);

    for (li, layer) in params.layers.iter().enumerate() {
        let lora = |t: LoraTarget| adapter.map(|a| (a.pair(li, t), a.scale()));
        let (q, cq) = linear(&x, &layer.wq, lora(LoraTarget::Query), &mut dropout);
        let (k, ck) = linear(&x, &layer.wk, lora(LoraTarget::Key), &mut dropout);
        let (v, cv) = linear(&x, &layer.wv, lora(LoraTarget::Value), &mut dropout);

        let mut ctx = Matrix::zeros(n, cfg.d_model);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                let row = p.row_mut(i);
                for j in 0..=i {
                    let kj = &k.row(j)[off..off + dh];
                    row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                }
                let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in &mut row[..=i] {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in &mut row[..=i] {
                    *s /= total;
                }
                let crow = &mut ctx.row_mut(i)[off..off + dh];
                for j in 0..=i {
                    let w = p.at(i, j);
                    for (c, vv) in crow.iter_mut().zip(&v.row(j)[off..off + dh]) {
                        *c += w * vv;
                    }
                }
            }
            probs.push(p);
        }

        let (o, co) = linear(&ctx, &layer.wo, lora(LoraTarget::Output), &mut dropout);
        let mut h1 = x.clone();
        h1.add_assign(&o);
        let mut u = xwt(&h1, &layer.w1);
        u.add_row_vector(&layer.b1);
        let act = Matrix::from_vec(u.rows, u.cols, u.data.iter().map(|v| v.tanh()).collect());
        let mut f = xwt(&act, &layer.w2);
        f.add_row_vector(&layer.b2);
        let mut out = h1;
        out.add_assign(&f);

        let lora_cache = match (cq, ck, cv, co) {
            (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
            _ => None,
        };
        caches.push(LayerCache { x, q, k, v, probs, act, lora: lora_cache });
        x = out;
    }

    let mut logits = xwt(&x, &params.w_out);
    logits.add_row_vector(&params.b_out);
    for r in 0..logits.rows {
        log_softmax_in_place(logits.row_mut(r));
    }
    Ok(ForwardCache { layers: caches, logprobs: logits })
}

/// Adapter gradients given `dlogits` (gradient of the loss w.r.t. the
/// pre-softmax logits, one row per position).
pub(crate) fn backward(
    params: &ToyReasonerParams,
    adapter: &LoraAdapter,
    cache: &ForwardCache,
    dlogits: &Matrix,
) -> AdapterGrads {
    let cfg = &params.config;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let scale = adapter.scale();
    let mut grads = AdapterGrads::zeros_like(adapter);
    let mut dx = matmul(dlogits, &params.w_out);

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let lora = lc.lora.as_ref().expect("adapter forward");
        let n = lc.x.rows;
        let gl = &mut grads.layers[li];

        // feed-forward block
        let mut dact = matmul(&dx, &layer.w2);
        for (g, a) in dact.data.iter_mut().zip(&lc.act.data) {
            *g *= 1.0 - a * a;
        }
        let mut dh1 = dx;
        dh1.add_assign(&matmul(&dact, &layer.w1));

        // attention block
        let pair = |t: LoraTarget| adapter.pair(li, t);
        let [gq, gk, gv, go] = gl;
        let dctx = linear_backward(&dh1, &layer.wo, Some((pair(LoraTarget::Output), scale, &lora[3])), Some(go));
        let mut dq = Matrix::zeros(n, cfg.d_model);
        let mut dk = Matrix::zeros(n, cfg.d_model);
        let mut dv = Matrix::zeros(n, cfg.d_model);
        for (h, p) in lc.probs.iter().enumerate() {
            let off = h * dh;
            let mut dp = vec![0.0; n];
            for i in 0..n {
                let dci = &dctx.row(i)[off..off + dh];
                for j in 0..=i {
                    dp[j] = dci.iter().zip(&lc.v.row(j)[off..off + dh]).map(|(a, b)| a * b).sum();
                    let w = p.at(i, j);
                    for (g, c) in dv.row_mut(j)[off..off + dh].iter_mut().zip(dci) {
                        *g += w * c;
                    }
                }
                let dot: f64 = (0..=i).map(|j| p.at(i, j) * dp[j]).sum();
                for j in 0..=i {
                    let ds = p.at(i, j) * (dp[j] - dot) * inv_sqrt;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        *dq.at_mut(i, off + c) += ds * lc.k.at(j, off + c);
                        *dk.at_mut(j, off + c) += ds * lc.q.at(i, off + c);
                    }
                }
            }
        }
        let mut dxl = dh1;
        dxl.add_assign(&linear_backward(&dq, &layer.wq, Some((pair(LoraTarget::Query), scale, &lora[0])), Some(gq)));
        dxl.add_assign(&linear_backward(&dk, &layer.wk, Some((pair(LoraTarget::Key), scale, &lora[1])), Some(gk)));
        dxl.add_assign(&linear_backward(&dv, &layer.wv, Some((pair(LoraTarget::Value), scale, &lora[2])), Some(gv)));
        dx = dxl;
    }
    grads
}

/// Next-token distribution after the prefix and the attention of the last
/// query position.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logprobs: Vec<f64>,
    /// `[layer][head][key]` over the `image_patches + prefix` visible keys.
    pub attention: Vec<Vec<Vec<f64>>>,
}

pub fn forward(
    params: &ToyReasonerParams,
    adapter: Option<&LoraAdapter>,
    image_features: &Matrix,
    token_prefix: &[u32],
) -> Result<ForwardOutput> {
    if image_features.rows + token_prefix.len() > params.config.max_seq {
        return Err(VskipError::domain(format!(
            "prefix of {} tokens does not fit max_seq {}",
            token_prefix.len(),
            params.config.max_seq
        )));
    }
    let cache = run_forward(params, adapter, image_features, token_prefix, None)?;
    let last = cache.seq_len() - 1;
    Ok(ForwardOutput { logprobs: cache.logprobs.row(last).to_vec(), attention: cache.attention_row(last) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Sampling from the temperature-scaled distribution with its own seed.
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedChain {
    pub ids: Vec<u32>,
    /// Model log-prob of each emitted token.
    pub logprobs: Vec<f64>,
    /// Full next-token log-distribution at every step.
    pub step_logprobs: Vec<Vec<f64>>,
    pub attention: AttentionTensor,
    pub image_patches: usize,
    pub prompt_len: usize,
}

impl GeneratedChain {
    pub fn to_trace(
        &self,
        vocab: &Vocabulary,
        trace_id: &str,
        question: &str,
        image_id: &str,
        answer_gt: &str,
        answer_pred: &str,
    ) -> ReasoningTrace {
        ReasoningTrace {
            trace_id: trace_id.to_string(),
            question: question.to_string(),
            image_id: image_id.to_string(),
            image_key_indices: (0..self.image_patches).collect(),
            tokens: self
                .ids
                .iter()
                .zip(&self.logprobs)
                .map(|(&id, &lp)| TokenRecord::new(vocab.word(id), id, lp))
                .collect(),
            attention: AttentionLayout::Full(self.attention.clone()),
            answer_gt: answer_gt.to_string(),
            answer_pred: answer_pred.to_string(),
            attributes: BTreeMap::new(),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn generate_cot(
    params: &ToyReasonerParams,
    adapter: Option<&LoraAdapter>,
    image_features: &Matrix,
    question_ids: &[u32],
    max_len: usize,
    decoding: Decoding,
) -> Result<GeneratedChain> {
    let cfg = &params.config;
    let prompt_len = cfg.image_patches + question_ids.len();
    if max_len == 0 {
        return Err(VskipError::domain("max_len must be at least 1"));
    }
    if prompt_len + max_len > cfg.max_seq {
        return Err(VskipError::domain(format!(
            "prompt of {prompt_len} positions plus {max_len} tokens exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let mut rng = match decoding {
        Decoding::Sample { temperature, seed } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(VskipError::domain(format!("temperature {temperature} must be positive")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Decoding::Greedy => None,
    };
    let keys = prompt_len + max_len - 1;
    let mut attention = AttentionTensor::zeros(cfg.layers, cfg.heads, max_len, keys)?;
    let mut seq = question_ids.to_vec();
    let mut ids = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    let mut step_logprobs = Vec::with_capacity(max_len);

    for t in 0..max_len {
        let out = forward(params, adapter, image_features, &seq)?;
        let next = match (&mut rng, decoding) {
            (Some(rng), Decoding::Sample { temperature, .. }) => {
                let mut scaled: Vec<f64> = out.logprobs.iter().map(|l| l / temperature).collect();
                log_softmax_in_place(&mut scaled);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = scaled.len() - 1;
                for (i, l) in scaled.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
            _ => argmax(&out.logprobs),
        };
        for (l, layer) in out.attention.iter().enumerate() {
            for (h, row) in layer.iter().enumerate() {
                attention.row_mut(l, h, t)[..row.len()].copy_from_slice(row);
            }
        }
        ids.push(next as u32);
        logprobs.push(out.logprobs[next]);
        step_logprobs.push(out.logprobs);
        seq.push(next as u32);
    }
    Ok(GeneratedChain { ids, logprobs, step_logprobs, attention, image_patches: cfg.image_patches, prompt_len })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{image_features, ToyConfig};
    use crate::trace::validate_trace;

    fn small() -> ToyReasonerParams {
        ToyReasonerParams::init(ToyConfig { vocab_size: 20, d_model: 8, layers: 2, heads: 2, ffn_dim: 12, image_patches: 3, max_seq: 24, seed: 5 })
            .unwrap()
    }

    #[test]
    fn zero_output_head_gives_uniform_distribution() {
        let mut p = small();
        p.w_out = Matrix::zeros(p.w_out.rows, p.w_out.cols);
        let img = image_features("i", 3, 8);
        let out = forward(&p, None, &img, &[1, 2]).unwrap();
        let expect = -(20f64).ln();
        assert!(out.logprobs.iter().all(|l| (l - expect).abs() < 1e-12));
    }

    #[test]
    fn distributions_and_rows_normalize() {
        let p = small();
        let img = image_features("i", 3, 8);
        let out = forward(&p, None, &img, &[4, 5, 6]).unwrap();
        let total: f64 = out.logprobs.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(out.attention.len(), 2);
        for layer in &out.attention {
            for row in layer {
                assert_eq!(row.len(), 6);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_delta_adapter_is_invisible() {
        let p = small();
        let a = LoraAdapter::init(&p.config, 2, 4.0, 0.05, 1).unwrap();
        let img = image_features("i", 3, 8);
        assert_eq!(forward(&p, None, &img, &[1, 3]).unwrap(), forward(&p, Some(&a), &img, &[1, 3]).unwrap());
    }

    #[test]
    fn overlong_prefix_is_rejected() {
        let p = small();
        let img = image_features("i", 3, 8);
        assert!(forward(&p, None, &img, &[0; 21]).is_ok());
        assert!(forward(&p, None, &img, &[0; 22]).is_err());
    }

    #[test]
    fn greedy_generation_is_argmax_and_valid() {
        let p = small();
        let img = image_features("i", 3, 8);
        let g = generate_cot(&p, None, &img, &[1, 2], 6, Decoding::Greedy).unwrap();
        assert_eq!(g.ids.len(), 6);
        for (t, dist) in g.step_logprobs.iter().enumerate() {
            assert_eq!(g.ids[t] as usize, argmax(dist));
            assert_eq!(g.logprobs[t], dist[g.ids[t] as usize]);
        }
        let vocab = Vocabulary::standard(64);
        let tr = g.to_trace(&vocab, "g0", "q", "i", "", "");
        assert_eq!(validate_trace(&tr), vec![]);
        let one = generate_cot(&p, None, &img, &[1, 2], 1, Decoding::Greedy).unwrap();
        assert_eq!(one.ids.len(), 1);
        assert!(generate_cot(&p, None, &img, &[1, 2], 20, Decoding::Greedy).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let p = small();
        let img = image_features("i", 3, 8);
        let dec = Decoding::Sample { temperature: 1.5, seed: 9 };
        let a = generate_cot(&p, None, &img, &[1], 8, dec).unwrap();
        let b = generate_cot(&p, None, &img, &[1], 8, dec).unwrap();
        assert_eq!(a, b);
    }
}
