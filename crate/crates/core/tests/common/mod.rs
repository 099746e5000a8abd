//! Random trace builders and independent reference implementations shared by
//! the integration tests and the acceptance harness.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vskip_core::gating::{keep_count, Strategy};
use vskip_core::trace::{AttentionLayout, AttentionTensor, ReasoningTrace, TokenRecord, VisualMass};

/// A valid trace with a full causal attention tensor. Image keys are a random
/// non-empty subset of the prompt keys.
pub fn random_full_trace(rng: &mut ChaCha8Rng, layers: usize, heads: usize, t_len: usize) -> ReasoningTrace {
    let prompt = rng.gen_range(1..=4);
    let keys = prompt + t_len - 1;
    let mut image: Vec<usize> = (0..prompt).filter(|_| rng.gen_bool(0.6)).collect();
    if image.is_empty() {
        image.push(rng.gen_range(0..prompt));
    }
    let mut weights = vec![0.0; layers * heads * t_len * keys];
    for l in 0..layers {
        for h in 0..heads {
            for t in 0..t_len {
                let visible = prompt + t;
                let base = ((l * heads + h) * t_len + t) * keys;
                // Occasionally concentrate the row to exercise extreme masses.
                let raw: Vec<f64> = if rng.gen_bool(0.1) {
                    let hot = rng.gen_range(0..visible);
                    (0..visible).map(|k| if k == hot { 1.0 } else { 0.0 }).collect()
                } else {
                    (0..visible).map(|_| rng.gen::<f64>() + 1e-3).collect()
                };
                let total: f64 = raw.iter().sum();
                for (k, w) in raw.iter().enumerate() {
                    weights[base + k] = w / total;
                }
            }
        }
    }
    let tokens = (0..t_len)
        .map(|t| {
            let lp = if rng.gen_bool(0.1) { 0.0 } else { -rng.gen_range(0.0..8.0) };
            TokenRecord::new(format!("w{t}"), t as u32, lp)
        })
        .collect();
    ReasoningTrace {
        trace_id: format!("r{}", rng.gen::<u32>()),
        question: "q".into(),
        image_id: "img".into(),
        image_key_indices: image,
        tokens,
        attention: AttentionLayout::Full(AttentionTensor::new(layers, heads, t_len, keys, weights).unwrap()),
        answer_gt: "a".into(),
        answer_pred: "a".into(),
        attributes: BTreeMap::new(),
    }
}

/// Per-token visual mass by direct summation, written independently of the
/// library's derivation.
pub fn mass_by_loops(trace: &ReasoningTrace) -> Vec<Vec<Vec<f64>>> {
    let AttentionLayout::Full(att) = &trace.attention else { panic!("needs a full tensor") };
    let mut out = vec![vec![vec![0.0; att.queries()]; att.heads()]; att.layers()];
    for l in 0..att.layers() {
        for h in 0..att.heads() {
            for t in 0..att.queries() {
                let row = att.row(l, h, t);
                let mut s = 0.0;
                for &k in &trace.image_key_indices {
                    s += row[k];
                }
                out[l][h][t] = s;
            }
        }
    }
    out
}

pub fn with_mass_layout(trace: &ReasoningTrace) -> ReasoningTrace {
    let nested = mass_by_loops(trace);
    ReasoningTrace { attention: AttentionLayout::VisualMass(VisualMass::from_nested(&nested).unwrap()), ..trace.clone() }
}

/// Mean over focus layers of the max over heads, as a triple loop.
pub fn anchor_score_by_loops(mass: &[Vec<Vec<f64>>], focus: &[usize], t: usize) -> f64 {
    let mut total = 0.0;
    for &l in focus {
        let mut best = f64::NEG_INFINITY;
        for h in 0..mass[l].len() {
            if mass[l][h][t] > best {
                best = mass[l][h][t];
            }
        }
        total += best;
    }
    total / focus.len() as f64
}

/// Position `i` survives a single path iff fewer than `k` scores are strictly
/// greater than its own.
pub fn rank_mask(scores: &[f64], gamma: f64) -> Vec<bool> {
    let n = scores.len();
    let k = ((gamma * n as f64) - 1e-9).ceil().max(1.0).min(n as f64) as usize;
    (0..n).map(|i| scores.iter().filter(|&&s| s > scores[i]).count() < k).collect()
}

/// The random strategy re-derived from its documented stream: ChaCha8 seeded
/// with `seed ^ fnv1a64(trace_id)`, `k` Fisher-Yates steps from the front.
pub fn random_oracle(len: usize, gamma: f64, seed: u64, trace_id: &str) -> Vec<bool> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in trace_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    let k = keep_count(gamma, len);
    let mut slots: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..len);
        slots.swap(i, j);
    }
    let mut out = vec![false; len];
    for &p in &slots[..k] {
        out[p] = true;
    }
    out
}

pub fn oracle_mask(strategy: Strategy, s_text: &[f64], s_vis: &[f64], gamma: f64, seed: u64, trace_id: &str) -> Vec<bool> {
    let n = s_text.len();
    let text = rank_mask(s_text, gamma);
    let vis = rank_mask(s_vis, gamma);
    match strategy {
        Strategy::Union => (0..n).map(|i| text[i] || vis[i]).collect(),
        Strategy::TextOnly => text,
        Strategy::VisionOnly => vis,
        Strategy::Intersection => (0..n).map(|i| text[i] && vis[i]).collect(),
        Strategy::Random => random_oracle(n, gamma, seed, trace_id),
        Strategy::Truncation => {
            let k = keep_count(gamma, n);
            (0..n).map(|i| i < k).collect()
        }
    }
}

/// Edit distances from `a` to every string over `alphabet` of length at most
/// `max_len`, by breadth-first search over single insert, delete and
/// substitute moves. Exact for targets within the bound because some optimal
/// edit path deletes first and inserts last, so it never passes through a
/// string longer than `max(|a|, |b|)`.
pub fn bfs_edit_distances(a: &str, alphabet: &[char], max_len: usize) -> HashMap<String, usize> {
    let start: Vec<char> = a.chars().collect();
    let mut dist = HashMap::from([(a.to_string(), 0usize)]);
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s.iter().collect::<String>()];
        let mut next = Vec::new();
        for i in 0..s.len() {
            let mut del = s.clone();
            del.remove(i);
            next.push(del);
            for &c in alphabet {
                if c != s[i] {
                    let mut sub = s.clone();
                    sub[i] = c;
                    next.push(sub);
                }
            }
        }
        if s.len() < max_len {
            for i in 0..=s.len() {
                for &c in alphabet {
                    let mut ins = s.clone();
                    ins.insert(i, c);
                    next.push(ins);
                }
            }
        }
        for n in next {
            let key: String = n.iter().collect();
            if let std::collections::hash_map::Entry::Vacant(slot) = dist.entry(key) {
                slot.insert(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Every string over `alphabet` of length at most `max_len`.
pub fn all_strings(alphabet: &[char], max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &c in alphabet {
                let mut t = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// ANLS from an externally supplied distance.
pub fn anls_from_distance(p: &str, g: &str, dist: usize, tau: f64) -> f64 {
    let longest = p.chars().count().max(g.chars().count());
    if longest == 0 {
        return 1.0;
    }
    let nl = dist as f64 / longest as f64;
    if nl < tau {
        1.0 - nl
    } else {
        0.0
    }
}

/// Random normalized table over `(c, a, v, q)` with row-major order `c,a,v,q`;
/// some entries are zeroed to exercise the `0 log 0` convention.
pub fn random_table(rng: &mut ChaCha8Rng, sizes: [usize; 4]) -> Vec<f64> {
    let n: usize = sizes.iter().product();
    let mut p: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen::<f64>() }).collect();
    if p.iter().all(|&x| x == 0.0) {
        p[0] = 1.0;
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

fn entropy_of(marginal: &BTreeMap<Vec<usize>, f64>) -> f64 {
    marginal.values().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Joint entropy of the axes in `keep`, by explicit marginalization.
pub fn marginal_entropy(p: &[f64], sizes: [usize; 4], keep: &[usize]) -> f64 {
    let mut marginal: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for (idx, &pr) in p.iter().enumerate() {
        let mut rem = idx;
        let mut coords = [0usize; 4];
        for axis in (0..4).rev() {
            coords[axis] = rem % sizes[axis];
            rem /= sizes[axis];
        }
        let key: Vec<usize> = keep.iter().map(|&a| coords[a]).collect();
        *marginal.entry(key).or_insert(0.0) += pr;
    }
    entropy_of(&marginal)
}

/// `I(C;V|Q) = H(C,Q) + H(V,Q) - H(C,V,Q) - H(Q)` and `I(C;A)`.
pub fn mi_oracle(p: &[f64], sizes: [usize; 4]) -> (f64, f64) {
    let (c, a, v, q) = (0, 1, 2, 3);
    let h = |axes: &[usize]| marginal_entropy(p, sizes, axes);
    let anchoring = h(&[c, q]) + h(&[v, q]) - h(&[c, v, q]) - h(&[q]);
    let sufficiency = h(&[c]) + h(&[a]) - h(&[c, a]);
    (sufficiency, anchoring)
}
