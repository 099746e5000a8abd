//! Exact information quantities on small enumerable joint distributions over
//! (compressed chain, answer, image, question).

use serde::{Deserialize, Serialize};

use crate::error::{Result, VskipError};

pub const MAX_ALPHABET: usize = 16;
const NORMALIZATION_TOL: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-10;

/// Probability table `p(c, a, v, q)`, stored row-major in that axis order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    sizes: [usize; 4],
    probs: Vec<f64>,
}

impl JointTable {
    pub fn new(sizes: [usize; 4], probs: Vec<f64>) -> Result<Self> {
        if sizes.iter().any(|&s| s == 0 || s > MAX_ALPHABET) {
            return Err(VskipError::domain(format!("alphabet sizes {sizes:?} must lie in 1..={MAX_ALPHABET}")));
        }
        if probs.len() != sizes.iter().product::<usize>() {
            return Err(VskipError::domain("table size does not match alphabet sizes"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(VskipError::domain(format!("table entry {p} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(VskipError::domain(format!("table sums to {total}, expected 1")));
        }
        Ok(JointTable { sizes, probs })
    }

    pub fn sizes(&self) -> [usize; 4] {
        self.sizes
    }

    pub fn get(&self, c: usize, a: usize, v: usize, q: usize) -> f64 {
        let [_, na, nv, nq] = self.sizes;
        self.probs[((c * na + a) * nv + v) * nq + q]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiDiagnostic {
    /// `I(C; A)` in nats.
    pub sufficiency: f64,
    /// `I(C; V | Q)` in nats.
    pub anchoring: f64,
    pub objective: f64,
    pub h_c_given_q: f64,
    pub h_c_given_vq: f64,
}

fn plogp_ratio(p: f64, ratio: f64) -> f64 {
    if p > 0.0 {
        p * ratio.ln()
    } else {
        0.0
    }
}

pub fn mi_diagnostic(table: &JointTable, lambda: f64) -> Result<MiDiagnostic> {
    let [nc, na, nv, nq] = table.sizes;
    let mut p_ca = vec![0.0; nc * na];
    let mut p_c = vec![0.0; nc];
    let mut p_a = vec![0.0; na];
    let mut p_cvq = vec![0.0; nc * nv * nq];
    let mut p_cq = vec![0.0; nc * nq];
    let mut p_vq = vec![0.0; nv * nq];
    let mut p_q = vec![0.0; nq];
    for c in 0..nc {
        for a in 0..na {
            for v in 0..nv {
                for q in 0..nq {
                    let p = table.get(c, a, v, q);
                    p_ca[c * na + a] += p;
                    p_c[c] += p;
                    p_a[a] += p;
                    p_cvq[(c * nv + v) * nq + q] += p;
                    p_cq[c * nq + q] += p;
                    p_vq[v * nq + q] += p;
                    p_q[q] += p;
                }
            }
        }
    }

    let mut sufficiency = 0.0;
    for c in 0..nc {
        for a in 0..na {
            let p = p_ca[c * na + a];
            sufficiency += plogp_ratio(p, p / (p_c[c] * p_a[a]));
        }
    }
    let mut anchoring = 0.0;
    let mut h_c_given_vq = 0.0;
    for c in 0..nc {
        for v in 0..nv {
            for q in 0..nq {
                let p = p_cvq[(c * nv + v) * nq + q];
                anchoring += plogp_ratio(p, p * p_q[q] / (p_cq[c * nq + q] * p_vq[v * nq + q]));
                h_c_given_vq -= plogp_ratio(p, p / p_vq[v * nq + q]);
            }
        }
    }
    let mut h_c_given_q = 0.0;
    for c in 0..nc {
        for q in 0..nq {
            let p = p_cq[c * nq + q];
            h_c_given_q -= plogp_ratio(p, p / p_q[q]);
        }
    }
    let gap = anchoring - (h_c_given_q - h_c_given_vq);
    if gap.abs() > IDENTITY_TOL {
        return Err(VskipError::domain(format!(
            "conditional mutual information disagrees with its entropy decomposition by {gap:e}"
        )));
    }
    Ok(MiDiagnostic { sufficiency, anchoring, objective: sufficiency + lambda * anchoring, h_c_given_q, h_c_given_vq })
}

/// Collapses the listed chain symbols into one trailing "pruned" symbol.
pub fn merge_chain_symbols(table: &JointTable, merged: &[usize]) -> Result<JointTable> {
    let [nc, na, nv, nq] = table.sizes;
    if let Some(&s) = merged.iter().find(|&&s| s >= nc) {
        return Err(VskipError::domain(format!("chain symbol {s} out of range for alphabet of {nc}")));
    }
    if merged.is_empty() {
        return Ok(table.clone());
    }
    let kept: Vec<usize> = (0..nc).filter(|c| !merged.contains(c)).collect();
    let new_nc = kept.len() + 1;
    let mut probs = vec![0.0; new_nc * na * nv * nq];
    for c in 0..nc {
        let target = kept.iter().position(|&k| k == c).unwrap_or(new_nc - 1);
        for a in 0..na {
            for v in 0..nv {
                for q in 0..nq {
                    probs[((target * na + a) * nv + v) * nq + q] += table.get(c, a, v, q);
                }
            }
        }
    }
    Ok(JointTable { sizes: [new_nc, na, nv, nq], probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a table from a closure over (c, a, v, q).
    fn table(sizes: [usize; 4], f: impl Fn(usize, usize, usize, usize) -> f64) -> JointTable {
        let [nc, na, nv, nq] = sizes;
        let mut probs = Vec::new();
        for c in 0..nc {
            for a in 0..na {
                for v in 0..nv {
                    for q in 0..nq {
                        probs.push(f(c, a, v, q));
                    }
                }
            }
        }
        JointTable::new(sizes, probs).unwrap()
    }

    #[test]
    fn independent_chain_has_no_anchoring() {
        // p(c|q) does not depend on v
        let t = table([2, 1, 3, 2], |c, _, _, q| {
            let pq = 0.5;
            let pv = 1.0 / 3.0;
            let pc = if q == 0 { [0.2, 0.8][c] } else { [0.6, 0.4][c] };
            pq * pv * pc
        });
        let d = mi_diagnostic(&t, 1.0).unwrap();
        assert!(d.anchoring.abs() < 1e-14);
    }

    #[test]
    fn copy_channel_anchoring_is_log2() {
        let t = table([2, 1, 2, 1], |c, _, v, _| if c == v { 0.5 } else { 0.0 });
        let d = mi_diagnostic(&t, 2.0).unwrap();
        assert!((d.anchoring - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((d.h_c_given_q - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d.h_c_given_vq, 0.0);
        assert_eq!(d.sufficiency, 0.0);
        assert!((d.objective - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn answer_copy_gives_sufficiency() {
        let t = table([2, 2, 1, 1], |c, a, _, _| if c == a { 0.5 } else { 0.0 });
        let d = mi_diagnostic(&t, 0.0).unwrap();
        assert!((d.sufficiency - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_tables_are_rejected() {
        assert!(JointTable::new([1, 1, 1, 2], vec![0.5, 0.6]).is_err());
        assert!(JointTable::new([1, 1, 1, 2], vec![1.5, -0.5]).is_err());
        assert!(JointTable::new([17, 1, 1, 1], vec![1.0 / 17.0; 17]).is_err());
    }

    #[test]
    fn merging_everything_removes_anchoring() {
        let t = table([2, 1, 2, 1], |c, _, v, _| if c == v { 0.5 } else { 0.0 });
        let m = merge_chain_symbols(&t, &[0, 1]).unwrap();
        assert_eq!(m.sizes(), [1, 1, 2, 1]);
        assert!(mi_diagnostic(&m, 1.0).unwrap().anchoring.abs() < 1e-15);
        assert!(merge_chain_symbols(&t, &[2]).is_err());
    }
}
