//! Deep metric learning objective.
//!
//! For a batch of composed queries `ψ_i` and target embeddings `φ_i⁺`, each
//! anchor `i` gets `M` candidate sets `N_i^m` holding its positive plus
//! `K − 1` other targets from the batch. The loss is the mean softmax
//! cross-entropy of picking the positive out of each set:
//!
//! ```text
//! L = −1/(MB) Σ_i Σ_m log( exp κ(ψ_i, φ_i⁺) / Σ_{φ_j ∈ N_i^m} exp κ(ψ_i, φ_j) )
//! ```
//!
//! `K = 2` with `M = B − 1` is the soft-triplet loss; `K = B` with `M = 1` is
//! plain in-batch softmax classification.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Similarity kernel κ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `a · b`
    #[default]
    Dot,
    /// `−‖a − b‖²`
    NegL2,
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Dot => "dot",
            Kernel::NegL2 => "neg_l2",
        })
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Kernel::Dot),
            "neg_l2" => Ok(Kernel::NegL2),
            _ => Err(Error::Argument(format!("unknown kernel `{s}` (expected dot or neg_l2)"))),
        }
    }
}

/// κ(a, b) for plain vectors.
pub fn similarity(a: &[f64], b: &[f64], kernel: Kernel) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("similarity", &[a.len()], &[b.len()]));
    }
    Ok(match kernel {
        Kernel::Dot => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Kernel::NegL2 => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
    })
}

/// `K`, `M` and kernel for one batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossConfig {
    pub batch_size: usize,
    pub k: usize,
    pub m: usize,
    pub kernel: Kernel,
}

fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

impl LossConfig {
    /// Picks `M` from `K`: `B − 1` for `K = 2`, `1` for `K = B`, and `B`
    /// (capped by the number of distinct sets) in between.
    pub fn new(batch_size: usize, k: usize, kernel: Kernel) -> Result<Self> {
        let m = if k == batch_size {
            1
        } else if k == 2 {
            batch_size.saturating_sub(1)
        } else {
            let distinct = binomial(batch_size.saturating_sub(1), k.saturating_sub(1));
            (batch_size as u128).min(distinct) as usize
        };
        Self::with_m(batch_size, k, m, kernel)
    }

    pub fn with_m(batch_size: usize, k: usize, m: usize, kernel: Kernel) -> Result<Self> {
        let cfg = LossConfig {
            batch_size,
            k,
            m,
            kernel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (b, k, m) = (self.batch_size, self.k, self.m);
        if b == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if k > b || k == 0 || (k == 1 && b != 1) {
            return Err(Error::Argument(format!("K={k} must satisfy 2 <= K <= B={b}")));
        }
        if k == b && m != 1 {
            return Err(Error::Argument(format!("K=B requires M=1, got M={m}")));
        }
        if k == 2 && k != b && m != b - 1 {
            return Err(Error::Argument(format!("K=2 requires M=B-1={}, got M={m}", b - 1)));
        }
        if m == 0 || m as u128 > binomial(b - 1, k - 1) {
            return Err(Error::Argument(format!(
                "M={m} infeasible: only {} distinct sets of size K={k} from B={b}",
                binomial(b - 1, k - 1)
            )));
        }
        Ok(())
    }
}

/// Candidate sets per anchor. `sets[i][m][0] == i` is the positive; the
/// remaining members are distinct negatives `j ≠ i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSets {
    sets: Vec<Vec<Vec<usize>>>,
}

impl NegativeSets {
    /// Builds from explicit per-anchor sets after validating them.
    pub fn from_sets(sets: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        let ns = NegativeSets { sets };
        ns.validate()?;
        Ok(ns)
    }

    pub fn batch_size(&self) -> usize {
        self.sets.len()
    }

    /// Total number of sets over all anchors (`M·B`).
    pub fn num_sets(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<Vec<usize>>> {
        self.sets.iter()
    }

    pub fn anchor(&self, i: usize) -> &[Vec<usize>] {
        &self.sets[i]
    }

    /// Checks every structural rule: positive first, no positive among the
    /// negatives, no repeated member, no repeated set, all in range.
    pub fn validate(&self) -> Result<()> {
        let b = self.sets.len();
        for (i, anchor_sets) in self.sets.iter().enumerate() {
            if anchor_sets.is_empty() {
                return Err(Error::Argument(format!("anchor {i} has no sets")));
            }
            let mut seen_sets = HashSet::new();
            for set in anchor_sets {
                if set.first() != Some(&i) {
                    return Err(Error::Argument(format!("set {set:?} of anchor {i} must start with {i}")));
                }
                let members: HashSet<_> = set.iter().collect();
                if members.len() != set.len() || set.iter().any(|&j| j >= b) {
                    return Err(Error::Argument(format!("set {set:?} of anchor {i} is malformed")));
                }
                let mut key = set[1..].to_vec();
                key.sort_unstable();
                if !seen_sets.insert(key) {
                    return Err(Error::Argument(format!("anchor {i} has duplicate set {set:?}")));
                }
            }
        }
        Ok(())
    }

    /// `(anchor, negative)` pairs of a `K = 2` structure.
    pub fn triplet_pairs(&self) -> Result<Vec<(usize, usize)>> {
        let mut pairs = Vec::with_capacity(self.num_sets());
        for (i, anchor_sets) in self.sets.iter().enumerate() {
            for set in anchor_sets {
                let &[_, j] = set.as_slice() else {
                    return Err(Error::Argument(format!(
                        "soft-triplet form needs K=2 sets, got {set:?}"
                    )));
                };
                pairs.push((i, j));
            }
        }
        Ok(pairs)
    }
}

/// Draws the `{N_i^m}` structure for a batch.
///
/// `K = 2` enumerates every other target once, `K = B` uses the whole batch
/// as one set, and intermediate `K` samples `M` distinct random sets per
/// anchor (deterministic in `seed`).
pub fn build_negative_sets(batch: usize, k: usize, m: usize, seed: u64) -> Result<NegativeSets> {
    LossConfig::with_m(batch, k, m, Kernel::Dot)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::with_capacity(batch);
    for i in 0..batch {
        let others: Vec<usize> = (0..batch).filter(|&j| j != i).collect();
        let anchor_sets = if k == batch {
            let mut set = vec![i];
            set.extend(&others);
            vec![set]
        } else if k == 2 {
            others.iter().map(|&j| vec![i, j]).collect()
        } else {
            let mut seen = HashSet::new();
            let mut chosen = Vec::with_capacity(m);
            while chosen.len() < m {
                let mut neg: Vec<usize> = others.choose_multiple(&mut rng, k - 1).copied().collect();
                neg.sort_unstable();
                if seen.insert(neg.clone()) {
                    let mut set = vec![i];
                    set.extend(neg);
                    chosen.push(set);
                }
            }
            chosen
        };
        sets.push(anchor_sets);
    }
    Ok(NegativeSets { sets })
}

/// General softmax form: similarity matrix of queries against batch targets,
/// then cross-entropy over each candidate set.
pub fn metric_loss(g: &mut Graph, queries: Var, targets: Var, sets: &NegativeSets, kernel: Kernel) -> Result<Var> {
    if g.shape(queries).first() == Some(&0) || sets.batch_size() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let scores = g.similarity(queries, targets, kernel)?;
    g.softmax_loss(scores, sets)
}

/// Soft-triplet form `mean log(1 + exp(κ(ψ_i, φ_j) − κ(ψ_i, φ_i⁺)))`; equal to
/// [`metric_loss`] when every set has `K = 2`.
pub fn soft_triplet_loss(
    g: &mut Graph,
    queries: Var,
    targets: Var,
    sets: &NegativeSets,
    kernel: Kernel,
) -> Result<Var> {
    let pairs = sets.triplet_pairs()?;
    let scores = g.similarity(queries, targets, kernel)?;
    g.soft_triplet_loss(scores, &pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0], Kernel::Dot).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 1.0], &[1.0, 1.0], Kernel::NegL2).unwrap(), 0.0);
        assert_eq!(similarity(&[0.0, 0.0], &[3.0, 4.0], Kernel::NegL2).unwrap(), -25.0);
        assert!(similarity(&[1.0], &[1.0, 2.0], Kernel::Dot).is_err());
    }

    #[test]
    fn k2_enumerates_all_singletons() {
        let sets = build_negative_sets(3, 2, 2, 0).unwrap();
        assert_eq!(sets.anchor(0), &[vec![0, 1], vec![0, 2]]);
        assert_eq!(sets.anchor(1), &[vec![1, 0], vec![1, 2]]);
        assert_eq!(sets.anchor(2), &[vec![2, 0], vec![2, 1]]);
    }

    #[test]
    fn k_equals_b_is_one_full_set() {
        let sets = build_negative_sets(4, 4, 1, 0).unwrap();
        for i in 0..4 {
            let set = &sets.anchor(i)[0];
            assert_eq!(set[0], i);
            let mut all = set.clone();
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn intermediate_k_sets_are_valid_and_seeded() {
        let a = build_negative_sets(5, 3, 4, 11).unwrap();
        a.validate().unwrap();
        assert_eq!(a.num_sets(), 20);
        assert_eq!(a, build_negative_sets(5, 3, 4, 11).unwrap());
        // C(4, 2) = 6 distinct sets available per anchor.
        assert!(build_negative_sets(5, 3, 7, 0).is_err());
        build_negative_sets(5, 3, 6, 0).unwrap().validate().unwrap();
    }

    #[test]
    fn config_invariants() {
        let c = LossConfig::new(16, 2, Kernel::Dot).unwrap();
        assert_eq!(c.m, 15);
        assert_eq!(LossConfig::new(16, 16, Kernel::Dot).unwrap().m, 1);
        assert_eq!(LossConfig::new(16, 4, Kernel::Dot).unwrap().m, 16);
        assert!(LossConfig::with_m(16, 2, 3, Kernel::Dot).is_err());
        assert!(LossConfig::with_m(4, 5, 1, Kernel::Dot).is_err());
        assert!(LossConfig::new(1, 1, Kernel::Dot).is_ok());
    }

    #[test]
    fn validator_catches_positive_as_negative() {
        assert!(NegativeSets::from_sets(vec![vec![vec![0, 0]], vec![vec![1, 0]]]).is_err());
        assert!(NegativeSets::from_sets(vec![vec![vec![1, 0]], vec![vec![1, 0]]]).is_err());
        assert!(NegativeSets::from_sets(vec![vec![vec![0, 1], vec![0, 1]], vec![vec![1, 0]]]).is_err());
    }
}
