//! Training losses: saliency alignment (MSE), pairwise logistic ranking,
//! language-model cross-entropy, the keep-ratio penalty and their weighted
//! total.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{RankPair, Real, Tensor};
use crate::{Error, Result};

pub const DEFAULT_PAIR_BUDGET: usize = 4096;

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseOut {
    pub value: f64,
    pub included: usize,
    /// No position was included; the term contributes 0.
    pub empty: bool,
}

/// Mean squared difference over positions with `include[i]` set.
pub fn mse_loss(keep_prob: &[f64], target: &[f64], include: &[bool]) -> Result<MseOut> {
    if keep_prob.len() != target.len() || include.len() != target.len() {
        return Err(Error::Input(format!(
            "mse over {} predictions, {} targets, {} include flags",
            keep_prob.len(),
            target.len(),
            include.len()
        )));
    }
    let (sum, n) = keep_prob
        .iter()
        .zip(target)
        .zip(include)
        .filter(|(_, &inc)| inc)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| (s + (p - t) * (p - t), n + 1));
    Ok(MseOut {
        value: if n == 0 { 0.0 } else { sum / n as f64 },
        included: n,
        empty: n == 0,
    })
}

/// Ranking pairs over the included positions. All `i < j` pairs are used
/// when they fit in `budget`; otherwise `budget` pairs are drawn uniformly
/// with replacement and weighted by `total / budget`. Tied targets are
/// skipped. Returns the pairs and the total pair count.
pub fn rank_pairs<R: Rng + ?Sized>(
    target: &[f64],
    include: &[bool],
    budget: usize,
    rng: &mut R,
) -> (Vec<RankPair>, usize) {
    let idx: Vec<usize> = (0..target.len()).filter(|&i| include[i]).collect();
    let m = idx.len();
    let total = m * m.saturating_sub(1) / 2;
    let pair = |a: usize, b: usize, weight: f64| {
        let (i, j) = (idx[a.min(b)], idx[a.max(b)]);
        let d = target[i] - target[j];
        (d != 0.0).then(|| RankPair {
            i,
            j,
            sign: d.signum(),
            weight,
        })
    };
    if total <= budget {
        let mut out = Vec::with_capacity(total);
        for a in 0..m {
            for b in a + 1..m {
                out.extend(pair(a, b, 1.0));
            }
        }
        return (out, total);
    }
    let weight = total as f64 / budget as f64;
    let mut out = Vec::with_capacity(budget);
    for _ in 0..budget {
        let a = rng.random_range(0..m);
        let mut b = rng.random_range(0..m - 1);
        if b >= a {
            b += 1;
        }
        out.extend(pair(a, b, weight));
    }
    (out, total)
}

pub fn rank_loss_from_pairs(scores: &[f64], pairs: &[RankPair]) -> f64 {
    pairs
        .iter()
        .map(|p| p.weight * softplus(-(scores[p.i] - scores[p.j]) * p.sign))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankOut {
    pub value: f64,
    pub pairs_used: usize,
    pub pairs_total: usize,
}

/// `sum_{i<j} log(1 + exp(-(s_i - s_j) sign(t_i - t_j)))` over included
/// positions, subsampled beyond `budget` pairs.
pub fn ranking_loss_stage<R: Rng + ?Sized>(
    scores: &[f64],
    target: &[f64],
    include: &[bool],
    budget: usize,
    rng: &mut R,
) -> Result<RankOut> {
    if scores.len() != target.len() || include.len() != target.len() {
        return Err(Error::Input(format!(
            "ranking over {} scores, {} targets, {} include flags",
            scores.len(),
            target.len(),
            include.len()
        )));
    }
    let (pairs, total) = rank_pairs(target, include, budget.max(1), rng);
    Ok(RankOut {
        value: rank_loss_from_pairs(scores, &pairs),
        pairs_used: pairs.len(),
        pairs_total: total,
    })
}

/// Exact per-stage loss with every position included.
pub fn ranking_loss_exact(scores: &[f64], target: &[f64]) -> Result<f64> {
    let include = vec![true; scores.len()];
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Ok(ranking_loss_stage(scores, target, &include, usize::MAX, &mut unused)?.value)
}

/// Sum of exact stage losses.
pub fn ranking_loss_total(stages: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if stages.is_empty() {
        return Err(Error::Input("ranking loss needs at least one stage".into()));
    }
    stages.iter().map(|(s, t)| ranking_loss_exact(s, t)).sum()
}

/// Mean next-token negative log-likelihood over included positions.
pub fn lm_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize], include: &[bool]) -> Result<f64> {
    if logits.rows() != labels.len() || include.len() != labels.len() {
        return Err(Error::Input(format!(
            "cross-entropy over {} rows, {} labels, {} include flags",
            logits.rows(),
            labels.len(),
            include.len()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, (&y, &inc)) in labels.iter().zip(include).enumerate() {
        if !inc {
            continue;
        }
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::Input(format!("label {y} outside vocabulary {}", row.len())));
        }
        let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.f64() - m).exp()).sum();
        total += m + z.ln() - row[y].f64();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input("cross-entropy with every position excluded".into()));
    }
    Ok(total / n as f64)
}

/// `sum_s (mean(keep_prob_s) - ratio_s)^2`.
pub fn ratio_loss(keep_probs: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    if keep_probs.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} stage masks for {} target ratios",
            keep_probs.len(),
            targets.len()
        )));
    }
    Ok(keep_probs
        .iter()
        .zip(targets)
        .map(|(p, &r)| {
            let mean = if p.is_empty() {
                0.0
            } else {
                p.iter().sum::<f64>() / p.len() as f64
            };
            (mean - r) * (mean - r)
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub mse: f64,
    pub rank: f64,
    pub ratio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            mse: 1.0,
            rank: 1.0,
            ratio: 1.0,
        }
    }
}

/// Weighted sum of the components; `ratio` participates only when present.
pub fn total_loss(cls: f64, mse: f64, rank: f64, ratio: Option<f64>, w: &LossWeights) -> Result<f64> {
    let parts = [
        ("cls", cls),
        ("mse", mse),
        ("rank", rank),
        ("ratio", ratio.unwrap_or(0.0)),
    ];
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss component {name} = {v}")));
    }
    Ok(w.cls * cls + w.mse * mse + w.rank * rank + ratio.map_or(0.0, |r| w.ratio * r))
}

/// One metrics-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub cls: f64,
    pub mse: f64,
    pub rank: f64,
    pub rank_stages: Vec<f64>,
    pub mse_stages: Vec<f64>,
    pub ratio: Option<f64>,
    pub total: f64,
    pub pair_counts: Vec<usize>,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss report serializes")
    }
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn mse_examples() {
        let all = [true, true];
        assert_eq!(mse_loss(&[0.3, 0.7], &[0.3, 0.7], &all).unwrap().value, 0.0);
        assert_eq!(mse_loss(&[1.0, 0.0], &[0.0, 1.0], &all).unwrap().value, 1.0);
        assert_eq!(mse_loss(&[0.5, 0.5], &[0.0, 1.0], &all).unwrap().value, 0.25);
        let e = mse_loss(&[0.5, 0.5], &[0.0, 1.0], &[false, false]).unwrap();
        assert!(e.empty && e.value == 0.0);
        assert_eq!(mse_loss(&[0.9, 0.5], &[0.0, 1.0], &[false, true]).unwrap().value, 0.25);
    }

    #[test]
    fn ranking_two_token_examples() {
        let concordant = ranking_loss_exact(&[2.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((concordant - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((concordant - 0.126_928_011_042_972_6).abs() < 1e-9);
        let discordant = ranking_loss_exact(&[0.0, 2.0], &[1.0, 0.0]).unwrap();
        assert!((discordant - 2.126_928_011_042_972_6).abs() < 1e-9);
        assert_eq!(ranking_loss_exact(&[0.3, 4.0, -1.0], &[2.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn ranking_total_is_additive() {
        let st = (vec![0.1, 0.9, -0.3], vec![1.0, 3.0, 2.0]);
        let one = ranking_loss_exact(&st.0, &st.1).unwrap();
        assert_eq!(ranking_loss_total(std::slice::from_ref(&st)).unwrap(), one);
        let three = ranking_loss_total(&[st.clone(), st.clone(), st]).unwrap();
        assert!((three - 3.0 * one).abs() < 1e-12);
        assert!(ranking_loss_total(&[]).is_err());
    }

    #[test]
    fn ranking_total_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stages: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| {
                let s = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
                let t = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
                (s, t)
            })
            .collect();
        let mut oracle = 0.0;
        for (s, t) in &stages {
            for i in 0..7 {
                for j in i + 1..7 {
                    let sign: f64 = (t[i] - t[j]).signum();
                    oracle += (1.0 + (-(s[i] - s[j]) * sign).exp()).ln();
                }
            }
        }
        assert!((ranking_loss_total(&stages).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn ranking_translation_invariant() {
        let s = [0.3, -1.2, 2.2, 0.0];
        let t = [0.1, 0.5, 0.9, 0.2];
        let shifted: Vec<f64> = s.iter().map(|v| v + 7.5).collect();
        let a = ranking_loss_exact(&s, &t).unwrap();
        let b = ranking_loss_exact(&shifted, &t).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn optimal_order_beats_swaps_exhaustively() {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        for n in 2..=5 {
            for perm in perms(n) {
                let target: Vec<f64> = perm.iter().map(|&v| v as f64).collect();
                let best = ranking_loss_exact(&target, &target).unwrap();
                for i in 0..n {
                    for j in i + 1..n {
                        let mut sw = target.clone();
                        sw.swap(i, j);
                        assert!(best < ranking_loss_exact(&sw, &target).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn subsampled_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let inc = vec![true; 64];
        let exact = ranking_loss_exact(&s, &t).unwrap();
        let draws = 1000;
        let mean: f64 = (0..draws)
            .map(|_| ranking_loss_stage(&s, &t, &inc, 256, &mut rng).unwrap().value)
            .sum::<f64>()
            / draws as f64;
        assert!((mean - exact).abs() / exact < 0.02, "{mean} vs {exact}");
        let out = ranking_loss_stage(&s, &t, &inc, 256, &mut rng).unwrap();
        assert_eq!(out.pairs_total, 64 * 63 / 2);
        assert!(out.pairs_used <= 256);
    }

    #[test]
    fn random_permutations_lose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut wins = 0;
        for _ in 0..100 {
            let t: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut p = t.clone();
            p.shuffle(&mut rng);
            if ranking_loss_exact(&t, &t).unwrap() < ranking_loss_exact(&p, &t).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut rows = vec![vec![0.0; 256]; 2];
        rows[0][3] = 20.0;
        rows[1][7] = 20.0;
        let l = Tensor::<f64>::from_rows(&rows).unwrap();
        assert!(lm_cross_entropy(&l, &[3, 7], &[true, true]).unwrap() < 1e-6);
        let u = Tensor::<f64>::zeros(&[3, 256]);
        let ce = lm_cross_entropy(&u, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((ce - 256f64.ln()).abs() < 1e-12);
        assert!(lm_cross_entropy(&u, &[1, 2, 3], &[false; 3]).is_err());
    }

    #[test]
    fn total_and_ratio() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, None, &w).unwrap(), 6.0);
        let zero = LossWeights {
            cls: 0.0,
            mse: 0.0,
            rank: 0.0,
            ratio: 0.0,
        };
        assert_eq!(total_loss(1.0, 2.0, 3.0, Some(4.0), &zero).unwrap(), 0.0);
        let two = LossWeights { ratio: 2.0, ..w };
        assert_eq!(total_loss(1.0, 2.0, 3.0, Some(0.5), &two).unwrap(), 7.0);
        let err = total_loss(1.0, f64::NAN, 3.0, None, &w).unwrap_err();
        assert!(err.to_string().contains("mse"));
        assert_eq!(ratio_loss(&[vec![0.9, 0.9]], &[0.9]).unwrap(), 0.0);
        assert!((ratio_loss(&[vec![1.0; 4]], &[0.9]).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn ratio_gradient_sign() {
        // d/dp (mean - r)^2 = 2 (mean - r) / n: positive above target,
        // negative below, so descent moves the mean toward the target.
        let h = 1e-6;
        for (p, r) in [(0.95, 0.9), (0.5, 0.9)] {
            let f = |x: f64| ratio_loss(&[vec![x, p]], &[r]).unwrap();
            let g = (f(p + h) - f(p - h)) / (2.0 * h);
            assert_eq!(g.signum(), (p - r).signum());
        }
    }
}
