//! Gradient-times-input token attribution at pruning stages and the
//! important/redundant sparsity analysis built on it.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::model::{forward_with_hook, ModelParams};
use crate::pruner::PruneSchedule;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.10;

/// How `grad * x` is reduced over the hidden dimension.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// `|sum_d g x|`
    #[default]
    AbsDot,
    /// `sum_d g x`
    Dot,
    /// `sum_d |g x|`
    L1,
}

/// Token scores at one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub layer: usize,
    pub mode: Reduction,
    pub scores: Vec<f64>,
    /// Range of the raw scores before normalization.
    pub min: f64,
    pub max: f64,
    pub normalized: bool,
    pub degenerate: bool,
}

impl SaliencyMap {
    pub fn new(layer: usize, mode: Reduction, scores: Vec<f64>) -> Self {
        let (min, max) = range(&scores);
        Self {
            layer,
            mode,
            scores,
            min,
            max,
            normalized: false,
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

pub fn token_scores<T: Real>(grad: &Tensor<T>, x: &Tensor<T>, mode: Reduction) -> Result<Vec<f64>> {
    if grad.shape() != x.shape() || grad.rank() != 2 {
        return Err(Error::Input(format!(
            "gradient {:?} and input {:?} must be equal-shaped matrices",
            grad.shape(),
            x.shape()
        )));
    }
    Ok((0..x.rows())
        .map(|r| {
            let terms = grad.row(r).iter().zip(x.row(r)).map(|(&g, &v)| g.f64() * v.f64());
            match mode {
                Reduction::AbsDot => terms.sum::<f64>().abs(),
                Reduction::Dot => terms.sum(),
                Reduction::L1 => terms.map(f64::abs).sum(),
            }
        })
        .collect())
}

/// Saliency per stage of the summed next-token cross-entropy of `tokens`
/// against `labels` (one per token, or one fewer when the last position
/// has no successor), with every stage tap taken on the unpruned forward.
pub fn attribute<T: Real>(
    params: &ModelParams<T>,
    tokens: &[usize],
    labels: &[usize],
    schedule: &PruneSchedule,
    mode: Reduction,
) -> Result<Vec<SaliencyMap>> {
    if labels.len() != tokens.len() && labels.len() + 1 != tokens.len() {
        return Err(Error::Input(format!(
            "{} labels for {} tokens",
            labels.len(),
            tokens.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("saliency needs at least one labelled position".into()));
    }
    schedule.check_layers(params.config.n_layers)?;
    let mut tape = Tape::new();
    let mv = params.register(&mut tape, false);
    let layers = schedule.layers();
    let mut taps: Vec<Var> = Vec::with_capacity(layers.len());
    let out = forward_with_hook(&mut tape, &mv, &params.config, tokens, false, |tape, l, s| {
        if layers.contains(&l) {
            s.x = tape.watch(s.x);
            taps.push(s.x);
        }
        Ok(())
    })?;
    // An unlabelled final position contributes nothing to the objective.
    let mut full = labels.to_vec();
    let mut weights = vec![T::one(); labels.len()];
    if full.len() < tokens.len() {
        full.push(0);
        weights.push(T::zero());
    }
    let t = tape.nll_sum(out.logits, &full, weights)?;
    tape.backward(t)?;
    layers
        .iter()
        .zip(&taps)
        .map(|(&layer, &v)| {
            let scores = token_scores(&tape.grad(v), tape.value(v), mode)?;
            Ok(SaliencyMap::new(layer, mode, scores))
        })
        .collect()
}

/// Per-sequence min-max scaling to `[0, 1]`. A constant map is degenerate
/// and becomes all 0.5.
pub fn normalize(map: &SaliencyMap) -> SaliencyMap {
    let (lo, hi) = range(&map.scores);
    let mut out = map.clone();
    out.normalized = true;
    if !(hi > lo) {
        out.degenerate = true;
        out.scores = vec![0.5; map.len()];
    } else {
        out.scores = map.scores.iter().map(|&s| (s - lo) / (hi - lo)).collect();
    }
    if !map.normalized {
        out.min = lo;
        out.max = hi;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub threshold_frac: f64,
    pub layers: Vec<usize>,
    pub tokens: Vec<usize>,
    pub important: Vec<usize>,
    pub redundant: Vec<usize>,
    /// `persistence[s][t]`: share of stage-`s` redundant tokens still
    /// redundant at stage `t`; `None` when stage `s` has none.
    pub persistence: Vec<Vec<Option<f64>>>,
}

impl SparsityStats {
    pub fn important_fraction(&self) -> Vec<f64> {
        self.important
            .iter()
            .zip(&self.tokens)
            .map(|(&i, &n)| i as f64 / n as f64)
            .collect()
    }
}

/// A token is important at a stage when its score exceeds
/// `threshold_frac * max(stage scores)`.
pub fn sparsity_stats(maps: &[SaliencyMap], threshold_frac: f64) -> Result<SparsityStats> {
    if maps.is_empty() || maps.iter().any(SaliencyMap::is_empty) {
        return Err(Error::Input(
            "sparsity statistics need at least one non-empty stage".into(),
        ));
    }
    let redundant_sets: Vec<Vec<bool>> = maps
        .iter()
        .map(|m| {
            let (_, hi) = range(&m.scores);
            m.scores.iter().map(|&s| !(s > threshold_frac * hi)).collect()
        })
        .collect();
    let important = redundant_sets
        .iter()
        .map(|r| r.iter().filter(|&&x| !x).count())
        .collect();
    let redundant = redundant_sets
        .iter()
        .map(|r| r.iter().filter(|&&x| x).count())
        .collect();
    let s_count = maps.len();
    let mut persistence = vec![vec![None; s_count]; s_count];
    for s in 0..s_count {
        let base = &redundant_sets[s];
        let denom = base.iter().filter(|&&x| x).count();
        if denom == 0 {
            continue;
        }
        for t in 0..s_count {
            let other = &redundant_sets[t];
            if other.len() != base.len() {
                continue;
            }
            let both = base.iter().zip(other).filter(|(&a, &b)| a && b).count();
            persistence[s][t] = Some(both as f64 / denom as f64);
        }
    }
    Ok(SparsityStats {
        threshold_frac,
        layers: maps.iter().map(|m| m.layer).collect(),
        tokens: maps.iter().map(SaliencyMap::len).collect(),
        important,
        redundant,
        persistence,
    })
}

/// CSV with a position column followed by one score column per stage.
pub fn saliency_csv(maps: &[SaliencyMap]) -> String {
    let mut s = String::from("position");
    for m in maps {
        s.push_str(&format!(",layer{}", m.layer));
    }
    s.push('\n');
    let n = maps.first().map_or(0, SaliencyMap::len);
    for i in 0..n {
        s.push_str(&i.to_string());
        for m in maps {
            s.push_str(&format!(",{}", m.scores[i]));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 13,
            max_seq_len: 32,
            seed: 1,
        }
    }

    #[test]
    fn reduction_examples() {
        let ones = Tensor::<f64>::filled(&[3, 4], 1.0);
        assert_eq!(token_scores(&ones, &ones, Reduction::AbsDot).unwrap(), vec![4.0; 3]);
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![0.0, 5.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(token_scores(&g, &x, Reduction::AbsDot).unwrap(), vec![0.0, 0.0]);
        assert!(token_scores(&g, &ones, Reduction::L1).is_err());
    }

    #[test]
    fn l1_bounds_abs_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let g = Tensor::<f64>::randn(&[8, 16], 1.0, &mut rng);
            let x = Tensor::<f64>::randn(&[8, 16], 1.0, &mut rng);
            let a = token_scores(&g, &x, Reduction::AbsDot).unwrap();
            let l = token_scores(&g, &x, Reduction::L1).unwrap();
            let d = token_scores(&g, &x, Reduction::Dot).unwrap();
            for i in 0..8 {
                assert!(l[i] >= a[i] - 1e-12);
                assert!((a[i] - d[i].abs()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_probe_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tap = tape.watch(xv);
        let t = tape.weighted_sum(tap, w.data().to_vec()).unwrap();
        tape.backward(t).unwrap();
        let got = token_scores(&tape.grad(tap), tape.value(tap), Reduction::AbsDot).unwrap();
        for r in 0..6 {
            let want: f64 = w.row(r).iter().zip(x.row(r)).map(|(a, b)| a * b).sum::<f64>().abs();
            assert!((got[r] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_model_has_zero_saliency() {
        let mut p = ModelParams::<f64>::init(&cfg()).unwrap();
        p.w_out = Tensor::zeros(p.w_out.shape());
        let sched = PruneSchedule::identity(&[0, 2]).unwrap();
        let toks = [1, 5, 2, 7, 3];
        let maps = attribute(&p, &toks, &[5, 2, 7, 3, 0], &sched, Reduction::AbsDot).unwrap();
        assert!(maps.iter().all(|m| m.scores.iter().all(|&s| s == 0.0)));
        assert!(normalize(&maps[0]).degenerate);
    }

    #[test]
    fn attribution_is_deterministic_and_guarded() {
        let p = ModelParams::<f64>::init(&cfg()).unwrap();
        let sched = PruneSchedule::identity(&[1, 2]).unwrap();
        let toks = [1, 5, 2, 7, 3, 3, 9];
        let labels = [5, 2, 7, 3, 3, 9, 0];
        let a = attribute(&p, &toks, &labels, &sched, Reduction::AbsDot).unwrap();
        let b = attribute(&p, &toks, &labels, &sched, Reduction::AbsDot).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|m| m.scores.iter().all(|&s| s >= 0.0 && s.is_finite())));
        assert!(attribute(&p, &toks, &labels[..3], &sched, Reduction::AbsDot).is_err());
    }

    #[test]
    fn normalize_examples() {
        let m = SaliencyMap::new(0, Reduction::AbsDot, vec![2.0, 4.0, 6.0]);
        let n = normalize(&m);
        assert_eq!(n.scores, vec![0.0, 0.5, 1.0]);
        assert_eq!((n.min, n.max), (2.0, 6.0));
        assert_eq!(normalize(&n).scores, n.scores);
        let c = normalize(&SaliencyMap::new(0, Reduction::AbsDot, vec![3.0; 4]));
        assert!(c.degenerate);
        assert_eq!(c.scores, vec![0.5; 4]);
    }

    #[test]
    fn sparsity_examples() {
        let m = SaliencyMap::new(2, Reduction::AbsDot, vec![10.0, 0.5, 0.5, 0.5]);
        let s = sparsity_stats(&[m.clone(), m], 0.10).unwrap();
        assert_eq!(s.important, vec![1, 1]);
        assert_eq!(s.redundant, vec![3, 3]);
        assert_eq!(s.persistence[0][1], Some(1.0));
        assert_eq!(s.persistence[1][1], Some(1.0));
        let dense = SaliencyMap::new(0, Reduction::AbsDot, vec![1.0, 1.0]);
        let s = sparsity_stats(&[dense], 0.10).unwrap();
        assert_eq!(s.persistence[0][0], None);
        assert!(sparsity_stats(&[], 0.1).is_err());
    }

    #[test]
    fn csv_shape() {
        let maps: Vec<SaliencyMap> = (0..3)
            .map(|l| SaliencyMap::new(l, Reduction::AbsDot, vec![1.0; 10]))
            .collect();
        let csv = saliency_csv(&maps);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], "position,layer0,layer1,layer2");
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
    }
}
