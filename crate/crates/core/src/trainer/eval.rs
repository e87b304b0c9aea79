//! Held-out perplexity under full, scorer-pruned and randomly pruned
//! prefill, and rank agreement between scorer keep-scores and saliency.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::Real;
use crate::model::{forward, prefill, prefill_with, ModelParams};
use crate::pruner::{self, PruneSchedule, ScorerParams};
use crate::saliency::{attribute, Reduction};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    #[default]
    Full,
    Pruned,
    Random,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "pruned" => Ok(Self::Pruned),
            "random" | "random-pruned" => Ok(Self::Random),
            other => Err(Error::Config(format!(
                "unknown eval mode {other:?} (expected full, pruned or random)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub seed: u64,
    pub saliency_mode: Reduction,
    /// Also report scorer/saliency rank correlation (pruned mode only).
    pub correlation: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            saliency_mode: Reduction::AbsDot,
            correlation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub sequences: usize,
    pub scored_tokens: usize,
    pub nll: f64,
    pub perplexity: f64,
    /// Mean surviving tokens per stage; empty for the full model.
    pub kept_counts: Vec<f64>,
    /// Mean Spearman correlation per stage.
    pub spearman: Vec<f64>,
    pub mean_spearman: Option<f64>,
    pub seed: u64,
}

/// Positions whose next-token loss is scored: the protected recent tail,
/// which every mode keeps. At least the final position.
pub fn tail_positions(schedule: &PruneSchedule, n: usize) -> Vec<usize> {
    let local = ((schedule.local_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    (n.saturating_sub(local)..n).collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation with average ranks for ties; 0 when either side is
/// constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman over unequal lengths");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        c += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        c / (va * vb).sqrt()
    }
}

/// Per-stage Spearman correlation between scorer keep-margins and oracle
/// saliency over the unprotected tokens of the unpruned model.
pub fn scorer_correlation<T: Real>(
    params: &ModelParams<T>,
    scorers: &ScorerParams<T>,
    schedule: &PruneSchedule,
    window: &[usize],
    mode: Reduction,
) -> Result<Vec<f64>> {
    let n = window.len() - 1;
    let (tokens, labels) = (&window[..n], &window[1..]);
    let layers = schedule.layers();
    let taps = forward(params, tokens, None, &layers)?.taps;
    let maps = attribute(params, tokens, labels, schedule, mode)?;
    let protected = schedule.protected(n);
    let free: Vec<usize> = (0..n).filter(|i| protected.binary_search(i).is_err()).collect();
    taps.iter()
        .zip(&maps)
        .zip(&scorers.stages)
        .map(|((x, map), sc)| {
            let margin = pruner::keep_margin(&pruner::score_tokens(x, sc)?);
            let a: Vec<f64> = free.iter().map(|&i| margin[i]).collect();
            let b: Vec<f64> = free.iter().map(|&i| map.scores[i]).collect();
            Ok(spearman(&a, &b))
        })
        .collect()
}

struct SeqEval {
    nll: f64,
    count: usize,
    kept: Vec<usize>,
    corr: Option<Vec<f64>>,
}

fn nll_of<T: Real>(row: &[T], label: usize) -> f64 {
    let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.f64() - m).exp()).sum();
    m + z.ln() - row[label].f64()
}

fn window_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn eval_one<T: Real>(
    params: &ModelParams<T>,
    scorers: &ScorerParams<T>,
    schedule: &PruneSchedule,
    window: &[usize],
    index: usize,
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<SeqEval> {
    if window.len() < 2 {
        return Err(Error::Input(format!("window of {} tokens has no labels", window.len())));
    }
    let n = window.len() - 1;
    let tokens = &window[..n];
    let pre = match mode {
        EvalMode::Full => prefill(params, tokens)?,
        EvalMode::Pruned => prefill_with(params, tokens, Some(schedule), scorers, |m, _| Ok(m))?,
        EvalMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(window_seed(opts.seed, index));
            prefill_with(params, tokens, Some(schedule), scorers, |m, _| {
                Ok(m.iter().map(|_| rng.random::<f64>()).collect())
            })?
        }
    };
    let mut nll = 0.0;
    let tail = tail_positions(schedule, n);
    for &p in &tail {
        let row = pre
            .positions
            .binary_search(&p)
            .map_err(|_| Error::Input(format!("tail position {p} was pruned")))?;
        nll += nll_of(pre.logits.row(row), window[p + 1]);
    }
    let corr = if mode == EvalMode::Pruned && opts.correlation {
        Some(scorer_correlation(
            params,
            scorers,
            schedule,
            window,
            opts.saliency_mode,
        )?)
    } else {
        None
    };
    Ok(SeqEval {
        nll,
        count: tail.len(),
        kept: pre.mask.kept_counts(),
        corr,
    })
}

/// Mean next-token loss over the tail positions of every window.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    scorers: &ScorerParams<T>,
    schedule: &PruneSchedule,
    windows: &[Vec<usize>],
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Input("evaluation needs at least one window".into()));
    }
    let seqs: Vec<SeqEval> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| eval_one(params, scorers, schedule, w, i, mode, opts))
        .collect::<Result<_>>()?;
    let count: usize = seqs.iter().map(|s| s.count).sum();
    let nll = seqs.iter().map(|s| s.nll).sum::<f64>() / count as f64;
    let m = seqs.len() as f64;
    let stages = seqs[0].kept.len();
    let kept_counts = (0..stages)
        .map(|s| seqs.iter().map(|q| q.kept[s] as f64).sum::<f64>() / m)
        .collect();
    let spearman: Vec<f64> = if seqs[0].corr.is_some() {
        (0..schedule.len())
            .map(|s| seqs.iter().map(|q| q.corr.as_ref().expect("corr")[s]).sum::<f64>() / m)
            .collect()
    } else {
        Vec::new()
    };
    let mean_spearman = (!spearman.is_empty()).then(|| spearman.iter().sum::<f64>() / spearman.len() as f64);
    Ok(EvalReport {
        mode,
        sequences: seqs.len(),
        scored_tokens: count,
        nll,
        perplexity: nll.exp(),
        kept_counts,
        spearman,
        mean_spearman,
        seed: opts.seed,
    })
}
