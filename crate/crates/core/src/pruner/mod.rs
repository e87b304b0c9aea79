//! Token pruning module: per-stage scorer MLP, straight-through Gumbel
//! masks for training, top-k selection for inference, protected tokens and
//! monotone mask propagation.

mod schedule;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::model::ModelConfig;
use crate::{Error, Result};

pub use schedule::{
    keep_count, PruneSchedule, ScheduleConfig, Stage, DEFAULT_LAYER_STEP, DEFAULT_LOCAL_FRACTION, DEFAULT_RATIO,
    DEFAULT_SINK_COUNT, DEFAULT_STAGES, DEFAULT_START_LAYER,
};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
/// Scorer FLOPs per token must stay below this fraction of the base model's.
pub const MAX_SCORER_OVERHEAD: f64 = 0.01;

/// Two-layer MLP `d_model -> d_hidden -> 2` with GELU; column 0 is the keep
/// logit, column 1 the drop logit.
#[derive(Clone, Debug, PartialEq)]
pub struct StageScorer<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams<T> {
    pub d_model: usize,
    pub d_hidden: usize,
    pub stages: Vec<StageScorer<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ScorerVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<T: Real> ScorerParams<T> {
    pub fn init(d_model: usize, num_stages: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let d_hidden = (d_model / 2).max(1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5c0e_5c0e);
        let stages = (0..num_stages)
            .map(|_| StageScorer {
                w1: Tensor::randn(&[d_model, d_hidden], 1.0 / (d_model as f64).sqrt(), &mut rng),
                b1: Tensor::zeros(&[d_hidden]),
                w2: Tensor::randn(&[d_hidden, 2], 1.0 / (d_hidden as f64).sqrt(), &mut rng),
                b2: Tensor::zeros(&[2]),
            })
            .collect();
        Self {
            d_model,
            d_hidden,
            stages,
        }
    }

    pub fn zeros(d_model: usize, num_stages: usize) -> Self {
        let d_hidden = (d_model / 2).max(1);
        let stages = (0..num_stages)
            .map(|_| StageScorer {
                w1: Tensor::zeros(&[d_model, d_hidden]),
                b1: Tensor::zeros(&[d_hidden]),
                w2: Tensor::zeros(&[d_hidden, 2]),
                b2: Tensor::zeros(&[2]),
            })
            .collect();
        Self {
            d_model,
            d_hidden,
            stages,
        }
    }

    /// Rebuilds scorers from `stage{s}.{w1,b1,w2,b2}` tensors.
    pub fn from_named(d_model: usize, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let count = named.len() / 4;
        let mut out = Self::zeros(d_model, count);
        if named.len() != 4 * count {
            return Err(Error::Checkpoint(format!(
                "{} scorer tensors is not a multiple of 4",
                named.len()
            )));
        }
        let expected: Vec<(String, Vec<usize>)> = out
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for (slot, (name, shape)) in out.tensors_mut().into_iter().zip(expected) {
            let i = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing scorer tensor {name}")))?;
            let (_, t) = named.swap_remove(i);
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "scorer tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (s, st) in self.stages.iter().enumerate() {
            out.push((format!("stage{s}.w1"), &st.w1));
            out.push((format!("stage{s}.b1"), &st.b1));
            out.push((format!("stage{s}.w2"), &st.w2));
            out.push((format!("stage{s}.b2"), &st.b2));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.stages
            .iter_mut()
            .flat_map(|st| [&mut st.w1, &mut st.b1, &mut st.w2, &mut st.b2])
            .collect()
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<ScorerVars> {
        self.stages
            .iter()
            .map(|st| ScorerVars {
                w1: tape.leaf(st.w1.clone(), trainable),
                b1: tape.leaf(st.b1.clone(), trainable),
                w2: tape.leaf(st.w2.clone(), trainable),
                b2: tape.leaf(st.b2.clone(), trainable),
            })
            .collect()
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            let mut buf = Vec::with_capacity(t.len() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        format!("{:x}", h.finalize())
    }

    /// Forward FLOPs of one stage scorer for one token (2 per MAC).
    pub fn flops_per_token(&self) -> f64 {
        scorer_flops_per_token(self.d_model, self.d_hidden)
    }

    /// Checks each stage scorer against the base model's per-token
    /// parameter FLOPs.
    pub fn check_overhead(&self, config: &ModelConfig) -> Result<f64> {
        let ratio = self.flops_per_token() / config.param_flops_per_token();
        if ratio >= MAX_SCORER_OVERHEAD {
            return Err(Error::Config(format!(
                "scorer costs {:.3}% of the base model's per-token FLOPs (limit {}%)",
                100.0 * ratio,
                100.0 * MAX_SCORER_OVERHEAD
            )));
        }
        Ok(ratio)
    }
}

pub fn scorer_flops_per_token(d_model: usize, d_hidden: usize) -> f64 {
    2.0 * (d_model * d_hidden + d_hidden * 2) as f64
}

/// Keep/drop logits `N x 2` on the tape.
pub fn score_on_tape<T: Real>(tape: &mut Tape<T>, scorer: &ScorerVars, x: Var) -> Result<Var> {
    let h = tape.matmul(x, scorer.w1)?;
    let h = tape.add_row(h, scorer.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, scorer.w2)?;
    Ok(tape.add_row(o, scorer.b2)?)
}

/// Untaped scorer evaluation on stage hidden states (`N x d_model`).
pub fn score_tokens<T: Real>(hidden: &Tensor<T>, scorer: &StageScorer<T>) -> Result<Tensor<T>> {
    if !hidden.all_finite() {
        return Err(Error::NonFinite("hidden states fed to the token scorer".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(hidden.clone());
    let sv = ScorerVars {
        w1: tape.constant(scorer.w1.clone()),
        b1: tape.constant(scorer.b1.clone()),
        w2: tape.constant(scorer.w2.clone()),
        b2: tape.constant(scorer.b2.clone()),
    };
    let out = score_on_tape(&mut tape, &sv, x)?;
    Ok(tape.value(out).clone())
}

/// Keep-logit minus drop-logit per token.
pub fn keep_margin<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    (0..logits.rows())
        .map(|r| logits.at(r, 0).f64() - logits.at(r, 1).f64())
        .collect()
}

/// Softmax keep probability per token.
pub fn keep_prob<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    keep_margin(logits)
        .into_iter()
        .map(|m| 1.0 / (1.0 + (-m).exp()))
        .collect()
}

/// Standard Gumbel noise, two values per token.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..2 * n).map(|_| g.sample(rng)).collect()
}

/// Hard Gumbel-max keep decisions; protected indices are always kept.
pub fn sample_mask<T: Real, R: Rng + ?Sized>(
    logits: &Tensor<T>,
    temperature: f64,
    protected: &[usize],
    rng: &mut R,
) -> Result<Vec<bool>> {
    if !(temperature > 0.0) {
        return Err(Error::Input(format!("temperature {temperature} must be positive")));
    }
    let n = logits.rows();
    let noise = gumbel_noise(n, rng);
    let mut keep: Vec<bool> = (0..n)
        .map(|i| {
            let a = (logits.at(i, 0).f64() + noise[2 * i]) / temperature;
            let b = (logits.at(i, 1).f64() + noise[2 * i + 1]) / temperature;
            a >= b
        })
        .collect();
    for &p in protected {
        if p < n {
            keep[p] = true;
        }
    }
    Ok(keep)
}

/// `{0 .. sink_count-1} ∪ last ceil(local_fraction * n)`, sorted.
pub fn protected_set(n: usize, sink_count: usize, local_fraction: f64) -> Vec<usize> {
    let local = ((local_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut out: Vec<usize> = (0..sink_count.min(n)).collect();
    out.extend(n.saturating_sub(local)..n);
    out.sort_unstable();
    out.dedup();
    out
}

/// Keeps all protected indices, then the highest scores among the rest
/// (lower index wins ties) until `k` indices are chosen. Sorted ascending.
pub fn select_top_count(scores: &[f64], k: usize, protected: &[usize]) -> Vec<usize> {
    let n = scores.len();
    let mut is_protected = vec![false; n];
    for &p in protected {
        if p < n {
            is_protected[p] = true;
        }
    }
    let mut kept: Vec<usize> = (0..n).filter(|&i| is_protected[i]).collect();
    let mut rest: Vec<usize> = (0..n).filter(|&i| !is_protected[i]).collect();
    rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let extra = k.saturating_sub(kept.len());
    kept.extend(rest.into_iter().take(extra));
    kept.sort_unstable();
    kept
}

/// Inference selection: `max(ceil(ratio * N), |protected|)` indices.
pub fn select_topk(scores: &[f64], cumulative_ratio: f64, protected: &[usize]) -> Vec<usize> {
    let n = scores.len();
    let protected_in: usize = protected.iter().filter(|&&p| p < n).count();
    select_top_count(scores, keep_count(cumulative_ratio, n, protected_in), protected)
}

/// Per-stage keep history over `n` tokens. Each stage vector implies the
/// previous one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenMask {
    n: usize,
    stages: Vec<Vec<bool>>,
    protected: Vec<usize>,
}

impl TokenMask {
    pub fn new(n: usize, protected: Vec<usize>) -> Self {
        Self {
            n,
            stages: Vec::new(),
            protected,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn protected(&self) -> &[usize] {
        &self.protected
    }

    pub fn stage(&self, s: usize) -> &[bool] {
        &self.stages[s]
    }

    /// Keep state after the most recent stage (all kept before any stage).
    pub fn current(&self) -> Vec<bool> {
        self.stages.last().cloned().unwrap_or_else(|| vec![true; self.n])
    }

    pub fn kept(&self, s: usize) -> Vec<usize> {
        self.stages[s]
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|v| v.iter().filter(|&&k| k).count()).collect()
    }

    /// Appends `current AND stage_vector`, with protected indices forced on.
    pub fn push(&mut self, stage_vector: &[bool]) -> Result<()> {
        if stage_vector.len() != self.n {
            return Err(Error::Input(format!(
                "mask stage of length {} for {} tokens",
                stage_vector.len(),
                self.n
            )));
        }
        let prev = self.current();
        let mut next: Vec<bool> = prev.iter().zip(stage_vector).map(|(&a, &b)| a && b).collect();
        for &p in &self.protected {
            if p < self.n {
                next[p] = true;
            }
        }
        self.stages.push(next);
        Ok(())
    }

    pub fn from_kept_sets(n: usize, protected: Vec<usize>, kept: &[Vec<usize>]) -> Result<Self> {
        let mut m = Self::new(n, protected);
        for set in kept {
            let mut v = vec![false; n];
            for &i in set {
                if i >= n {
                    return Err(Error::Input(format!("kept index {i} outside {n} tokens")));
                }
                v[i] = true;
            }
            m.push(&v)?;
        }
        Ok(m)
    }
}

/// Functional form of [`TokenMask::push`].
pub fn propagate_mask(prev: &TokenMask, stage_vector: &[bool]) -> Result<TokenMask> {
    let mut next = prev.clone();
    next.push(stage_vector)?;
    Ok(next)
}
