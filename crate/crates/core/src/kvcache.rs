//! Decode-time KV-cache eviction: sink + recent window, and heavy hitters
//! ranked by accumulated attention mass.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffmath::Real;
use crate::model::{decode_step, prefill, prefill_pruned, KVCache, ModelParams, Prefill};
use crate::pruner::{PruneSchedule, ScorerParams, TokenMask, DEFAULT_SINK_COUNT};
use crate::{Error, Result};

pub const DEFAULT_BUDGET_FRACTION: f64 = 0.40;
pub const DEFAULT_HH_LOCAL_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    None,
    Local,
    HeavyHitter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KVCachePolicy {
    pub kind: PolicyKind,
    /// Budget as a fraction of the post-prefill cache length.
    pub budget_fraction: f64,
    /// Share of the heavy-hitter budget reserved for the most recent entries.
    pub local_fraction: f64,
    pub sink_count: usize,
}

impl Default for KVCachePolicy {
    fn default() -> Self {
        Self::none()
    }
}

impl KVCachePolicy {
    pub fn none() -> Self {
        Self {
            kind: PolicyKind::None,
            budget_fraction: 1.0,
            local_fraction: DEFAULT_HH_LOCAL_FRACTION,
            sink_count: DEFAULT_SINK_COUNT,
        }
    }

    pub fn new(kind: PolicyKind, budget_fraction: f64, local_fraction: f64, sink_count: usize) -> Result<Self> {
        let p = Self {
            kind,
            budget_fraction,
            local_fraction,
            sink_count,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn local(budget_fraction: f64) -> Result<Self> {
        Self::new(PolicyKind::Local, budget_fraction, 1.0, DEFAULT_SINK_COUNT)
    }

    pub fn heavy_hitter(budget_fraction: f64) -> Result<Self> {
        Self::new(
            PolicyKind::HeavyHitter,
            budget_fraction,
            DEFAULT_HH_LOCAL_FRACTION,
            DEFAULT_SINK_COUNT,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "kv.budget_fraction {} outside (0, 1]",
                self.budget_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.local_fraction) {
            return Err(Error::Config(format!(
                "kv.local_fraction {} outside [0, 1]",
                self.local_fraction
            )));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.kind != PolicyKind::None
    }

    /// Absolute budget for a layer holding `prefill_len` entries after
    /// prefill. `None` for the inactive policy.
    pub fn budget(&self, prefill_len: usize) -> Result<Option<usize>> {
        if !self.is_active() {
            return Ok(None);
        }
        let b = (self.budget_fraction * prefill_len as f64 - 1e-9).ceil() as usize;
        if b < self.sink_count + 1 {
            return Err(Error::Config(format!(
                "KV budget {b} (fraction {} of {prefill_len} entries) is below sink_count + 1 = {}",
                self.budget_fraction,
                self.sink_count + 1
            )));
        }
        Ok(Some(b))
    }

    /// Checks every layer budget of a freshly prefilled cache.
    pub fn check_cache<T: Real>(&self, cache: &KVCache<T>) -> Result<()> {
        for &n in &cache.prefill_len {
            self.budget(n)?;
        }
        Ok(())
    }
}

impl fmt::Display for KVCachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::None => write!(f, "none"),
            PolicyKind::Local => write!(f, "local:{}", self.budget_fraction),
            PolicyKind::HeavyHitter => write!(f, "h2o:{}", self.budget_fraction),
        }
    }
}

/// `none`, `local:<fraction>` or `h2o:<fraction>`.
impl FromStr for KVCachePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, frac) = match s.split_once(':') {
            Some((k, f)) => (k, Some(f)),
            None => (s, None),
        };
        let frac = frac
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad KV budget fraction {f:?}")))
            })
            .transpose()?
            .unwrap_or(DEFAULT_BUDGET_FRACTION);
        match kind {
            "none" => Ok(Self::none()),
            "local" => Self::local(frac),
            "h2o" | "heavy-hitter" => Self::heavy_hitter(frac),
            other => Err(Error::Config(format!(
                "unknown KV policy {other:?} (expected none, local:<f> or h2o:<f>)"
            ))),
        }
    }
}

/// Accumulated attention mass per cached entry, per layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeavyHitterState {
    pub masses: Vec<Vec<f64>>,
}

impl HeavyHitterState {
    pub fn new(entries: &[usize]) -> Self {
        Self {
            masses: entries.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Adds one decode step's attention weights into the masses of `layer`.
pub fn accumulate_attention(state: &mut HeavyHitterState, layer: usize, weights: &[f64]) -> Result<()> {
    let m = state
        .masses
        .get_mut(layer)
        .ok_or_else(|| Error::Cache(format!("no mass state for layer {layer}")))?;
    if m.len() != weights.len() {
        return Err(Error::Cache(format!(
            "{} attention weights for {} cached entries",
            weights.len(),
            m.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Cache(format!(
            "attention weight {w} is not a finite non-negative value"
        )));
    }
    for (a, &w) in m.iter_mut().zip(weights) {
        *a += w;
    }
    Ok(())
}

/// Indices (ascending) of the entries one layer keeps under `budget`:
/// leading sinks, the most recent window, then the highest masses with ties
/// going to the more recent entry.
pub fn select_entries(masses: &[f64], budget: usize, policy: &KVCachePolicy) -> Vec<usize> {
    let n = masses.len();
    if n <= budget {
        return (0..n).collect();
    }
    let sink = policy.sink_count.min(budget);
    let room = budget - sink;
    let recent = match policy.kind {
        PolicyKind::Local | PolicyKind::None => room,
        PolicyKind::HeavyHitter => ((policy.local_fraction * budget as f64).round() as usize)
            .max(1)
            .min(room),
    };
    let mut keep: Vec<usize> = (0..sink).collect();
    keep.extend(n - recent..n);
    let mut middle: Vec<usize> = (sink..n - recent).collect();
    middle.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(b.cmp(&a)));
    keep.extend(middle.into_iter().take(room - recent));
    keep.sort_unstable();
    keep
}

/// Shrinks every over-budget layer of `cache` in place.
pub fn evict<T: Real>(cache: &mut KVCache<T>, policy: &KVCachePolicy) -> Result<()> {
    for l in 0..cache.layers.len() {
        let Some(budget) = policy.budget(cache.prefill_len[l])? else {
            continue;
        };
        if cache.layers[l].len() <= budget {
            continue;
        }
        let keep = select_entries(&cache.state.masses[l], budget, policy);
        let d = cache.d_model;
        cache.layers[l].retain(&keep, d);
        let m = &cache.state.masses[l];
        cache.state.masses[l] = keep.iter().map(|&i| m[i]).collect();
    }
    Ok(())
}

/// One cache-size observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub layer: usize,
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub trace: Vec<TraceRow>,
    pub mask: TokenMask,
    pub prefill_positions: Vec<usize>,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,layer,entries\n");
    for r in trace {
        s.push_str(&format!("{},{},{}\n", r.step, r.layer, r.entries));
    }
    s
}

/// Index of the largest logit (lowest index on ties).
pub fn argmax<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn record<T: Real>(trace: &mut Vec<TraceRow>, step: usize, cache: &KVCache<T>) {
    for (layer, entries) in cache.entries().into_iter().enumerate() {
        trace.push(TraceRow { step, layer, entries });
    }
}

/// Greedy generation after a prefill (pruned when `schedule` is given),
/// evicting under `policy` after every step.
pub fn generate<T: Real>(
    params: &ModelParams<T>,
    tokens: &[usize],
    pruning: Option<(&PruneSchedule, &ScorerParams<T>)>,
    policy: &KVCachePolicy,
    gen_len: usize,
) -> Result<Generation> {
    let Prefill {
        logits,
        positions,
        mut cache,
        mask,
        ..
    } = match pruning {
        Some((s, sc)) => prefill_pruned(params, tokens, s, sc)?,
        None => prefill(params, tokens)?,
    };
    policy.check_cache(&cache)?;
    let mut trace = Vec::new();
    record(&mut trace, 0, &cache);
    let mut out = Vec::with_capacity(gen_len);
    let mut next = argmax(logits.row(logits.rows() - 1));
    for step in 1..=gen_len {
        out.push(next);
        if step == gen_len {
            break;
        }
        let l = decode_step(params, &mut cache, next, Some(policy))?;
        record(&mut trace, step, &cache);
        next = argmax(&l);
    }
    Ok(Generation {
        tokens: out,
        trace,
        mask,
        prefill_positions: positions,
    })
}

/// SDTP-pruned prefill followed by decoding under `policy`.
pub fn compose_sdtp_h2o<T: Real>(
    params: &ModelParams<T>,
    tokens: &[usize],
    schedule: &PruneSchedule,
    scorers: &ScorerParams<T>,
    policy: &KVCachePolicy,
    gen_len: usize,
) -> Result<Generation> {
    generate(params, tokens, Some((schedule, scorers)), policy, gen_len)
}

/// Teacher-forced negative log-likelihood of `continuation` after `prompt`,
/// decoding one token at a time under `policy`. Returns (sum, count).
pub fn continuation_nll<T: Real>(
    params: &ModelParams<T>,
    prompt: &[usize],
    continuation: &[usize],
    pruning: Option<(&PruneSchedule, &ScorerParams<T>)>,
    policy: &KVCachePolicy,
) -> Result<(f64, usize)> {
    let pre = match pruning {
        Some((s, sc)) => prefill_pruned(params, prompt, s, sc)?,
        None => prefill(params, prompt)?,
    };
    let mut cache = pre.cache;
    policy.check_cache(&cache)?;
    let mut logits: Vec<T> = pre.logits.row(pre.logits.rows() - 1).to_vec();
    let mut total = 0.0;
    for (i, &t) in continuation.iter().enumerate() {
        total += nll_of(&logits, t);
        if i + 1 < continuation.len() {
            logits = decode_step(params, &mut cache, t, Some(policy))?;
        }
    }
    Ok((total, continuation.len()))
}

fn nll_of<T: Real>(logits: &[T], label: usize) -> f64 {
    let m = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v.f64() - m).exp()).sum();
    m + z.ln() - logits[label].f64()
}
