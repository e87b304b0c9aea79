//! Analytic prefill/decode FLOPs and memory model with and without a
//! pruning schedule, and a wall-clock harness for the toy model.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffmath::Real;
use crate::kvcache::{generate, KVCachePolicy};
use crate::model::{prefill, prefill_pruned, ModelConfig, ModelParams};
use crate::pruner::{scorer_flops_per_token, PruneSchedule, ScorerParams};
use crate::{Error, Result};

pub const CONVENTION: &str =
    "2 FLOPs per multiply-accumulate; attention 4*n^2*d_model per layer; causal masking not discounted";
pub const DEFAULT_LENGTHS: [usize; 6] = [4096, 8192, 16384, 32768, 65536, 131072];
pub const DEFAULT_GEN_LEN: usize = 128;
/// Bytes per weight and cache element (16-bit inference).
pub const DEFAULT_PRECISION_BYTES: usize = 2;
/// Logits are materialized in 32-bit.
const LOGIT_BYTES: f64 = 4.0;
const PARAM_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchProfile {
    pub name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Three MLP projections (gate, up, down) instead of two.
    pub gated_mlp: bool,
    pub tied_embeddings: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<f64>,
}

pub const BUILTIN_PROFILES: [&str; 4] = ["mistral-7b", "llama2-7b", "bloom-7b", "toy"];

impl ArchProfile {
    pub fn builtin(name: &str) -> Result<Self> {
        let p = |n_layers, n_heads, n_kv_heads, d_ff, vocab_size, gated_mlp, tied_embeddings, count| Self {
            name: name.to_string(),
            n_layers,
            d_model: 4096,
            n_heads,
            n_kv_heads,
            d_ff,
            vocab_size,
            gated_mlp,
            tied_embeddings,
            param_count: Some(count),
        };
        let profile = match name {
            "mistral-7b" => p(32, 32, 8, 14336, 32000, true, false, 7.24e9),
            "llama2-7b" => p(32, 32, 32, 11008, 32000, true, false, 6.74e9),
            "bloom-7b" => p(30, 32, 32, 16384, 250_880, false, true, 7.07e9),
            "toy" => Self::from_model(name, &ModelConfig::default()),
            other => {
                return Err(Error::Config(format!(
                    "unknown profile {other:?}; available: {}",
                    BUILTIN_PROFILES.join(", ")
                )))
            }
        };
        profile.validate()?;
        Ok(profile)
    }

    /// Position table, norms and biases are not counted.
    pub fn from_model(name: &str, c: &ModelConfig) -> Self {
        Self {
            name: name.to_string(),
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_kv_heads: c.n_heads,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            gated_mlp: false,
            tied_embeddings: false,
            param_count: None,
        }
    }

    pub fn d_kv(&self) -> usize {
        self.d_model / self.n_heads * self.n_kv_heads
    }

    /// Projection multiply-accumulates per token per layer.
    pub fn layer_macs(&self) -> f64 {
        let (d, kv, f) = (self.d_model as f64, self.d_kv() as f64, self.d_ff as f64);
        let mlp = if self.gated_mlp { 3.0 } else { 2.0 };
        2.0 * d * d + 2.0 * d * kv + mlp * d * f
    }

    /// Matrix weights plus embedding tables (norms and biases omitted).
    pub fn derived_params(&self) -> f64 {
        let emb = (self.vocab_size * self.d_model) as f64;
        self.n_layers as f64 * self.layer_macs() + if self.tied_embeddings { emb } else { 2.0 * emb }
    }

    pub fn params(&self) -> f64 {
        self.param_count.unwrap_or_else(|| self.derived_params())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::Config(format!(
                "profile {}: dimensions must be positive",
                self.name
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "profile {}: n_heads must divide d_model",
                self.name
            )));
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "profile {}: n_kv_heads must divide n_heads",
                self.name
            )));
        }
        if let Some(c) = self.param_count {
            let rel = (self.derived_params() - c).abs() / c;
            if rel > PARAM_TOLERANCE {
                return Err(Error::Config(format!(
                    "profile {}: derived parameter count {:.4e} is {:.1}% from the supplied {c:.4e}",
                    self.name,
                    self.derived_params(),
                    100.0 * rel
                )));
            }
        }
        Ok(())
    }
}

/// A schedule and the scorer hidden width used with it.
#[derive(Clone, Copy, Debug)]
pub struct Pruning<'a> {
    pub schedule: &'a PruneSchedule,
    pub scorer_hidden: usize,
}

impl<'a> Pruning<'a> {
    /// Scorers at the default width `d_model / 2`.
    pub fn new(schedule: &'a PruneSchedule, profile: &ArchProfile) -> Self {
        Self {
            schedule,
            scorer_hidden: (profile.d_model / 2).max(1),
        }
    }
}

/// Tokens processed by each block, protection floor included.
pub fn layer_tokens(profile: &ArchProfile, n: usize, pruning: Option<Pruning>) -> Result<Vec<f64>> {
    match pruning {
        None => Ok(vec![n as f64; profile.n_layers]),
        Some(p) => {
            p.schedule.check_layers(profile.n_layers)?;
            Ok(p.schedule.tokens_per_layer(n, profile.n_layers, true))
        }
    }
}

/// Mean over blocks of the cumulative keep ratio, without protection.
pub fn mean_layer_keep(schedule: &PruneSchedule, n_layers: usize) -> Result<f64> {
    schedule.check_layers(n_layers)?;
    let per = schedule.tokens_per_layer(1, n_layers, false);
    Ok(per.iter().sum::<f64>() / n_layers as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefillFlops {
    pub linear: f64,
    pub attention: f64,
    pub head: f64,
    pub scorer: f64,
    pub total: f64,
}

pub fn flops_prefill(profile: &ArchProfile, n: usize, pruning: Option<Pruning>) -> Result<PrefillFlops> {
    if n == 0 {
        return Err(Error::Input("sequence length must be >= 1".into()));
    }
    let tokens = layer_tokens(profile, n, pruning)?;
    let d = profile.d_model as f64;
    let linear: f64 = tokens.iter().map(|t| 2.0 * profile.layer_macs() * t).sum();
    let attention: f64 = tokens.iter().map(|t| 4.0 * t * t * d).sum();
    let last = *tokens.last().expect("at least one layer");
    let head = 2.0 * d * profile.vocab_size as f64 * last;
    let scorer = match pruning {
        None => 0.0,
        Some(p) => {
            let per = scorer_flops_per_token(profile.d_model, p.scorer_hidden);
            p.schedule
                .stages
                .iter()
                .map(|s| per * if s.layer == 0 { n as f64 } else { tokens[s.layer - 1] })
                .sum()
        }
    };
    Ok(PrefillFlops {
        linear,
        attention,
        head,
        scorer,
        total: linear + attention + head + scorer,
    })
}

/// Prefill plus `gen_len` single-token decode steps. Step `t` attends to
/// the cached tokens of each layer plus `t + 1` new ones.
pub fn flops_end2end(profile: &ArchProfile, n: usize, gen_len: usize, pruning: Option<Pruning>) -> Result<f64> {
    let pre = flops_prefill(profile, n, pruning)?;
    let tokens = layer_tokens(profile, n, pruning)?;
    let d = profile.d_model as f64;
    let per_token = 2.0 * (profile.layer_macs() * profile.n_layers as f64 + d * profile.vocab_size as f64);
    let mut decode = 0.0;
    for t in 0..gen_len {
        decode += per_token + tokens.iter().map(|c| 4.0 * (c + t as f64 + 1.0) * d).sum::<f64>();
    }
    Ok(pre.total + decode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub weights: f64,
    pub kv_cache: f64,
    pub activations: f64,
    pub logits: f64,
    pub total: f64,
}

/// Weights, the KV cache of every layer, the widest block's activations and
/// the 32-bit logits of the tokens reaching the head, in bytes.
pub fn memory_estimate(
    profile: &ArchProfile,
    n: usize,
    pruning: Option<Pruning>,
    precision_bytes: usize,
) -> Result<MemoryReport> {
    let tokens = layer_tokens(profile, n, pruning)?;
    let b = precision_bytes as f64;
    let (d, f) = (profile.d_model as f64, profile.d_ff as f64);
    let weights = profile.params() * b;
    let kv_cache: f64 = tokens.iter().map(|t| 2.0 * t * profile.d_kv() as f64 * b).sum();
    let ffn_live = if profile.gated_mlp { 2.0 } else { 1.0 };
    let widest = tokens.iter().copied().fold(0.0, f64::max);
    let activations = widest * (2.0 * d + ffn_live * f) * b;
    let logits = tokens.last().expect("at least one layer") * profile.vocab_size as f64 * LOGIT_BYTES;
    Ok(MemoryReport {
        weights,
        kv_cache,
        activations,
        logits,
        total: weights + kv_cache + activations + logits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub prefill: PrefillFlops,
    pub end2end: f64,
    pub memory: MemoryReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub profile: String,
    pub n: usize,
    pub gen_len: usize,
    pub precision_bytes: usize,
    pub convention: String,
    pub baseline: CostRow,
    pub pruned: Option<CostRow>,
    pub prefill_ratio: Option<f64>,
    pub end2end_ratio: Option<f64>,
    pub memory_saving: Option<f64>,
    /// Scorer FLOPs over the unpruned prefill FLOPs.
    pub scorer_share: Option<f64>,
}

fn row(profile: &ArchProfile, n: usize, gen_len: usize, pruning: Option<Pruning>, bytes: usize) -> Result<CostRow> {
    Ok(CostRow {
        prefill: flops_prefill(profile, n, pruning)?,
        end2end: flops_end2end(profile, n, gen_len, pruning)?,
        memory: memory_estimate(profile, n, pruning, bytes)?,
    })
}

pub fn report(
    profile: &ArchProfile,
    n: usize,
    gen_len: usize,
    pruning: Option<Pruning>,
    precision_bytes: usize,
) -> Result<FlopsReport> {
    profile.validate()?;
    let baseline = row(profile, n, gen_len, None, precision_bytes)?;
    let pruned = pruning
        .map(|p| row(profile, n, gen_len, Some(p), precision_bytes))
        .transpose()?;
    let ratio = |f: fn(&CostRow) -> f64| pruned.as_ref().map(|p| f(p) / f(&baseline));
    Ok(FlopsReport {
        profile: profile.name.clone(),
        n,
        gen_len,
        precision_bytes,
        convention: CONVENTION.to_string(),
        prefill_ratio: ratio(|r| r.prefill.total),
        end2end_ratio: ratio(|r| r.end2end),
        memory_saving: ratio(|r| r.memory.total).map(|r| 1.0 - r),
        scorer_share: pruned.as_ref().map(|p| p.prefill.scorer / baseline.prefill.total),
        baseline,
        pruned,
    })
}

/// Aligned text table, TFLOPs and GB.
pub fn table_text(reports: &[FlopsReport]) -> String {
    let mut s = format!(
        "{:>8} {:>12} {:>12} {:>12} {:>12} {:>10} {:>10} {:>9} {:>9} {:>9}\n",
        "n", "prefill", "prefill+", "e2e", "e2e+", "mem GB", "mem+ GB", "prefill%", "e2e%", "mem%"
    );
    let opt = |v: Option<f64>, f: &dyn Fn(f64) -> String| v.map_or_else(|| "-".to_string(), f);
    for r in reports {
        let p = r.pruned.as_ref();
        s.push_str(&format!(
            "{:>8} {:>12.2} {:>12} {:>12.2} {:>12} {:>10.2} {:>10} {:>9} {:>9} {:>9}\n",
            r.n,
            r.baseline.prefill.total / 1e12,
            opt(p.map(|p| p.prefill.total), &|v| format!("{:.2}", v / 1e12)),
            r.baseline.end2end / 1e12,
            opt(p.map(|p| p.end2end), &|v| format!("{:.2}", v / 1e12)),
            r.baseline.memory.total / 1e9,
            opt(p.map(|p| p.memory.total), &|v| format!("{:.2}", v / 1e9)),
            opt(r.prefill_ratio, &|v| format!("{:.2}", 100.0 * (1.0 - v))),
            opt(r.end2end_ratio, &|v| format!("{:.2}", 100.0 * (1.0 - v))),
            opt(r.memory_saving, &|v| format!("{:.2}", 100.0 * v)),
        ));
    }
    s.push_str(&format!("convention: {CONVENTION}\n"));
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub gen_len: usize,
    pub repeats: usize,
    pub workers: usize,
    pub prefill_ms_full: f64,
    pub prefill_ms_pruned: f64,
    pub end2end_ms_full: f64,
    pub end2end_ms_pruned: f64,
    pub prefill_speedup: f64,
    pub end2end_speedup: f64,
    /// Relative spread `(max - min) / median` of each timing series.
    pub spread: [f64; 4],
    /// Share of generated tokens identical between pruned and full runs.
    pub overlap: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn spread(v: &[f64], med: f64) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    if med > 0.0 {
        (hi - lo) / med
    } else {
        0.0
    }
}

fn time_ms(f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

/// Median wall-clock timings of full vs pruned prefill and greedy
/// generation on one worker thread. With `gen_len == 0` the end-to-end
/// figures repeat the prefill ones.
pub fn bench_toy<T: Real>(
    params: &ModelParams<T>,
    scorers: &ScorerParams<T>,
    schedule: &PruneSchedule,
    tokens: &[usize],
    gen_len: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Input("repeats must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("benchmark worker: {e}")))?;
    pool.install(|| {
        let none = KVCachePolicy::none();
        let mut series: [Vec<f64>; 4] = Default::default();
        for _ in 0..repeats {
            series[0].push(time_ms(&mut || prefill(params, tokens).map(|_| ()))?);
            series[1].push(time_ms(&mut || {
                prefill_pruned(params, tokens, schedule, scorers).map(|_| ())
            })?);
            if gen_len == 0 {
                series[2].push(series[0][series[0].len() - 1]);
                series[3].push(series[1][series[1].len() - 1]);
                continue;
            }
            series[2].push(time_ms(&mut || {
                generate(params, tokens, None, &none, gen_len).map(|_| ())
            })?);
            series[3].push(time_ms(&mut || {
                generate(params, tokens, Some((schedule, scorers)), &none, gen_len).map(|_| ())
            })?);
        }
        let raw = series.clone();
        let meds: Vec<f64> = series.iter_mut().map(|s| median(s)).collect();
        let full = generate(params, tokens, None, &none, gen_len)?;
        let pruned = generate(params, tokens, Some((schedule, scorers)), &none, gen_len)?;
        let same = full.tokens.iter().zip(&pruned.tokens).filter(|(a, b)| a == b).count();
        Ok(BenchReport {
            n: tokens.len(),
            gen_len,
            repeats,
            workers: 1,
            prefill_ms_full: meds[0],
            prefill_ms_pruned: meds[1],
            end2end_ms_full: meds[2],
            end2end_ms_pruned: meds[3],
            prefill_speedup: meds[0] / meds[1],
            end2end_speedup: meds[2] / meds[3],
            spread: [0, 1, 2, 3].map(|i| spread(&raw[i], meds[i])),
            overlap: if gen_len == 0 {
                1.0
            } else {
                same as f64 / gen_len as f64
            },
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ten_stage_schedule() -> PruneSchedule {
        PruneSchedule::build(10, 0.9, 4, 3, 32).unwrap()
    }

    #[test]
    fn builtin_profiles_match_supplied_counts() {
        for name in BUILTIN_PROFILES {
            let p = ArchProfile::builtin(name).unwrap();
            let rel = (p.derived_params() - p.params()).abs() / p.params();
            assert!(rel < PARAM_TOLERANCE, "{name}: {rel}");
        }
        let err = ArchProfile::builtin("gpt-9").unwrap_err().to_string();
        assert!(err.contains("mistral-7b") && err.contains("bloom-7b"));
        let mut bad = ArchProfile::builtin("llama2-7b").unwrap();
        bad.param_count = Some(5e9);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_token_is_two_flops_per_weight() {
        let p = ArchProfile::builtin("mistral-7b").unwrap();
        let f = flops_prefill(&p, 1, None).unwrap();
        let matrix = p.derived_params() - (p.vocab_size * p.d_model) as f64;
        assert!((f.linear + f.head - 2.0 * matrix).abs() < 1.0);
        assert!(f.attention / f.total < 1e-4);
    }

    #[test]
    fn closed_form_mean_keep() {
        let s = ten_stage_schedule();
        let sum: f64 = (1..=9).map(|k| 0.9f64.powi(k)).sum();
        let closed = (4.0 + 3.0 * sum + 0.9f64.powi(10)) / 32.0;
        assert!((mean_layer_keep(&s, 32).unwrap() - closed).abs() < 1e-9);
        assert!((closed - 0.6528).abs() < 1e-3);
    }

    #[test]
    fn monotone_in_length_and_pruning() {
        let p = ArchProfile::builtin("mistral-7b").unwrap();
        let s = ten_stage_schedule();
        let pr = Some(Pruning::new(&s, &p));
        let mut prev = 0.0;
        let mut prev_saving = 0.0;
        for n in [1, 16, 512, 4096, 8192, 65536] {
            let full = flops_prefill(&p, n, None).unwrap().total;
            let cut = flops_prefill(&p, n, pr).unwrap().total;
            assert!(full > prev);
            prev = full;
            if n >= 16 {
                assert!(cut < full);
            }
            let r = report(&p, n, 0, pr, 2).unwrap();
            let (b, q) = (&r.baseline, r.pruned.as_ref().unwrap());
            assert!(q.prefill.linear <= b.prefill.linear && q.prefill.attention <= b.prefill.attention);
            assert!(q.memory.kv_cache <= b.memory.kv_cache && q.memory.logits <= b.memory.logits);
            let saving = r.memory_saving.unwrap();
            if n >= 512 {
                assert!(saving > prev_saving);
            }
            prev_saving = saving;
            assert_eq!(r.convention, CONVENTION);
        }
    }

    #[test]
    fn end_to_end_reduces_to_prefill() {
        let p = ArchProfile::builtin("llama2-7b").unwrap();
        let pre = flops_prefill(&p, 300, None).unwrap().total;
        assert_eq!(flops_end2end(&p, 300, 0, None).unwrap(), pre);
        assert!(flops_end2end(&p, 300, 5, None).unwrap() > pre);
        assert!(flops_prefill(&p, 0, None).is_err());
    }

    #[test]
    fn short_context_memory_is_weight_bound() {
        let p = ArchProfile::builtin("mistral-7b").unwrap();
        let s = ten_stage_schedule();
        let r = report(&p, 4096, 128, Some(Pruning::new(&s, &p)), 2).unwrap();
        assert!((r.memory_saving.unwrap() - 0.0328).abs() < 0.03);
        assert!(r.baseline.memory.weights / r.baseline.memory.total > 0.8);
    }

    #[test]
    fn schedule_must_fit_profile() {
        let toy = ArchProfile::builtin("toy").unwrap();
        let s = ten_stage_schedule();
        assert!(flops_prefill(&toy, 64, Some(Pruning::new(&s, &toy))).is_err());
    }

    #[test]
    fn table_has_one_row_per_length() {
        let p = ArchProfile::builtin("mistral-7b").unwrap();
        let s = ten_stage_schedule();
        let rows: Vec<FlopsReport> = DEFAULT_LENGTHS
            .iter()
            .map(|&n| report(&p, n, DEFAULT_GEN_LEN, Some(Pruning::new(&s, &p)), 2).unwrap())
            .collect();
        let t = table_text(&rows);
        assert_eq!(t.lines().count(), DEFAULT_LENGTHS.len() + 2);
        assert!(t.contains("convention"));
        let plain = report(&p, 4096, 0, None, 2).unwrap();
        assert!(table_text(&[plain]).lines().nth(1).unwrap().contains(" -"));
    }

    #[test]
    fn identity_bench_has_unit_speedup_scale() {
        let c = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 32,
            max_seq_len: 64,
            seed: 0,
        };
        let p = ModelParams::<f32>::init(&c).unwrap();
        let s = PruneSchedule::identity(&[1]).unwrap();
        let sc = ScorerParams::init(16, 1, 0);
        let toks: Vec<usize> = (0..40).map(|i| i % 32).collect();
        let r = bench_toy(&p, &sc, &s, &toks, 4, 3).unwrap();
        assert_eq!(r.overlap, 1.0);
        assert_eq!(r.workers, 1);
        assert!(r.prefill_ms_full > 0.0 && r.end2end_ms_pruned > 0.0);
        assert!(bench_toy(&p, &sc, &s, &toks, 4, 0).is_err());
    }
}
