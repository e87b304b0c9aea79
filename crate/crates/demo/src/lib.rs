//! WebAssembly bindings for the static demo page. Every export returns a
//! JSON string; errors come back as plain messages.

use serde_json::json;
use wasm_bindgen::prelude::*;

use sdtp::kvcache::{select_entries, KVCachePolicy};
use sdtp::profiler::{self, ArchProfile, Pruning};
use sdtp::pruner::PruneSchedule;

fn schedule(stages: usize, ratio: f64, start: usize, step: usize, layers: usize) -> Result<PruneSchedule, String> {
    PruneSchedule::build(stages, ratio, start, step, layers).map_err(|e| e.to_string())
}

/// Tokens entering every layer of an `n`-token prompt.
pub fn schedule_tokens(
    stages: usize,
    ratio: f64,
    start: usize,
    step: usize,
    layers: usize,
    n: usize,
) -> Result<String, String> {
    let s = schedule(stages, ratio, start, step, layers)?;
    Ok(json!({
        "stage_layers": s.layers(),
        "tokens": s.tokens_per_layer(n, layers, true),
        "final_keep": s.final_keep_ratio(),
        "mean_layer_keep": s.mean_layer_keep(layers),
    })
    .to_string())
}

/// Prefill, end-to-end and memory costs of a built-in profile at each
/// length, with and without pruning.
pub fn flops_table(
    profile: &str,
    lengths: &[u32],
    stages: usize,
    ratio: f64,
    start: usize,
    step: usize,
) -> Result<String, String> {
    let p = ArchProfile::builtin(profile).map_err(|e| e.to_string())?;
    let s = schedule(stages, ratio, start, step, p.n_layers)?;
    let rows = lengths
        .iter()
        .map(|&n| profiler::report(&p, n as usize, 128, Some(Pruning::new(&s, &p)), 2))
        .collect::<sdtp::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

/// Entries a heavy-hitter cache keeps from `masses` under a budget of
/// `budget_fraction` of its length.
pub fn eviction(masses: &[f64], budget_fraction: f64) -> Result<String, String> {
    let policy = KVCachePolicy::heavy_hitter(budget_fraction).map_err(|e| e.to_string())?;
    let budget = policy
        .budget(masses.len())
        .map_err(|e| e.to_string())?
        .unwrap_or(masses.len());
    Ok(json!({
        "budget": budget,
        "sinks": policy.sink_count.min(budget),
        "kept": select_entries(masses, budget, &policy),
    })
    .to_string())
}

#[wasm_bindgen(js_name = scheduleTokens)]
pub fn schedule_tokens_js(
    stages: usize,
    ratio: f64,
    start: usize,
    step: usize,
    layers: usize,
    n: usize,
) -> Result<String, JsValue> {
    schedule_tokens(stages, ratio, start, step, layers, n).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = flopsTable)]
pub fn flops_table_js(
    profile: &str,
    lengths: &[u32],
    stages: usize,
    ratio: f64,
    start: usize,
    step: usize,
) -> Result<String, JsValue> {
    flops_table(profile, lengths, stages, ratio, start, step).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = eviction)]
pub fn eviction_js(masses: &[f64], budget_fraction: f64) -> Result<String, JsValue> {
    eviction(masses, budget_fraction).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn default_schedule_tokens() {
        let v = parse(&schedule_tokens(10, 0.9, 4, 3, 32, 4096).unwrap());
        assert_eq!(v["tokens"].as_array().unwrap().len(), 32);
        assert!((v["final_keep"].as_f64().unwrap() - 0.9f64.powi(10)).abs() < 1e-12);
        assert!(schedule_tokens(10, 0.9, 4, 3, 30, 4096).is_err());
    }

    #[test]
    fn flops_rows_shrink_with_pruning() {
        let v = parse(&flops_table("mistral-7b", &[4096, 32768], 10, 0.9, 4, 3).unwrap());
        for row in v.as_array().unwrap() {
            assert!(row["prefill_ratio"].as_f64().unwrap() < 1.0);
        }
        assert!(flops_table("gpt-x", &[4096], 10, 0.9, 4, 3)
            .unwrap_err()
            .contains("mistral-7b"));
    }

    #[test]
    fn eviction_keeps_sinks() {
        let masses: Vec<f64> = (0..20).map(|i| (i % 7) as f64).collect();
        let v = parse(&eviction(&masses, 0.5).unwrap());
        let kept: Vec<u64> = v["kept"]
            .as_array()
            .unwrap()
            .iter()
            .map(|k| k.as_u64().unwrap())
            .collect();
        assert_eq!(kept.len(), 10);
        assert_eq!(&kept[..4], &[0, 1, 2, 3]);
        assert_eq!(kept.last(), Some(&19));
    }
}
