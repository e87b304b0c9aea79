use super::kv::{KVCache, LayerCache};
use super::{LayerVars, ModelConfig, ModelParams, ModelVars};
use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::pruner::{self, PruneSchedule, ScorerParams, TokenMask};
use crate::{Error, Result};

/// Residual stream entering a block: hidden rows, the original position of
/// each row, and an optional per-key attention gate.
#[derive(Clone, Debug)]
pub struct Stream {
    pub x: Var,
    pub positions: Vec<usize>,
    pub gate: Option<Var>,
}

pub struct BlockOut {
    pub x: Var,
    pub k: Var,
    pub v: Var,
}

pub struct ForwardOut {
    pub logits: Var,
    pub positions: Vec<usize>,
    /// Per-layer keys and values with their positions, when requested.
    pub kv: Vec<(Var, Var, Vec<usize>)>,
}

pub fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {t} outside vocabulary {}",
            config.vocab_size
        )));
    }
    Ok(())
}

pub fn embed<T: Real>(tape: &mut Tape<T>, mv: &ModelVars, tokens: &[usize], positions: &[usize]) -> Result<Var> {
    let tok = tape.gather_rows(mv.tok_emb, tokens)?;
    let pos = tape.gather_rows(mv.pos_emb, positions)?;
    Ok(tape.add(tok, pos)?)
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ MLP(LN(.))`.
pub fn block<T: Real>(tape: &mut Tape<T>, lv: &LayerVars, config: &ModelConfig, stream: &Stream) -> Result<BlockOut> {
    let x = stream.x;
    let h = tape.layer_norm(x, lv.ln1_g, lv.ln1_b)?;
    let q = tape.matmul(h, lv.wq)?;
    let k = tape.matmul(h, lv.wk)?;
    let v = tape.matmul(h, lv.wv)?;
    let a = tape.attention(
        q,
        k,
        v,
        config.n_heads,
        &stream.positions,
        &stream.positions,
        stream.gate,
    )?;
    let a = tape.matmul(a, lv.wo)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, lv.ln2_g, lv.ln2_b)?;
    let m = tape.matmul(h, lv.w1)?;
    let m = tape.add_row(m, lv.b1)?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, lv.w2)?;
    let m = tape.add_row(m, lv.b2)?;
    Ok(BlockOut {
        x: tape.add(x, m)?,
        k,
        v,
    })
}

pub fn head<T: Real>(tape: &mut Tape<T>, mv: &ModelVars, x: Var) -> Result<Var> {
    let h = tape.layer_norm(x, mv.lnf_g, mv.lnf_b)?;
    Ok(tape.matmul(h, mv.w_out)?)
}

/// Full forward on `tape`. `hook(tape, layer, stream)` runs before every
/// block and may replace the stream (tap, gate or gather rows).
pub fn forward_with_hook<T: Real>(
    tape: &mut Tape<T>,
    mv: &ModelVars,
    config: &ModelConfig,
    tokens: &[usize],
    keep_kv: bool,
    mut hook: impl FnMut(&mut Tape<T>, usize, &mut Stream) -> Result<()>,
) -> Result<ForwardOut> {
    check_tokens(config, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let x = embed(tape, mv, tokens, &positions)?;
    let mut stream = Stream {
        x,
        positions,
        gate: None,
    };
    let mut kv = Vec::new();
    for (l, lv) in mv.layers.iter().enumerate() {
        hook(tape, l, &mut stream)?;
        let out = block(tape, lv, config, &stream)?;
        if keep_kv {
            kv.push((out.k, out.v, stream.positions.clone()));
        }
        stream.x = out.x;
    }
    let logits = head(tape, mv, stream.x)?;
    Ok(ForwardOut {
        logits,
        positions: stream.positions,
        kv,
    })
}

/// Result of an untaped forward.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub logits: Tensor<T>,
    /// Block inputs at the requested tap layers, in tap order.
    pub taps: Vec<Tensor<T>>,
}

/// Plain forward with optional attention masking. With `mask`, the keep
/// vector of stage `s` gates keys from block `schedule.stages[s].layer` on.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    tokens: &[usize],
    mask: Option<(&PruneSchedule, &TokenMask)>,
    tap_layers: &[usize],
) -> Result<Forward<T>> {
    if let Some((schedule, m)) = mask {
        if m.len() != tokens.len() {
            return Err(Error::Input(format!(
                "mask over {} tokens for a sequence of {}",
                m.len(),
                tokens.len()
            )));
        }
        if m.num_stages() != schedule.len() {
            return Err(Error::Input(format!(
                "mask has {} stages, schedule has {}",
                m.num_stages(),
                schedule.len()
            )));
        }
        schedule.check_layers(params.config.n_layers)?;
    }
    let mut tape = Tape::new();
    let mv = params.register(&mut tape, false);
    let mut taps = vec![None; tap_layers.len()];
    let out = forward_with_hook(&mut tape, &mv, &params.config, tokens, false, |tape, l, s| {
        if let Some((schedule, m)) = mask {
            if let Some(st) = schedule.stage_at(l) {
                let g: Vec<T> = m
                    .stage(st)
                    .iter()
                    .map(|&k| if k { T::one() } else { T::zero() })
                    .collect();
                s.gate = Some(tape.constant(Tensor::vector(g)));
            }
        }
        for (slot, _) in taps.iter_mut().zip(tap_layers).filter(|(_, &t)| t == l) {
            *slot = Some(tape.value(s.x).clone());
        }
        Ok(())
    })?;
    let taps = taps
        .into_iter()
        .zip(tap_layers)
        .map(|(t, l)| t.ok_or_else(|| Error::Input(format!("tap layer {l} outside the model"))))
        .collect::<Result<_>>()?;
    Ok(Forward {
        logits: tape.value(out.logits).clone(),
        taps,
    })
}

/// Output of a physically pruned prefill.
#[derive(Clone, Debug)]
pub struct Prefill<T> {
    /// Logits of the tokens surviving every stage, one row per position in
    /// `positions`.
    pub logits: Tensor<T>,
    pub positions: Vec<usize>,
    pub cache: KVCache<T>,
    pub mask: TokenMask,
    /// Keep-logit margins of the tokens scored at each stage.
    pub stage_scores: Vec<Vec<f64>>,
}

impl<T: Real> Prefill<T> {
    /// Next-token logits after the last prompt token.
    pub fn last_logits(&self) -> &[T] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Keeps the protected tokens plus the best-scoring survivors at each stage
/// and removes the rest from all later blocks and from the KV cache.
pub fn prefill_pruned<T: Real>(
    params: &ModelParams<T>,
    tokens: &[usize],
    schedule: &PruneSchedule,
    scorers: &ScorerParams<T>,
) -> Result<Prefill<T>> {
    prefill_with(params, tokens, Some(schedule), scorers, |margins, _| Ok(margins))
}

/// Like [`prefill_pruned`] with the stage scores supplied by `score(margins,
/// stage)`, e.g. random scores for a random-pruning baseline.
pub fn prefill_with<T: Real>(
    params: &ModelParams<T>,
    tokens: &[usize],
    schedule: Option<&PruneSchedule>,
    scorers: &ScorerParams<T>,
    mut score: impl FnMut(Vec<f64>, usize) -> Result<Vec<f64>>,
) -> Result<Prefill<T>> {
    let n = tokens.len();
    if let Some(s) = schedule {
        if scorers.num_stages() != s.len() {
            return Err(Error::Input(format!(
                "{} scorers for a {}-stage schedule",
                scorers.num_stages(),
                s.len()
            )));
        }
        if scorers.d_model != params.config.d_model {
            return Err(Error::Input(format!(
                "scorer width {} vs model width {}",
                scorers.d_model, params.config.d_model
            )));
        }
    }
    let protected = schedule.map_or_else(Vec::new, |s| s.protected(n));
    let mut is_protected = vec![false; n];
    for &p in &protected {
        is_protected[p] = true;
    }
    prefill_impl(params, tokens, schedule, protected.clone(), |st, x, positions| {
        let schedule = schedule.expect("stages imply a schedule");
        let logits = pruner::score_tokens(x, &scorers.stages[st])?;
        let margins = score(pruner::keep_margin(&logits), st)?;
        let local_protected: Vec<usize> = positions
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| is_protected[p].then_some(i))
            .collect();
        let k = schedule.stage_keep_count(st, n).min(positions.len());
        let keep = pruner::select_top_count(&margins, k, &local_protected);
        Ok((keep, margins))
    })
}

/// Physically gathered forward that keeps exactly the sets recorded in
/// `mask` (the reference for attention-mask simulation).
pub fn prefill_kept<T: Real>(
    params: &ModelParams<T>,
    tokens: &[usize],
    schedule: &PruneSchedule,
    mask: &TokenMask,
) -> Result<Prefill<T>> {
    if mask.len() != tokens.len() || mask.num_stages() != schedule.len() {
        return Err(Error::Input(format!(
            "mask of {} tokens x {} stages for {} tokens x {} stages",
            mask.len(),
            mask.num_stages(),
            tokens.len(),
            schedule.len()
        )));
    }
    prefill_impl(
        params,
        tokens,
        Some(schedule),
        mask.protected().to_vec(),
        |st, _, positions| {
            let keep_row = mask.stage(st);
            let keep: Vec<usize> = positions
                .iter()
                .enumerate()
                .filter_map(|(i, &p)| keep_row[p].then_some(i))
                .collect();
            let scores = positions.iter().map(|&p| f64::from(u8::from(keep_row[p]))).collect();
            Ok((keep, scores))
        },
    )
}

fn prefill_impl<T: Real>(
    params: &ModelParams<T>,
    tokens: &[usize],
    schedule: Option<&PruneSchedule>,
    protected: Vec<usize>,
    mut choose: impl FnMut(usize, &Tensor<T>, &[usize]) -> Result<(Vec<usize>, Vec<f64>)>,
) -> Result<Prefill<T>> {
    let config = &params.config;
    let n = tokens.len();
    if let Some(s) = schedule {
        s.check_layers(config.n_layers)?;
    }
    let mut mask = TokenMask::new(n, protected);
    let mut stage_scores = Vec::new();
    let mut tape = Tape::new();
    let mv = params.register(&mut tape, false);
    let out = forward_with_hook(&mut tape, &mv, config, tokens, true, |tape, l, s| {
        let Some(st) = schedule.and_then(|sc| sc.stage_at(l)) else {
            return Ok(());
        };
        let (keep, scores) = choose(st, tape.value(s.x), &s.positions)?;
        let mut v = vec![false; n];
        for &i in &keep {
            v[s.positions[i]] = true;
        }
        mask.push(&v)?;
        stage_scores.push(scores);
        if keep.len() != s.positions.len() {
            s.x = tape.gather_rows(s.x, &keep)?;
            s.positions = keep.iter().map(|&i| s.positions[i]).collect();
        }
        Ok(())
    })?;
    let layers = out
        .kv
        .iter()
        .map(|(k, v, pos)| LayerCache::new(tape.value(*k), tape.value(*v), pos.clone()))
        .collect();
    Ok(Prefill {
        logits: tape.value(out.logits).clone(),
        positions: out.positions,
        cache: KVCache::from_layers(config.d_model, layers, n),
        mask,
        stage_scores,
    })
}

/// Unpruned prefill: full logits and a cache of every prompt token.
pub fn prefill<T: Real>(params: &ModelParams<T>, tokens: &[usize]) -> Result<Prefill<T>> {
    let scorers = ScorerParams::zeros(params.config.d_model, 0);
    prefill_with(params, tokens, None, &scorers, |m, _| Ok(m))
}
