//! Two-pass scorer training on a frozen decoder. The marking pass turns
//! gradient-times-input saliency of the unpruned model into per-stage
//! targets; the pruning pass runs the model with straight-through Gumbel
//! keep gates applied as attention masks and steps the scorers on the
//! weighted loss.

pub mod corpus;
mod eval;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use corpus::{split_holdout, synthetic_text, Corpus, BYTE_VOCAB, DEFAULT_WINDOW};
pub use eval::{evaluate, scorer_correlation, spearman, tail_positions, EvalMode, EvalOptions, EvalReport};

use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::model::{checkpoint, forward_with_hook, ModelConfig, ModelParams};
use crate::objectives::{rank_pairs, total_loss, LossReport, LossWeights, DEFAULT_PAIR_BUDGET};
use crate::pruner::{self, PruneSchedule, ScorerParams, DEFAULT_TEMPERATURE};
use crate::saliency::{attribute, normalize, Reduction};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub temperature: f64,
    pub weights: LossWeights,
    pub pair_budget: usize,
    pub seed: u64,
    pub saliency_mode: Reduction,
    /// Base weights stay fixed; only scorers are updated.
    pub freeze: bool,
    /// Keep-ratio penalty plus cross-entropy, no saliency supervision.
    pub baseline: bool,
    /// Adds the keep-ratio penalty to the full objective.
    pub ratio_loss: bool,
    /// Reuse marking-pass targets across epochs.
    pub cache_saliency: bool,
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            temperature: DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
            pair_budget: DEFAULT_PAIR_BUDGET,
            seed: 0,
            saliency_mode: Reduction::AbsDot,
            freeze: true,
            baseline: false,
            ratio_loss: false,
            cache_saliency: false,
            window: DEFAULT_WINDOW,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad(format!("train.epochs must be >= 1, got {}", self.epochs));
        }
        if self.batch_size < 1 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("train.eps must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("train.temperature must be positive, got {}", self.temperature));
        }
        if self.pair_budget < 1 {
            return bad("train.pair_budget must be >= 1".into());
        }
        if self.window < 2 {
            return bad("train.window must be >= 2".into());
        }
        Ok(())
    }

    /// Loss weights actually applied: the baseline drops saliency terms and
    /// always includes the ratio penalty.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.baseline {
            w.mse = 0.0;
            w.rank = 0.0;
        }
        w
    }

    pub fn uses_ratio(&self) -> bool {
        self.baseline || self.ratio_loss
    }
}

/// Adaptive moment estimation over a fixed list of tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn step<T: Real>(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Input("optimizer step with mismatched gradients".into()));
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of tensor {i}")));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        if self.lr == 0.0 {
            return Ok(());
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let update = self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *x = T::c(x.f64() - update);
            }
        }
        Ok(())
    }
}

/// Normalized saliency targets of one sequence, one vector per stage.
pub type Targets = Vec<Vec<f64>>;

fn check_batch(batch: &[Vec<usize>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(w) = batch.iter().find(|w| w.len() < 2) {
        return Err(Error::Input(format!("window of {} tokens has no labels", w.len())));
    }
    Ok(())
}

/// Saliency targets from the base model only. Each window holds the inputs
/// followed by one extra label token.
pub fn marking_pass<T: Real>(
    params: &ModelParams<T>,
    batch: &[Vec<usize>],
    schedule: &PruneSchedule,
    mode: Reduction,
) -> Result<Vec<Targets>> {
    check_batch(batch)?;
    batch
        .par_iter()
        .map(|w| {
            let n = w.len() - 1;
            let maps = attribute(params, &w[..n], &w[1..], schedule, mode)?;
            Ok(maps.iter().map(|m| normalize(m).scores).collect())
        })
        .collect()
}

struct ItemOut {
    cls: f64,
    mse: Vec<f64>,
    rank: Vec<f64>,
    ratio: Option<f64>,
    pairs: Vec<usize>,
    scorer_grads: Vec<Vec<f64>>,
    model_grads: Option<Vec<Vec<f64>>>,
}

fn item_seed(seed: u64, step: usize, item: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((step as u64).to_le_bytes());
    h.update((item as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Per-stage target of the keep-ratio penalty: the fraction of tokens alive
/// before stage `s` that survive it.
fn stage_ratio(schedule: &PruneSchedule, s: usize) -> f64 {
    let prev = if s == 0 { 1.0 } else { schedule.stages[s - 1].keep_ratio };
    schedule.stages[s].keep_ratio / prev
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().f64()
}

#[allow(clippy::too_many_arguments)]
fn item_pass<T: Real>(
    params: &ModelParams<T>,
    scorers: &ScorerParams<T>,
    window: &[usize],
    targets: Option<&Targets>,
    schedule: &PruneSchedule,
    cfg: &TrainConfig,
    seed: u64,
    train_model: bool,
) -> Result<ItemOut> {
    let n = window.len() - 1;
    let (tokens, labels) = (&window[..n], &window[1..]);
    let stages = schedule.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protected = schedule.protected(n);
    let mut forced = vec![false; n];
    for &p in &protected {
        forced[p] = true;
    }
    let include: Vec<bool> = forced.iter().map(|f| !f).collect();
    let n_inc = include.iter().filter(|&&b| b).count();
    let tau = T::c(cfg.temperature);
    let noise: Vec<Vec<T>> = (0..stages)
        .map(|_| pruner::gumbel_noise(n, &mut rng).into_iter().map(T::c).collect())
        .collect();

    let mut tape = Tape::new();
    let mv = params.register(&mut tape, train_model);
    let sv = scorers.register(&mut tape, true);
    let mut stage_logits = Vec::with_capacity(stages);
    let out = forward_with_hook(&mut tape, &mv, &params.config, tokens, false, |tape, l, s| {
        let Some(st) = schedule.stage_at(l) else {
            return Ok(());
        };
        let logits = pruner::score_on_tape(tape, &sv[st], s.x)?;
        let hard = tape.straight_through_keep(logits, &noise[st], tau, &forced)?;
        s.gate = Some(match s.gate {
            Some(prev) => tape.mul(prev, hard)?,
            None => hard,
        });
        stage_logits.push(logits);
        Ok(())
    })?;
    let inv_n = T::c(1.0 / n as f64);
    let cls = tape.nll_sum(out.logits, labels, vec![inv_n; n])?;
    let w = cfg.effective_weights();
    let mut total = tape.scale(cls, T::c(w.cls));
    let (mut mse, mut rank, mut pairs) = (vec![0.0; stages], vec![0.0; stages], vec![0; stages]);
    let mut ratio_terms = Vec::new();
    for (st, &logits) in stage_logits.iter().enumerate() {
        let probs = tape.softmax_rows(logits);
        let keep = tape.column(probs, 0)?;
        if let (Some(targets), false) = (targets, cfg.baseline) {
            let target = &targets[st];
            if n_inc > 0 {
                let t = tape.constant(Tensor::vector(target.iter().map(|&v| T::c(v)).collect()));
                let d = tape.sub(keep, t)?;
                let sq = tape.square(d);
                let wts = include
                    .iter()
                    .map(|&b| if b { T::c(1.0 / n_inc as f64) } else { T::zero() })
                    .collect();
                let m = tape.weighted_sum(sq, wts)?;
                mse[st] = scalar(&tape, m);
                let m = tape.scale(m, T::c(w.mse));
                total = tape.add(total, m)?;
            }
            let (rp, _) = rank_pairs(target, &include, cfg.pair_budget, &mut rng);
            pairs[st] = rp.len();
            let a = tape.column(logits, 0)?;
            let b = tape.column(logits, 1)?;
            let margin = tape.sub(a, b)?;
            let r = tape.pairwise_rank(margin, rp)?;
            rank[st] = scalar(&tape, r);
            let r = tape.scale(r, T::c(w.rank));
            total = tape.add(total, r)?;
        }
        if cfg.uses_ratio() {
            let mean = tape.weighted_sum(keep, vec![inv_n; n])?;
            let d = tape.add_scalar(mean, T::c(-stage_ratio(schedule, st)));
            let sq = tape.square(d);
            ratio_terms.push(scalar(&tape, sq));
            let sq = tape.scale(sq, T::c(w.ratio));
            total = tape.add(total, sq)?;
        }
    }
    tape.backward(total)?;
    let grads_of = |vars: Vec<Var>| -> Vec<Vec<f64>> {
        vars.into_iter()
            .map(|v| tape.grad(v).data().iter().map(|g| g.f64()).collect())
            .collect()
    };
    let scorer_vars = sv.iter().flat_map(|s| [s.w1, s.b1, s.w2, s.b2]).collect();
    Ok(ItemOut {
        cls: scalar(&tape, cls),
        mse,
        rank,
        ratio: cfg.uses_ratio().then(|| ratio_terms.iter().sum()),
        pairs,
        scorer_grads: grads_of(scorer_vars),
        model_grads: train_model.then(|| grads_of(mv.all())),
    })
}

/// Optimizer state of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub scorer_opt: Adam,
    pub model_opt: Option<Adam>,
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            scorer_opt: Adam::from_config(cfg),
            model_opt: (!cfg.freeze).then(|| Adam::from_config(cfg)),
            step: 0,
        }
    }
}

fn mean_of(items: &[ItemOut], f: impl Fn(&ItemOut) -> f64) -> f64 {
    items.iter().map(f).sum::<f64>() / items.len() as f64
}

fn reduce(items: &[ItemOut], pick: impl Fn(&ItemOut) -> &Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let scale = 1.0 / items.len() as f64;
    let mut acc: Vec<Vec<f64>> = pick(&items[0]).iter().map(|g| vec![0.0; g.len()]).collect();
    for it in items {
        for (a, g) in acc.iter_mut().zip(pick(it)) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x *= scale;
        }
    }
    acc
}

/// One optimizer step on a batch. Items run in parallel and their gradients
/// are averaged in batch order. When `cfg.freeze` is off the base weights
/// are stepped too, which fails on frozen parameters.
#[allow(clippy::too_many_arguments)]
pub fn pruning_pass<T: Real>(
    params: &mut ModelParams<T>,
    scorers: &mut ScorerParams<T>,
    state: &mut TrainState,
    batch: &[Vec<usize>],
    targets: Option<&[Targets]>,
    schedule: &PruneSchedule,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossReport> {
    check_batch(batch)?;
    if scorers.num_stages() != schedule.len() {
        return Err(Error::Input(format!(
            "{} scorers for a {}-stage schedule",
            scorers.num_stages(),
            schedule.len()
        )));
    }
    if !cfg.baseline {
        let t = targets.ok_or_else(|| Error::Input("saliency targets are required".into()))?;
        if t.len() != batch.len() {
            return Err(Error::Input(format!(
                "{} target sets for {} sequences",
                t.len(),
                batch.len()
            )));
        }
        if let Some((i, _)) = t
            .iter()
            .zip(batch)
            .enumerate()
            .find(|(_, (t, w))| t.len() != schedule.len() || t.iter().any(|v| v.len() != w.len() - 1))
        {
            return Err(Error::Input(format!("targets of sequence {i} do not match its stages")));
        }
    }
    let train_model = !cfg.freeze;
    if train_model && params.frozen {
        return Err(Error::Frozen(
            "attempted to apply a gradient step to frozen base parameters".into(),
        ));
    }
    let step = state.step + 1;
    let (p, s) = (&*params, &*scorers);
    let items: Vec<ItemOut> = batch
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let t = if cfg.baseline { None } else { targets.map(|t| &t[i]) };
            item_pass(p, s, w, t, schedule, cfg, item_seed(cfg.seed, step, i), train_model)
        })
        .collect::<Result<_>>()?;
    let sg = reduce(&items, |it| &it.scorer_grads);
    state.scorer_opt.step(scorers.tensors_mut(), &sg)?;
    if train_model {
        let mg = reduce(&items, |it| it.model_grads.as_ref().expect("model gradients"));
        let opt = state.model_opt.get_or_insert_with(|| Adam::from_config(cfg));
        opt.step(params.trainable_tensors()?, &mg)?;
    }
    state.step = step;
    let stages = schedule.len();
    let per_stage = |f: &dyn Fn(&ItemOut) -> &Vec<f64>| -> Vec<f64> {
        (0..stages).map(|s| mean_of(&items, |it| f(it)[s])).collect()
    };
    let mse_stages = per_stage(&|it| &it.mse);
    let rank_stages = per_stage(&|it| &it.rank);
    let cls = mean_of(&items, |it| it.cls);
    let mse: f64 = mse_stages.iter().sum();
    let rank: f64 = rank_stages.iter().sum();
    let ratio = cfg.uses_ratio().then(|| mean_of(&items, |it| it.ratio.unwrap_or(0.0)));
    let total = total_loss(cls, mse, rank, ratio, &cfg.effective_weights())?;
    Ok(LossReport {
        step,
        epoch,
        cls,
        mse,
        rank,
        rank_stages,
        mse_stages,
        ratio,
        total,
        pair_counts: (0..stages).map(|s| items.iter().map(|it| it.pairs[s]).sum()).collect(),
    })
}

/// Trained scorers with the model they were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelParams<T>,
    pub scorers: ScorerParams<T>,
    pub schedule: PruneSchedule,
    pub train: TrainConfig,
    pub config_hash: String,
    pub steps: usize,
    pub final_report: Option<LossReport>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    config: ModelConfig,
    model_checksum: String,
    scorer_checksum: String,
    schedule: PruneSchedule,
    train: TrainConfig,
    config_hash: String,
    steps: usize,
    final_report: Option<LossReport>,
}

const SCORER_PREFIX: &str = "scorer.";

/// SHA-256 of the canonical JSON of the training config and schedule.
pub fn config_hash(cfg: &TrainConfig, schedule: &PruneSchedule) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(serde_json::to_vec(schedule).expect("schedule serializes"));
    format!("{:x}", h.finalize())
}

impl<T: Real> Checkpoint<T> {
    /// Untrained checkpoint: freshly initialized scorers for `schedule`.
    pub fn untrained(model: ModelParams<T>, schedule: PruneSchedule, cfg: TrainConfig) -> Self {
        let scorers = ScorerParams::init(model.config.d_model, schedule.len(), cfg.seed);
        Self {
            config_hash: config_hash(&cfg, &schedule),
            model,
            scorers,
            schedule,
            train: cfg,
            steps: 0,
            final_report: None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut tensors = self.model.named_tensors();
        tensors.extend(
            self.scorers
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("{SCORER_PREFIX}{n}"), t)),
        );
        let meta = CheckpointMeta {
            kind: "sdtp".into(),
            config: self.model.config.clone(),
            model_checksum: self.model.checksum(),
            scorer_checksum: self.scorers.checksum(),
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            config_hash: self.config_hash.clone(),
            steps: self.steps,
            final_report: self.final_report.clone(),
        };
        checkpoint::encode(&tensors, serde_json::to_value(meta)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (tensors, meta) = checkpoint::decode::<T>(bytes)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("sdtp") {
            return Err(Error::Checkpoint("not a trained-scorer checkpoint".into()));
        }
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        let (scorer, base): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with(SCORER_PREFIX));
        let mut model = ModelParams::from_named(&meta.config, base)?;
        model.frozen = meta.train.freeze;
        let scorers = ScorerParams::from_named(
            meta.config.d_model,
            scorer
                .into_iter()
                .map(|(n, t)| (n[SCORER_PREFIX.len()..].to_string(), t))
                .collect(),
        )?;
        if T::DTYPE == checkpoint::stored_dtype(bytes)?
            && (model.checksum() != meta.model_checksum || scorers.checksum() != meta.scorer_checksum)
        {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        meta.schedule.validate()?;
        if scorers.num_stages() != meta.schedule.len() {
            return Err(Error::Checkpoint("scorer count does not match the schedule".into()));
        }
        Ok(Self {
            model,
            scorers,
            schedule: meta.schedule,
            train: meta.train,
            config_hash: meta.config_hash,
            steps: meta.steps,
            final_report: meta.final_report,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&checkpoint::read_file(path)?)
    }
}

/// Scorer training over `windows` (each `window + 1` tokens). `on_step`
/// receives every step's report, e.g. to append it to a metrics log.
pub fn train<T: Real>(
    params: &ModelParams<T>,
    windows: &[Vec<usize>],
    schedule: &PruneSchedule,
    cfg: &TrainConfig,
    on_step: impl FnMut(&LossReport) -> Result<()>,
) -> Result<Checkpoint<T>> {
    let mut cache = TargetCache::new(windows.len());
    train_with_cache(params, windows, schedule, cfg, &mut cache, on_step)
}

/// Marking-pass targets by window index. Valid for one (model, windows,
/// schedule, saliency mode) combination, so runs that differ only in seed
/// can share it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetCache {
    slots: Vec<Option<Targets>>,
}

impl TargetCache {
    pub fn new(windows: usize) -> Self {
        Self {
            slots: vec![None; windows],
        }
    }

    pub fn filled(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Targets for `idx`, computing the missing ones.
    pub fn get<T: Real>(
        &mut self,
        params: &ModelParams<T>,
        windows: &[Vec<usize>],
        idx: &[usize],
        schedule: &PruneSchedule,
        mode: Reduction,
    ) -> Result<Vec<Targets>> {
        if self.slots.len() != windows.len() {
            return Err(Error::Input(format!(
                "target cache sized for {} windows, corpus has {}",
                self.slots.len(),
                windows.len()
            )));
        }
        let missing: Vec<usize> = idx.iter().copied().filter(|&i| self.slots[i].is_none()).collect();
        if !missing.is_empty() {
            let fresh: Vec<Vec<usize>> = missing.iter().map(|&i| windows[i].clone()).collect();
            for (i, t) in missing.into_iter().zip(marking_pass(params, &fresh, schedule, mode)?) {
                self.slots[i] = Some(t);
            }
        }
        Ok(idx
            .iter()
            .map(|&i| self.slots[i].clone().expect("filled above"))
            .collect())
    }
}

/// [`train`] reading saliency targets through `cache` when
/// `cfg.cache_saliency` is set.
pub fn train_with_cache<T: Real>(
    params: &ModelParams<T>,
    windows: &[Vec<usize>],
    schedule: &PruneSchedule,
    cfg: &TrainConfig,
    cache: &mut TargetCache,
    mut on_step: impl FnMut(&LossReport) -> Result<()>,
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    schedule.check_layers(params.config.n_layers)?;
    if windows.len() < cfg.batch_size {
        return Err(Error::Input(format!(
            "corpus yields {} windows, fewer than one batch of {}",
            windows.len(),
            cfg.batch_size
        )));
    }
    let mut model = params.clone();
    model.frozen = cfg.freeze;
    let before = model.checksum();
    let mut scorers = ScorerParams::init(model.config.d_model, schedule.len(), cfg.seed);
    let mut state = TrainState::new(cfg);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        for idx in order.chunks_exact(cfg.batch_size) {
            let batch: Vec<Vec<usize>> = idx.iter().map(|&i| windows[i].clone()).collect();
            let targets = if cfg.baseline {
                None
            } else if cfg.cache_saliency {
                Some(cache.get(&model, windows, idx, schedule, cfg.saliency_mode)?)
            } else {
                Some(marking_pass(&model, &batch, schedule, cfg.saliency_mode)?)
            };
            let report = pruning_pass(
                &mut model,
                &mut scorers,
                &mut state,
                &batch,
                targets.as_deref(),
                schedule,
                cfg,
                epoch,
            )?;
            on_step(&report)?;
            last = Some(report);
        }
    }
    if cfg.freeze && model.checksum() != before {
        return Err(Error::Frozen("base parameters changed during a frozen run".into()));
    }
    Ok(Checkpoint {
        model,
        scorers,
        schedule: schedule.clone(),
        train: cfg.clone(),
        config_hash: config_hash(cfg, schedule),
        steps: state.step,
        final_report: last,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub min_lr_frac: f64,
    pub seed: u64,
    pub window: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            lr: 3e-3,
            min_lr_frac: 0.1,
            seed: 0,
            window: DEFAULT_WINDOW,
        }
    }
}

fn lm_item<T: Real>(params: &ModelParams<T>, window: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = window.len() - 1;
    let mut tape = Tape::new();
    let mv = params.register(&mut tape, true);
    let out = forward_with_hook(&mut tape, &mv, &params.config, &window[..n], false, |_, _, _| Ok(()))?;
    let loss = tape.nll_sum(out.logits, &window[1..], vec![T::c(1.0 / n as f64); n])?;
    tape.backward(loss)?;
    let grads = mv
        .all()
        .into_iter()
        .map(|v| tape.grad(v).data().iter().map(|g| g.f64()).collect())
        .collect();
    Ok((scalar(&tape, loss), grads))
}

/// Language-model training of the base weights with Adam and cosine decay.
/// Calls `on_step(step, mean loss)` after every step.
pub fn pretrain<T: Real>(
    params: &mut ModelParams<T>,
    windows: &[Vec<usize>],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    if cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.lr > 0.0) {
        return Err(Error::Config(
            "pretrain needs epochs >= 1, batch_size >= 1 and lr > 0".into(),
        ));
    }
    if windows.len() < cfg.batch_size {
        return Err(Error::Input(format!(
            "corpus yields {} windows, fewer than one batch of {}",
            windows.len(),
            cfg.batch_size
        )));
    }
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
    let per_epoch = windows.len() / cfg.batch_size;
    let total = (per_epoch * cfg.epochs) as f64;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x51_7cc1));
        order.shuffle(&mut rng);
        for idx in order.chunks_exact(cfg.batch_size) {
            let p = &*params;
            let items: Vec<(f64, Vec<Vec<f64>>)> = idx
                .par_iter()
                .map(|&i| lm_item(p, &windows[i]))
                .collect::<Result<_>>()?;
            let scale = 1.0 / items.len() as f64;
            let mut grads: Vec<Vec<f64>> = items[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
            for (_, g) in &items {
                for (a, b) in grads.iter_mut().zip(g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y * scale;
                    }
                }
            }
            let progress = losses.len() as f64 / total;
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.lr = cfg.lr * (cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * cos);
            opt.step(params.trainable_tensors()?, &grads)?;
            let loss = items.iter().map(|(l, _)| l).sum::<f64>() * scale;
            losses.push(loss);
            on_step(losses.len(), loss)?;
        }
    }
    Ok(losses)
}
