//! Run configuration: strict JSON blocks, flag overrides and the resolved
//! snapshot written next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::kvcache::{KVCachePolicy, PolicyKind};
use crate::model::ModelConfig;
use crate::profiler::{ArchProfile, DEFAULT_GEN_LEN, DEFAULT_LENGTHS, DEFAULT_PRECISION_BYTES};
use crate::pruner::{PruneSchedule, ScheduleConfig, DEFAULT_LAYER_STEP, DEFAULT_STAGES, DEFAULT_START_LAYER};
use crate::trainer::{EvalMode, PretrainConfig, TrainConfig};
use crate::{Error, Result};

pub const SNAPSHOT_FILE: &str = "config.resolved.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub config: ModelConfig,
    /// Base model or trained checkpoint; wins over `config` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            config: ModelConfig {
                max_seq_len: 256,
                ..ModelConfig::default()
            },
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Prompt for `generate`, text for `attribute`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Formats printed to stdout; files are always written as JSON/CSV.
    pub formats: Vec<Format>,
    /// Every `round(1/f)`-th window is held out for evaluation.
    pub holdout_fraction: f64,
    /// Cap on windows taken from the front of the corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_windows: Option<usize>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            input: None,
            output_dir: None,
            formats: vec![Format::Text],
            holdout_fraction: 0.1,
            max_windows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub mode: EvalMode,
    pub correlation: bool,
    /// Evaluate every window instead of the held-out split.
    pub all_windows: bool,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            mode: EvalMode::Full,
            correlation: true,
            all_windows: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeBlock {
    pub threshold_frac: f64,
}

impl Default for AttributeBlock {
    fn default() -> Self {
        Self { threshold_frac: 0.10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateBlock {
    pub prune: bool,
    pub gen_len: usize,
}

impl Default for GenerateBlock {
    fn default() -> Self {
        Self {
            prune: false,
            gen_len: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsBlock {
    /// Built-in profile name, ignored when `custom` is set.
    pub profile: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub custom: Option<ArchProfile>,
    pub lengths: Vec<usize>,
    pub gen_len: usize,
    pub precision_bytes: usize,
    pub prune: bool,
}

impl Default for FlopsBlock {
    fn default() -> Self {
        Self {
            profile: "mistral-7b".into(),
            custom: None,
            lengths: DEFAULT_LENGTHS.to_vec(),
            gen_len: DEFAULT_GEN_LEN,
            precision_bytes: DEFAULT_PRECISION_BYTES,
            prune: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchBlock {
    pub n: usize,
    pub gen_len: usize,
    pub repeats: usize,
}

impl Default for BenchBlock {
    fn default() -> Self {
        Self {
            n: 4096,
            gen_len: 16,
            repeats: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelBlock,
    /// Unset means the per-command default, see [`toy_schedule`] and
    /// [`profile_schedule`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub kv: KVCachePolicy,
    pub io: IoConfig,
    pub eval: EvalBlock,
    pub attribute: AttributeBlock,
    pub generate: GenerateBlock,
    pub flops: FlopsBlock,
    pub bench: BenchBlock,
    /// Overrides every block seed when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn parse(src: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(src).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&src, &path.display().to_string())?;
        // relative paths in a file are taken from the file's directory
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            let io = &mut cfg.io;
            for p in [
                &mut cfg.model.checkpoint,
                &mut io.corpus,
                &mut io.input,
                &mut io.output_dir,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Propagates the top-level seed and checks the cross-block settings.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(s) = self.seed {
            self.model.config.seed = s;
            self.train.seed = s;
            self.pretrain.seed = s;
        }
        self.seed = Some(self.train.seed);
        self.pretrain.window = self.train.window;
        self.train.validate()?;
        self.kv.validate()?;
        if !(self.io.holdout_fraction >= 0.0 && self.io.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "io.holdout_fraction {} outside [0, 1)",
                self.io.holdout_fraction
            )));
        }
        if !(self.attribute.threshold_frac > 0.0 && self.attribute.threshold_frac < 1.0) {
            return Err(Error::Config("attribute.threshold_frac must lie in (0, 1)".into()));
        }
        if self.flops.lengths.is_empty() || self.flops.lengths.contains(&0) {
            return Err(Error::Config(
                "flops.lengths must be a non-empty list of positive lengths".into(),
            ));
        }
        if self.bench.repeats == 0 || self.bench.n == 0 {
            return Err(Error::Config("bench.n and bench.repeats must be >= 1".into()));
        }
        Ok(self)
    }

    pub fn snapshot(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.io
            .corpus
            .as_deref()
            .ok_or_else(|| Error::Config("io.corpus is required (set it or pass --corpus)".into()))
    }

    pub fn input_path(&self) -> Result<&Path> {
        self.io
            .input
            .as_deref()
            .ok_or_else(|| Error::Config("io.input is required (set it or pass --input)".into()))
    }

    pub fn checkpoint_path(&self) -> Result<&Path> {
        self.model
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("model.checkpoint is required (set it or pass --checkpoint)".into()))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.io
            .output_dir
            .as_deref()
            .ok_or_else(|| Error::Config("io.output_dir is required (set it or pass --out)".into()))
    }
}

/// Three stages at quarter depth with final keep `0.7^3 = 0.343`.
pub fn toy_schedule(n_layers: usize) -> ScheduleConfig {
    let step = (n_layers / 4).max(1);
    ScheduleConfig {
        num_stages: 3.min(n_layers.saturating_sub(1)).max(1),
        r: 0.7,
        start_layer: if n_layers > 1 { step } else { 0 },
        layer_step: step,
        ..ScheduleConfig::default()
    }
}

/// The default geometric layout, trimmed to the stages that fit.
pub fn profile_schedule(n_layers: usize) -> ScheduleConfig {
    let fit = if n_layers > DEFAULT_START_LAYER {
        (n_layers - 1 - DEFAULT_START_LAYER) / DEFAULT_LAYER_STEP + 1
    } else {
        0
    };
    if fit == 0 {
        return toy_schedule(n_layers);
    }
    ScheduleConfig {
        num_stages: DEFAULT_STAGES.min(fit),
        ..ScheduleConfig::default()
    }
}

/// Snapshot form of a concrete schedule.
pub fn schedule_config_of(s: &PruneSchedule) -> ScheduleConfig {
    ScheduleConfig {
        num_stages: s.len(),
        sink_count: s.sink_count,
        local_fraction: s.local_fraction,
        stages: Some(s.stages.clone()),
        ..ScheduleConfig::default()
    }
}

/// `none`, `local:F` or `h2o:F`, keeping the sink count and recent share
/// of `base`.
pub fn parse_kv_policy(spec: &str, base: &KVCachePolicy) -> Result<KVCachePolicy> {
    let mut p: KVCachePolicy = spec.parse()?;
    if p.kind != PolicyKind::None {
        p.local_fraction = base.local_fraction;
        p.sink_count = base.sink_count;
    }
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::parse("{}", "t").unwrap();
        assert_eq!(c, RunConfig::default());
        let r = c.resolve().unwrap();
        assert_eq!(r.seed, Some(0));
        let again = RunConfig::parse(&r.snapshot().unwrap(), "snap")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let e = RunConfig::parse("{\"train\": {\"epoch\": 2}}", "c.json")
            .unwrap_err()
            .to_string();
        assert!(e.contains("epoch") && e.contains("line 1"), "{e}");
        let e = RunConfig::parse("{\n\"color\": 1}", "c.json").unwrap_err().to_string();
        assert!(e.contains("color") && e.contains("line 2"), "{e}");
    }

    #[test]
    fn seed_reaches_every_block() {
        let c = RunConfig::parse("{\"seed\": 9}", "t").unwrap().resolve().unwrap();
        assert_eq!((c.model.config.seed, c.train.seed, c.pretrain.seed), (9, 9, 9));
    }

    #[test]
    fn missing_paths_name_fields() {
        let c = RunConfig::default();
        assert!(c.corpus_path().unwrap_err().to_string().contains("io.corpus"));
        assert!(c.output_dir().unwrap_err().to_string().contains("io.output_dir"));
        assert!(c
            .checkpoint_path()
            .unwrap_err()
            .to_string()
            .contains("model.checkpoint"));
    }

    #[test]
    fn default_schedules_fit() {
        assert_eq!(toy_schedule(8).resolve(8).unwrap().layers(), vec![2, 4, 6]);
        assert_eq!(toy_schedule(4).resolve(4).unwrap().layers(), vec![1, 2, 3]);
        assert_eq!(toy_schedule(1).resolve(1).unwrap().layers(), vec![0]);
        assert!((toy_schedule(8).resolve(8).unwrap().final_keep_ratio() - 0.343).abs() < 1e-12);
        assert_eq!(profile_schedule(32).resolve(32).unwrap().len(), 10);
        assert_eq!(profile_schedule(30).resolve(30).unwrap().len(), 9);
        let s = toy_schedule(8).resolve(8).unwrap();
        assert_eq!(schedule_config_of(&s).resolve(8).unwrap(), s);
    }

    #[test]
    fn kv_policy_specs() {
        let base = KVCachePolicy::none();
        let p = parse_kv_policy("h2o:0.4", &base).unwrap();
        assert_eq!((p.kind, p.budget_fraction), (PolicyKind::HeavyHitter, 0.4));
        assert_eq!(parse_kv_policy("none", &p).unwrap().kind, PolicyKind::None);
        assert!(parse_kv_policy("lru:0.5", &base).is_err());
        assert!(parse_kv_policy("local:x", &base).is_err());
        assert!(parse_kv_policy("local:1.5", &base).is_err());
    }

    #[test]
    fn resolve_rejects_bad_blocks() {
        for src in [
            "{\"io\": {\"holdout_fraction\": 1.0}}",
            "{\"flops\": {\"lengths\": []}}",
            "{\"train\": {\"batch_size\": 0}}",
            "{\"attribute\": {\"threshold_frac\": 0}}",
        ] {
            assert!(RunConfig::parse(src, "t").unwrap().resolve().is_err(), "{src}");
        }
    }

    #[test]
    fn file_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"io": {"corpus": "c.txt", "input": "/abs/p.txt"}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.corpus_path().unwrap(), dir.path().join("c.txt"));
        assert_eq!(cfg.input_path().unwrap(), Path::new("/abs/p.txt"));
    }
}
