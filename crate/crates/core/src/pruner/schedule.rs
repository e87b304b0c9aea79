use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_SINK_COUNT: usize = 4;
pub const DEFAULT_LOCAL_FRACTION: f64 = 0.10;
pub const DEFAULT_STAGES: usize = 10;
pub const DEFAULT_RATIO: f64 = 0.9;
pub const DEFAULT_START_LAYER: usize = 4;
pub const DEFAULT_LAYER_STEP: usize = 3;

// Absorbs representation error in ratio * n before taking the ceiling.
const CEIL_SLACK: f64 = 1e-9;

/// One pruning point: scorer runs on the input of block `layer`, and
/// `keep_ratio` of the original tokens survive from that block on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub layer: usize,
    pub keep_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    pub stages: Vec<Stage>,
    pub sink_count: usize,
    pub local_fraction: f64,
}

/// `max(ceil(ratio * n), protected)`, capped at `n`.
pub fn keep_count(ratio: f64, n: usize, protected: usize) -> usize {
    let k = (ratio * n as f64 - CEIL_SLACK).ceil().max(0.0) as usize;
    k.max(protected).min(n)
}

impl PruneSchedule {
    pub fn new(stages: Vec<Stage>, sink_count: usize, local_fraction: f64) -> Result<Self> {
        let s = Self {
            stages,
            sink_count,
            local_fraction,
        };
        s.validate()?;
        Ok(s)
    }

    /// Geometric schedule: stage `i` at `start_layer + i * layer_step` with
    /// cumulative keep ratio `r^(i+1)`.
    pub fn build(num_stages: usize, r: f64, start_layer: usize, layer_step: usize, n_layers: usize) -> Result<Self> {
        if num_stages == 0 {
            return Err(Error::Schedule("at least one stage is required".into()));
        }
        if layer_step == 0 && num_stages > 1 {
            return Err(Error::Schedule("layer_step must be >= 1 for multiple stages".into()));
        }
        let last = start_layer + (num_stages - 1) * layer_step;
        if last >= n_layers {
            let feasible = if start_layer < n_layers {
                (n_layers - 1 - start_layer) / layer_step.max(1) + 1
            } else {
                0
            };
            return Err(Error::Schedule(format!(
                "stage {num_stages} would sit at layer {last} but the model has {n_layers} layers; \
                 largest feasible stage count is {feasible}"
            )));
        }
        let stages = (0..num_stages)
            .map(|i| Stage {
                layer: start_layer + i * layer_step,
                keep_ratio: r.powi(i as i32 + 1),
            })
            .collect();
        Self::new(stages, DEFAULT_SINK_COUNT, DEFAULT_LOCAL_FRACTION)
    }

    /// Stages at the given layers that keep every token.
    pub fn identity(layers: &[usize]) -> Result<Self> {
        Self::new(
            layers.iter().map(|&layer| Stage { layer, keep_ratio: 1.0 }).collect(),
            DEFAULT_SINK_COUNT,
            DEFAULT_LOCAL_FRACTION,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Schedule("no stages".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].layer <= w[0].layer {
                return Err(Error::Schedule(format!(
                    "stage layers must strictly increase ({} then {})",
                    w[0].layer, w[1].layer
                )));
            }
            if w[1].keep_ratio > w[0].keep_ratio {
                return Err(Error::Schedule(format!(
                    "cumulative keep ratios must not increase ({} then {})",
                    w[0].keep_ratio, w[1].keep_ratio
                )));
            }
        }
        if let Some(s) = self
            .stages
            .iter()
            .find(|s| !(s.keep_ratio > 0.0 && s.keep_ratio <= 1.0))
        {
            return Err(Error::Schedule(format!("keep ratio {} outside (0, 1]", s.keep_ratio)));
        }
        if !(0.0..=1.0).contains(&self.local_fraction) {
            return Err(Error::Schedule(format!(
                "local_fraction {} outside [0, 1]",
                self.local_fraction
            )));
        }
        Ok(())
    }

    pub fn check_layers(&self, n_layers: usize) -> Result<()> {
        match self.stages.last() {
            Some(s) if s.layer >= n_layers => Err(Error::Schedule(format!(
                "stage at layer {} but the model has {n_layers} layers",
                s.layer
            ))),
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.layer).collect()
    }

    pub fn stage_at(&self, layer: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.layer == layer)
    }

    /// Index of the latest stage at or before `layer`.
    pub fn active_stage(&self, layer: usize) -> Option<usize> {
        self.stages.iter().rposition(|s| s.layer <= layer)
    }

    /// Cumulative keep ratio in effect for block `layer`.
    pub fn ratio_at_layer(&self, layer: usize) -> f64 {
        self.active_stage(layer).map_or(1.0, |s| self.stages[s].keep_ratio)
    }

    pub fn protected(&self, n: usize) -> Vec<usize> {
        super::protected_set(n, self.sink_count, self.local_fraction)
    }

    /// Tokens surviving stage `stage` for a sequence of `n` original tokens.
    pub fn stage_keep_count(&self, stage: usize, n: usize) -> usize {
        let protected = self.protected(n).len();
        keep_count(self.stages[stage].keep_ratio, n, protected)
    }

    /// Token count seen by each block.
    pub fn tokens_per_layer(&self, n: usize, n_layers: usize, protection_floor: bool) -> Vec<f64> {
        let protected = if protection_floor { self.protected(n).len() } else { 0 };
        (0..n_layers)
            .map(|l| match self.active_stage(l) {
                None => n as f64,
                Some(s) if protection_floor => keep_count(self.stages[s].keep_ratio, n, protected) as f64,
                Some(s) => self.stages[s].keep_ratio * n as f64,
            })
            .collect()
    }

    /// Mean over blocks of the cumulative keep ratio (no protection floor).
    pub fn mean_layer_keep(&self, n_layers: usize) -> f64 {
        (0..n_layers).map(|l| self.ratio_at_layer(l)).sum::<f64>() / n_layers as f64
    }

    pub fn final_keep_ratio(&self) -> f64 {
        self.stages.last().map_or(1.0, |s| s.keep_ratio)
    }
}

/// Serialized form inside run configs. An explicit `stages` list wins over
/// the geometric fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "S")]
    pub num_stages: usize,
    pub r: f64,
    pub start_layer: usize,
    pub layer_step: usize,
    pub sink_count: usize,
    pub local_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<Stage>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_stages: DEFAULT_STAGES,
            r: DEFAULT_RATIO,
            start_layer: DEFAULT_START_LAYER,
            layer_step: DEFAULT_LAYER_STEP,
            sink_count: DEFAULT_SINK_COUNT,
            local_fraction: DEFAULT_LOCAL_FRACTION,
            stages: None,
        }
    }
}

impl ScheduleConfig {
    pub fn resolve(&self, n_layers: usize) -> Result<PruneSchedule> {
        let mut schedule = match &self.stages {
            Some(stages) => PruneSchedule::new(stages.clone(), self.sink_count, self.local_fraction)?,
            None => PruneSchedule::build(self.num_stages, self.r, self.start_layer, self.layer_step, n_layers)?,
        };
        schedule.sink_count = self.sink_count;
        schedule.local_fraction = self.local_fraction;
        schedule.validate()?;
        schedule.check_layers(n_layers)?;
        Ok(schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_stage_schedule_ratios() {
        let s = PruneSchedule::build(10, 0.9, 4, 3, 34).unwrap();
        assert_eq!(s.len(), 10);
        assert!((s.stages[0].keep_ratio - 0.9).abs() < 1e-15);
        assert!((s.stages[1].keep_ratio - 0.81).abs() < 1e-15);
        assert!((s.final_keep_ratio() - 0.348_678_440_1).abs() < 1e-10);
        let layers: Vec<usize> = s.layers();
        assert_eq!(layers, vec![4, 7, 10, 13, 16, 19, 22, 25, 28, 31]);
    }

    #[test]
    fn single_noop_stage() {
        let s = PruneSchedule::build(1, 1.0, 0, 1, 2).unwrap();
        assert_eq!(
            s.stages,
            vec![Stage {
                layer: 0,
                keep_ratio: 1.0
            }]
        );
    }

    #[test]
    fn toy_three_stage_schedule() {
        let s = PruneSchedule::build(3, 0.9, 2, 2, 8).unwrap();
        assert_eq!(s.layers(), vec![2, 4, 6]);
        let r: Vec<f64> = s.stages.iter().map(|s| s.keep_ratio).collect();
        for (a, b) in r.iter().zip([0.9, 0.81, 0.729]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_reports_largest_feasible() {
        let err = PruneSchedule::build(10, 0.9, 4, 3, 32 - 3).unwrap_err();
        assert!(err.to_string().contains("largest feasible stage count is 9"), "{err}");
    }

    #[test]
    fn closed_form_mean_keep() {
        let s = PruneSchedule::build(10, 0.9, 4, 3, 32).unwrap();
        let closed = (4.0 + 3.0 * (1..=9).map(|k| 0.9f64.powi(k)).sum::<f64>() + 0.9f64.powi(10)) / 32.0;
        assert!((s.mean_layer_keep(32) - closed).abs() < 1e-12);
        assert!((closed - 0.6528).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_stage_lists() {
        let st = |layer, keep_ratio| Stage { layer, keep_ratio };
        assert!(PruneSchedule::new(vec![st(2, 0.9), st(2, 0.8)], 4, 0.1).is_err());
        assert!(PruneSchedule::new(vec![st(2, 0.8), st(3, 0.9)], 4, 0.1).is_err());
        assert!(PruneSchedule::new(vec![st(2, 0.0)], 4, 0.1).is_err());
        assert!(PruneSchedule::new(vec![st(2, 1.0), st(3, 1.0)], 4, 0.1).is_ok());
    }

    #[test]
    fn explicit_stage_list_wins() {
        let cfg: ScheduleConfig =
            serde_json::from_str(r#"{"S": 3, "r": 0.5, "stages": [{"layer": 1, "keep_ratio": 0.7}]}"#).unwrap();
        let s = cfg.resolve(4).unwrap();
        assert_eq!(
            s.stages,
            vec![Stage {
                layer: 1,
                keep_ratio: 0.7
            }]
        );
        assert!(serde_json::from_str::<ScheduleConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn keep_counts_use_ceiling() {
        assert_eq!(keep_count(0.9, 100, 14), 90);
        assert_eq!(keep_count(0.81, 100, 14), 81);
        assert_eq!(keep_count(0.05, 100, 14), 14);
        assert_eq!(keep_count(0.333, 10, 0), 4);
    }
}
