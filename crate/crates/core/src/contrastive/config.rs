use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedder::EncoderConfig;
use crate::image::AugmentationConfig;

/// One training stage: granularity level and number of optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub granularity: u32,
    pub steps: usize,
}

/// Ordered stages with non-decreasing granularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
}

impl StageSchedule {
    pub fn new(stages: impl IntoIterator<Item = (u32, usize)>) -> Self {
        Self {
            stages: stages
                .into_iter()
                .map(|(granularity, steps)| Stage { granularity, steps })
                .collect(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.stages.is_empty() {
            return Err("schedule must contain at least one stage".into());
        }
        if self.stages.windows(2).any(|w| w[1].granularity < w[0].granularity) {
            return Err("schedule granularities must be non-decreasing".into());
        }
        Ok(())
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::new([(0, 1000), (2, 1000), (4, 1000)])
    }
}

impl fmt::Display for StageSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}:{}", s.granularity, s.steps))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `n:steps[,n:steps...]`, e.g. `0:1000,2:1000,4:1000`.
impl FromStr for StageSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut stages = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (n, steps) = part
                .split_once(':')
                .ok_or_else(|| format!("stage {part:?} is not of the form n:steps"))?;
            let granularity = n
                .trim()
                .parse()
                .map_err(|_| format!("bad granularity in {part:?}"))?;
            let steps = steps
                .trim()
                .parse()
                .map_err(|_| format!("bad step count in {part:?}"))?;
            stages.push(Stage { granularity, steps });
        }
        let schedule = Self { stages };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Every hyperparameter of a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub temperature: f64,
    pub prune_threshold: f64,
    pub bank_capacity: usize,
    /// EMA coefficient for the key twin.
    pub momentum: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub batch_size: usize,
    pub schedule: StageSchedule,
    pub seed: u64,
    /// When false every anchor takes the unpruned branch.
    pub prune_enabled: bool,
    /// Empty the memory bank at each stage boundary.
    pub reset_bank_per_stage: bool,
    /// Recorded for provenance; the loop itself is single-writer.
    pub workers: usize,
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            prune_threshold: 0.8,
            bank_capacity: 4096,
            momentum: 0.99,
            // 0.03 at batch 256, scaled linearly to batch 32
            learning_rate: 0.00375,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            batch_size: 32,
            schedule: StageSchedule::default(),
            seed: 0,
            prune_enabled: true,
            reset_bank_per_stage: false,
            workers: 1,
            encoder: EncoderConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Collects every violated constraint instead of stopping at the first.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.temperature > 0.0) {
            errs.push(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.prune_threshold > -1.0 && self.prune_threshold <= 1.0) {
            errs.push(format!("prune_threshold must lie in (-1, 1], got {}", self.prune_threshold));
        }
        if self.bank_capacity == 0 {
            errs.push("bank_capacity must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            errs.push(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if !(self.learning_rate >= 0.0) {
            errs.push("learning_rate must be >= 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            errs.push("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            errs.push("sgd_momentum must lie in [0, 1)".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if self.workers == 0 {
            errs.push("workers must be >= 1".into());
        }
        if let Err(e) = self.schedule.validate() {
            errs.push(e);
        }
        if let Err(e) = self.encoder.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.augmentation.validate() {
            errs.push(e);
        }
        errs
    }

    pub fn validate(&self) -> Result<(), String> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}
