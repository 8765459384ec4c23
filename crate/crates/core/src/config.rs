//! Run configuration: one JSON document describing a full experiment.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::{view_dim, AugmentConfig};
use crate::data::{GenConfig, OutlierMode};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::model::{Architecture, EncoderConfig, ReparamMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Dimension of the sampled embedding `z`.
    pub head_dim: usize,
    pub reparam: ReparamMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden_dims: vec![256, 256], embed_dim: 64, head_dim: 32, reparam: ReparamMode::Std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: GenConfig,
    /// Fraction of pretraining samples replaced by outliers.
    pub rho: f64,
    pub outlier_mode: OutlierMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { synthetic: GenConfig::default(), rho: 0.0, outlier_mode: OutlierMode::InputAndLabels }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}.{f}");
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(field("lr"), format!("must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(field("weight_decay"), format!("must be >= 0, got {}", self.weight_decay)));
        }
        for (v, f) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field(f), format!("must be in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(field("eps"), format!("must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { min_lr: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub steps: u64,
    pub batch_size: usize,
    /// Pretraining uses the first seed; grid commands run every seed.
    pub seeds: Vec<u64>,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every_epochs: u64,
    pub eval: EvalConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            steps: 5000,
            batch_size: 128,
            seeds: vec![0],
            checkpoint_every_epochs: 0,
            eval: EvalConfig::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys. Errors name the offending path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, format!("{inner}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.seeds.first().copied().unwrap_or(0)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            encoder: EncoderConfig {
                input_dim: view_dim(self.data.synthetic.shape, &self.augment),
                hidden_dims: self.model.hidden_dims.clone(),
                embed_dim: self.model.embed_dim,
            },
            head_dim: self.model.head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.data.synthetic.validate()?;
        if !(0.0..=1.0).contains(&self.data.rho) {
            return Err(Error::config("data.rho", format!("must be in [0, 1], got {}", self.data.rho)));
        }
        self.optim.validate("optim")?;
        if !(self.schedule.min_lr >= 0.0 && self.schedule.min_lr <= self.optim.lr) {
            return Err(Error::config(
                "schedule.min_lr",
                format!("must be in [0, optim.lr], got {}", self.schedule.min_lr),
            ));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", format!("must be >= 2, got {}", self.batch_size)));
        }
        if self.batch_size > self.data.synthetic.samples {
            return Err(Error::config(
                "batch_size",
                format!("{} exceeds data.synthetic.samples = {}", self.batch_size, self.data.synthetic.samples),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        self.eval.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.architecture().encoder.input_dim, 768);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig { steps: 7, seeds: vec![3, 4], ..RunConfig::default() };
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        match RunConfig::from_json(r#"{"loss": {"tau": 0.1, "temperature": 1}}"#) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "loss.temperature"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_json(r#"{"loss": {"tau": "x"}}"#) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "loss.tau"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_name_their_field() {
        let field_of = |json: &str| match RunConfig::from_json(json) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field_of(r#"{"loss": {"tau": 0}}"#), "loss.tau");
        assert_eq!(field_of(r#"{"batch_size": 1}"#), "batch_size");
        assert_eq!(field_of(r#"{"data": {"rho": 2}}"#), "data.rho");
        assert_eq!(field_of(r#"{"schedule": {"min_lr": 1}}"#), "schedule.min_lr");
    }
}
