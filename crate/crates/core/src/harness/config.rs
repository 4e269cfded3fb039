use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderSpec, LrSchedule};
use crate::error::{PcpError, Result};
use crate::harness::dataset::DataSource;
use crate::objective::LossParams;
use crate::purification::PurifyParams;

/// Which supervision the training loop builds each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Shrinking cluster count, purification, mixed instance/cluster loss.
    Pcp,
    /// Constant cluster count, no purification, cluster loss on everything.
    DcBaseline,
    /// Instance discrimination over all samples.
    IrBaseline,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Pcp => "pcp",
            Mode::DcBaseline => "dc-baseline",
            Mode::IrBaseline => "ir-baseline",
        })
    }
}

impl FromStr for Mode {
    type Err = PcpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcp" => Ok(Mode::Pcp),
            "dc-baseline" | "dc" => Ok(Mode::DcBaseline),
            "ir-baseline" | "ir" => Ok(Mode::IrBaseline),
            other => Err(PcpError::ConfigError(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            output_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn spec(&self, input_dim: usize) -> EncoderSpec {
        EncoderSpec::new(input_dim, self.hidden_dims.clone(), self.output_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub total_epochs: usize,
    pub floor_clusters: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_epochs: 200,
            floor_clusters: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Bank row inertia in the momentum update.
    pub bank_momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 128,
            bank_momentum: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub knn_tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: 200,
            knn_tau: 0.1,
        }
    }
}

/// Everything a training run needs. Missing JSON fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DataSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dataset: Option<DataSource>,
    pub encoder: EncoderConfig,
    pub schedule: ScheduleConfig,
    pub purify: PurifyParams,
    pub loss: LossParams,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    /// Mix the auxiliary instance loss in during the first round.
    pub warmup: bool,
    pub rounds: usize,
    pub mode: Mode,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            test_dataset: None,
            encoder: EncoderConfig::default(),
            schedule: ScheduleConfig::default(),
            purify: PurifyParams::default(),
            loss: LossParams::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            warmup: true,
            rounds: 1,
            mode: Mode::Pcp,
            seed: 0,
            output_dir: None,
        }
    }
}

/// Scalar fields a sweep may vary.
pub const SWEEP_AXES: &[&str] = &["gamma", "floor_clusters", "alpha", "k", "tau"];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PcpError::ConfigError(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PcpError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks independent of the dataset size.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PcpError::ConfigError(m));
        if self.schedule.total_epochs == 0 {
            return fail("schedule.total_epochs must be >= 1".into());
        }
        if self.schedule.floor_clusters == 0 {
            return fail("schedule.floor_clusters must be >= 1".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be >= 1".into());
        }
        if self.optim.batch_size == 0 {
            return fail("optim.batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.optim.bank_momentum) {
            return fail(format!("optim.bank_momentum {} not in [0, 1]", self.optim.bank_momentum));
        }
        if !(self.optim.lr.lr0 > 0.0) {
            return fail(format!("optim.lr.lr0 {} must be positive", self.optim.lr.lr0));
        }
        if self.eval.knn_k == 0 || !(self.eval.knn_tau > 0.0) {
            return fail("eval.knn_k and eval.knn_tau must be positive".into());
        }
        if self.encoder.output_dim == 0 || self.encoder.hidden_dims.contains(&0) {
            return fail("encoder dimensions must be positive".into());
        }
        self.purify.validate()?;
        self.loss.validate()
    }

    /// Set one sweepable scalar from its textual value.
    pub fn set_axis(&mut self, axis: &str, value: &str) -> Result<()> {
        let bad = || PcpError::ConfigError(format!("invalid value {value:?} for axis {axis}"));
        let float = || value.parse::<f64>().map_err(|_| bad());
        let int = || value.parse::<usize>().map_err(|_| bad());
        match axis {
            "gamma" => self.purify.gamma = float()?,
            "alpha" => self.purify.alpha = float()?,
            "tau" => self.loss.tau = float()?,
            "floor_clusters" => self.schedule.floor_clusters = int()?,
            "k" => self.eval.knn_k = int()?,
            other => {
                return Err(PcpError::ConfigError(format!(
                    "unknown sweep axis {other:?}; expected one of {SWEEP_AXES:?}"
                )))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.optim.lr.lr0, 0.03);
        assert_eq!(c.optim.momentum, 0.9);
        assert_eq!(c.optim.weight_decay, 0.0005);
        assert_eq!(c.optim.batch_size, 128);
        assert_eq!(c.loss.tau, 0.1);
        assert_eq!(c.encoder.output_dim, 128);
        assert_eq!(c.schedule.total_epochs, 200);
        assert_eq!(c.eval.knn_k, 200);
        assert_eq!(c.purify.window, 15);
        assert_eq!((c.purify.theta_low, c.purify.theta_high), (0.0, 3.0));
        assert_eq!(c.purify.activation_epoch, 100);
        assert_eq!(c.purify.gamma, 0.5);
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig {
            mode: Mode::DcBaseline,
            seed: 42,
            ..Default::default()
        };
        c.loss.tau = 0.07;
        c.purify.alpha = 0.123456789;
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let partial = RunConfig::from_json(r#"{"mode":"ir-baseline","rounds":2}"#).unwrap();
        assert_eq!(partial.mode, Mode::IrBaseline);
        assert_eq!(partial.rounds, 2);
        assert_eq!(partial.loss, LossParams::default());
    }

    #[test]
    fn axis_errors() {
        let mut c = RunConfig::default();
        c.set_axis("gamma", "0.7").unwrap();
        assert_eq!(c.purify.gamma, 0.7);
        assert!(matches!(c.set_axis("beta", "1"), Err(PcpError::ConfigError(_))));
        assert!(matches!(c.set_axis("floor_clusters", "x"), Err(PcpError::ConfigError(_))));
    }
}
