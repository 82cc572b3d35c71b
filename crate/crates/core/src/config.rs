//! Pipeline hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initialization scheme for the two-component EM fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmInit {
    /// Means at the 25th/75th percentiles, both sigmas at the overall std, equal weights.
    #[default]
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
    /// Lower bound on each component variance.
    pub var_floor: f64,
    pub init: EmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            var_floor: 1e-8,
            init: EmInit::Percentile,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Argument("em.max_iters must be >= 1".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Argument("em.tol must be > 0".into()));
        }
        if self.var_floor.is_nan() || self.var_floor <= 0.0 {
            return Err(Error::Argument("em.var_floor must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of top seeds averaged into the initial seed.
    #[serde(rename = "N")]
    pub initial_seeds: usize,
    /// Number of potential seeds kept per token.
    #[serde(rename = "M")]
    pub potential_seeds: usize,
    /// Fallback threshold factor: `t = mean + gamma * std`.
    pub gamma: f64,
    /// Multiplier in the mixture separation test.
    pub sep_factor: f64,
    pub nms_conf: f64,
    pub nms_iou: f64,
    /// Weight the component densities by mixture weight when solving the crossover.
    pub weighted_crossover: bool,
    /// Skip function words when summing phrase heatmaps.
    pub drop_stop_words: bool,
    pub em: EmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            initial_seeds: 3,
            potential_seeds: 10,
            gamma: 1.75,
            sep_factor: 1.5,
            nms_conf: 0.2,
            nms_iou: 0.5,
            weighted_crossover: false,
            drop_stop_words: false,
            em: EmConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_seeds < 1 {
            return Err(Error::Argument("N must be >= 1".into()));
        }
        if self.potential_seeds < self.initial_seeds {
            return Err(Error::Argument("M must be >= N".into()));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return Err(Error::Argument("gamma must be > 0".into()));
        }
        if self.sep_factor.is_nan() || self.sep_factor < 0.0 {
            return Err(Error::Argument("sep_factor must be >= 0".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Argument("nms_iou must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_conf) {
            return Err(Error::Argument("nms_conf must lie in [0, 1]".into()));
        }
        self.em.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.initial_seeds, 3);
        assert_eq!(cfg.potential_seeds, 10);
        assert_eq!(cfg.gamma, 1.75);
        assert_eq!(cfg.sep_factor, 1.5);
        assert_eq!(cfg.nms_conf, 0.2);
        assert_eq!(cfg.nms_iou, 0.5);
        assert!(!cfg.weighted_crossover);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"N": 1, "gamma": 2.0, "em": {"max_iters": 5}}"#)
            .unwrap();
        assert_eq!(cfg.initial_seeds, 1);
        assert_eq!(cfg.potential_seeds, 10);
        assert_eq!(cfg.gamma, 2.0);
        assert_eq!(cfg.em.max_iters, 5);
        assert_eq!(cfg.em.tol, 1e-8);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PipelineConfig::from_json(r#"{"N": 4, "M": 3}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"nms_iou": 1.0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"gamma": 0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"em": {"tol": 0}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
