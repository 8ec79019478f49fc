use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether teacher and student read conditions through the same encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Shared,
    Unshared,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Shared => "shared",
            Scenario::Unshared => "unshared",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda_outkd: f64,
    pub lambda_featkd: f64,
    pub scenario: Scenario,
    /// Feature maps compared by the feature loss (block outputs or layer names).
    pub feature_layers: Vec<String>,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub checkpoint_interval: u64,
    /// Rows in the fixed validation batch.
    pub eval_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda_outkd: 1.0,
            lambda_featkd: 0.1,
            scenario: Scenario::Shared,
            feature_layers: vec!["blocks.0".into(), "blocks.1".into()],
            steps: 600,
            lr: 5e-3,
            batch_size: 32,
            grad_accum: 2,
            checkpoint_interval: 1000,
            eval_size: 512,
        }
    }
}

impl DistillConfig {
    pub fn unshared() -> Self {
        DistillConfig {
            scenario: Scenario::Unshared,
            lambda_featkd: 0.0,
            feature_layers: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_outkd", self.lambda_outkd), ("lambda_featkd", self.lambda_featkd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.scenario == Scenario::Unshared && self.lambda_featkd > 0.0 {
            return Err(Error::Config(format!(
                "lambda_featkd = {} with unshared encoders: when teacher and student use different \
                 condition encoders only the output distillation loss may be used, so lambda_featkd must be 0",
                self.lambda_featkd
            )));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.eval_size == 0 {
            return Err(Error::Config("batch_size, grad_accum and eval_size must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshared_rejects_feature_loss() {
        let mut c = DistillConfig::unshared();
        assert!(c.validate().is_ok());
        c.lambda_featkd = 0.1;
        let err = c.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("only the output distillation loss"));
    }

    #[test]
    fn negative_lambda_rejected() {
        let c = DistillConfig {
            lambda_outkd: -1.0,
            ..DistillConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
