use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which adapter family `styleinject`-policy layers receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain low-rank adapters on every adaptable layer.
    Lora,
    /// Routed multi-style adapters plus variance injection.
    StyleInject,
    /// Routed multi-style adapters only: `h* = h + Δh`.
    Dma,
    /// Variance injection with a single style (`n = 1`).
    Sta,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Lora => "lora",
            Method::StyleInject => "styleinject",
            Method::Dma => "dma",
            Method::Sta => "sta",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::Lora),
            "styleinject" => Ok(Method::StyleInject),
            "dma" => Ok(Method::Dma),
            "sta" => Ok(Method::Sta),
            other => Err(Error::Config(format!("unknown adapter method `{other}`"))),
        }
    }
}

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub method: Method,
    pub rank: usize,
    /// Number of parallel down-projections `n`.
    #[serde(default = "default_styles")]
    pub styles: usize,
    /// LoRA-style scale numerator; the update is scaled by `alpha / rank`.
    /// Defaults to `1.0 × rank`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Restrict adaptation to these layer names. `None` adapts every
    /// non-frozen layer of the manifest.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
}

fn default_styles() -> usize {
    16
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            method: Method::StyleInject,
            rank: 32,
            styles: 16,
            alpha: None,
            eps: DEFAULT_EPS,
            targets: None,
        }
    }
}

impl AdapterConfig {
    pub fn lora(rank: usize) -> Self {
        AdapterConfig {
            method: Method::Lora,
            rank,
            styles: 1,
            ..Self::default()
        }
    }

    pub fn styleinject(rank: usize, styles: usize) -> Self {
        AdapterConfig {
            method: Method::StyleInject,
            rank,
            styles,
            ..Self::default()
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_targets<S: Into<String>>(mut self, targets: impl IntoIterator<Item = S>) -> Self {
        self.targets = Some(targets.into_iter().map(Into::into).collect());
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn scale(&self) -> f64 {
        self.alpha() / self.rank as f64
    }

    /// Style count actually built; the STA ablation always uses one.
    pub fn effective_styles(&self) -> usize {
        match self.method {
            Method::Sta => 1,
            _ => self.styles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if self.styles == 0 {
            return Err(Error::Config("style count n must be at least 1".into()));
        }
        if !(self.alpha() > 0.0 && self.alpha().is_finite()) {
            return Err(Error::Config("adapter alpha must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config("variance floor eps must be positive".into()));
        }
        Ok(())
    }
}
