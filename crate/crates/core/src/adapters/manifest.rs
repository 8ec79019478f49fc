//! Declarative list of a host network's linear layers.
//!
//! Text form, one layer per line:
//!
//! ```text
//! # name                                     kind    d_in d_out policy
//! down_blocks.0.attentions.0.transformer_blocks.0.attn1.to_q linear 320 320 styleinject
//! ```
//!
//! `kind` is `linear` or `conv1x1`; `policy` is `lora`, `styleinject` or
//! `frozen`. Blank lines and everything after `#` are ignored.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention projections of the SD-1.5 U-Net (16 transformer blocks).
pub const SD15_ATTENTION_MANIFEST: &str = include_str!("../../data/sd15_attention.manifest");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Linear,
    Conv1x1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptPolicy {
    Lora,
    StyleInject,
    Frozen,
}

impl FromStr for LayerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(LayerKind::Linear),
            "conv1x1" => Ok(LayerKind::Conv1x1),
            other => Err(format!("unknown layer kind `{other}`")),
        }
    }
}

impl FromStr for AdaptPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lora" => Ok(AdaptPolicy::Lora),
            "styleinject" => Ok(AdaptPolicy::StyleInject),
            "frozen" => Ok(AdaptPolicy::Frozen),
            other => Err(format!("unknown adapt policy `{other}`")),
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv1x1 => "conv1x1",
        })
    }
}

impl fmt::Display for AdaptPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptPolicy::Lora => "lora",
            AdaptPolicy::StyleInject => "styleinject",
            AdaptPolicy::Frozen => "frozen",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
    pub policy: AdaptPolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerManifest {
    entries: Vec<ManifestEntry>,
}

impl LayerManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name `{}`", e.name)));
            }
            if e.d_in == 0 || e.d_out == 0 {
                return Err(Error::Config(format!("layer `{}` has a zero dimension", e.name)));
            }
        }
        Ok(LayerManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: String| Error::Format(format!("manifest line {lineno}: {msg}"));
            if cols.len() != 5 {
                return Err(bad(format!("expected 5 columns, found {}", cols.len())));
            }
            let dim = |s: &str, what: &str| -> Result<usize> {
                match s.parse::<usize>() {
                    Ok(v) if v > 0 => Ok(v),
                    _ => Err(bad(format!("{what} must be a positive integer, got `{s}`"))),
                }
            };
            let entry = ManifestEntry {
                name: cols[0].to_string(),
                kind: cols[1].parse().map_err(bad)?,
                d_in: dim(cols[2], "d_in")?,
                d_out: dim(cols[3], "d_out")?,
                policy: cols[4].parse().map_err(bad)?,
            };
            if !seen.insert(entry.name.clone()) {
                return Err(bad(format!("duplicate layer name `{}`", entry.name)));
            }
            entries.push(entry);
        }
        Ok(LayerManifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn sd15_attention() -> Self {
        Self::parse(SD15_ATTENTION_MANIFEST).expect("shipped manifest parses")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# name kind d_in d_out policy\n");
        for e in &self.entries {
            out.push_str(&format!("{} {} {} {} {}\n", e.name, e.kind, e.d_in, e.d_out, e.policy));
        }
        out
    }
}
