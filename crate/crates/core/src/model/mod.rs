//! Decoder-only transformer over packed datapoints.
//!
//! The only difference between the individual and the joint model is the
//! attention permission matrix: [`MaskMatrix::positional`] is the usual
//! causal mask, [`MaskMatrix::temporal`] lets a position see its own
//! student's earlier positions plus any other student's strictly earlier
//! interactions.

mod audit;
mod forward;
mod mask;
mod params;
mod rank;
mod train;

pub use audit::{gradient_check, leakage_audit, GradientCheck, LeakageReport};
pub use forward::{forward, Forward, ForwardInput};
pub use mask::MaskMatrix;
pub use params::{read_decoder, write_decoder, Decoder, ParamLayout};
pub use rank::{rank_of_target, top_n, RANKABLE_FROM};
pub use train::{train, LossRecord, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::{KernelError, MaskApplication};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{0}")]
    Contract(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64, trace: Vec<LossRecord> },
    #[error("bad model config: {0}")]
    Config(String),
    #[error("datapoint source failed: {0}")]
    Source(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Positional,
    Temporal,
}

impl std::str::FromStr for MaskMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "positional" => Ok(Self::Positional),
            "temporal" => Ok(Self::Temporal),
            _ => Err(format!("unknown mask mode {s:?}")),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Positional => "positional",
            Self::Temporal => "temporal",
        })
    }
}

/// Position ids fed to the learned position table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionScheme {
    /// Offset within the packed datapoint.
    Absolute,
    /// Offset within the current segment; restarts after each separator.
    SegmentRestart,
    /// No position embedding at all.
    Disabled,
}

impl std::str::FromStr for PositionScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "absolute" => Ok(Self::Absolute),
            "segment-restart" => Ok(Self::SegmentRestart),
            "disabled" => Ok(Self::Disabled),
            _ => Err(format!("unknown position scheme {s:?}")),
        }
    }
}

impl std::fmt::Display for PositionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Absolute => "absolute",
            Self::SegmentRestart => "segment-restart",
            Self::Disabled => "disabled",
        })
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub ff_width: usize,
    /// Number of tokens including PAD, SEP and OOV.
    pub vocab_size: usize,
    pub max_len: usize,
    pub mask_mode: MaskMode,
    pub mask_application: MaskApplication,
    pub positions: PositionScheme,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 128,
            d_k: 32,
            ff_width: 512,
            vocab_size: 1003,
            max_len: 65,
            mask_mode: MaskMode::Temporal,
            mask_application: MaskApplication::PreSoftmax,
            positions: PositionScheme::Absolute,
            dropout: 0.1,
            init_std: 0.02,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_heads == 0 || self.d_k == 0 || self.d_model != self.num_heads * self.d_k {
            return bad(format!(
                "d_model {} must equal num_heads {} x d_k {}",
                self.d_model, self.num_heads, self.d_k
            ));
        }
        if self.ff_width == 0 || self.max_len == 0 {
            return bad("feed-forward width and max length must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocabulary of {} tokens has no items", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!("init std {} must be finite and non-negative", self.init_std));
        }
        Ok(())
    }

    /// Plain-text `key=value` sidecar stored next to checkpoints.
    pub fn to_sidecar(&self) -> String {
        let mask_application = match self.mask_application {
            MaskApplication::PreSoftmax => "pre-softmax",
            MaskApplication::PostMultiply => "post-multiply",
        };
        format!(
            "num_layers={}\nnum_heads={}\nd_model={}\nd_k={}\nff_width={}\nvocab_size={}\nmax_len={}\n\
             mask_mode={}\nmask_application={}\npositions={}\ndropout={}\ninit_std={}\n",
            self.num_layers,
            self.num_heads,
            self.d_model,
            self.d_k,
            self.ff_width,
            self.vocab_size,
            self.max_len,
            self.mask_mode,
            mask_application,
            self.positions,
            self.dropout,
            self.init_std
        )
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let bad = |k: &str, v: &str| ModelError::Config(format!("bad sidecar value {k}={v}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("sidecar line without '=': {line}")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(k, v));
            let real = |v: &str| v.parse::<f64>().map_err(|_| bad(k, v));
            match k {
                "num_layers" => cfg.num_layers = num(v)?,
                "num_heads" => cfg.num_heads = num(v)?,
                "d_model" => cfg.d_model = num(v)?,
                "d_k" => cfg.d_k = num(v)?,
                "ff_width" => cfg.ff_width = num(v)?,
                "vocab_size" => cfg.vocab_size = num(v)?,
                "max_len" => cfg.max_len = num(v)?,
                "mask_mode" => cfg.mask_mode = v.parse().map_err(|_| bad(k, v))?,
                "mask_application" => {
                    cfg.mask_application = match v {
                        "pre-softmax" => MaskApplication::PreSoftmax,
                        "post-multiply" => MaskApplication::PostMultiply,
                        _ => return Err(bad(k, v)),
                    }
                }
                "positions" => cfg.positions = v.parse().map_err(|_| bad(k, v))?,
                "dropout" => cfg.dropout = real(v)?,
                "init_std" => cfg.init_std = real(v)?,
                _ => return Err(ModelError::Config(format!("unknown sidecar key {k}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip() {
        let cfg = DecoderConfig {
            num_layers: 3,
            mask_mode: MaskMode::Positional,
            positions: PositionScheme::SegmentRestart,
            mask_application: MaskApplication::PostMultiply,
            dropout: 0.25,
            ..DecoderConfig::default()
        };
        assert_eq!(DecoderConfig::from_sidecar(&cfg.to_sidecar()).unwrap(), cfg);
        assert!(DecoderConfig::from_sidecar("d_model=7\n").is_err());
        assert!(DecoderConfig::from_sidecar("colour=blue\n").is_err());
    }

    #[test]
    fn width_must_split_into_heads() {
        let cfg = DecoderConfig {
            d_k: 30,
            ..DecoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        DecoderConfig::default().validate().unwrap();
    }
}
