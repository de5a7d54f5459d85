use crate::attention::SvnConfig;
use crate::error::{config_err, Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

/// Encoder-only (A), single-scale SVN (B) or multi-scale SVN (C).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    A,
    B,
    C,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::A, ModelVariant::B, ModelVariant::C];
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelVariant::A => "A",
            ModelVariant::B => "B",
            ModelVariant::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(ModelVariant::A),
            "B" | "b" => Ok(ModelVariant::B),
            "C" | "c" => Ok(ModelVariant::C),
            other => Err(Error::Config(format!("unknown model variant {other:?}; expected A, B or C"))),
        }
    }
}

/// Layer-graph description of a network: one downsampling unit then a run
/// of factorized blocks per stage, optional SVN, then the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Dilation of each depthwise kernel in the last stage; earlier stages use 1.
    pub stage3_dilations: Vec<usize>,
    /// Width of the 3x3 conv in front of the 1x1 classifier.
    pub classifier_channels: usize,
    pub num_classes: usize,
    pub svn: Option<SvnConfig>,
}

pub const DEFAULT_DILATIONS: [usize; 8] = [1, 2, 5, 9, 2, 5, 9, 17];

impl NetworkSpec {
    /// Full-size model: widths 32/64/128, 3/2/8 blocks, classifier 128→32.
    pub fn full_size(variant: ModelVariant, num_classes: usize) -> Self {
        let svn = match variant {
            ModelVariant::A => None,
            ModelVariant::B => Some(SvnConfig::single_scale(32)),
            ModelVariant::C => Some(SvnConfig::multi_scale(32)),
        };
        Self {
            input_channels: 3,
            stage_channels: vec![32, 64, 128],
            blocks_per_stage: vec![3, 2, 8],
            stage3_dilations: DEFAULT_DILATIONS.to_vec(),
            classifier_channels: 32,
            num_classes,
            svn,
        }
    }

    /// Narrow model used for desk-scale training: the same topology at a
    /// quarter of the widths.
    pub fn toy(variant: ModelVariant, num_classes: usize) -> Self {
        let svn = match variant {
            ModelVariant::A => None,
            ModelVariant::B => Some(SvnConfig::single_scale(8)),
            ModelVariant::C => Some(SvnConfig::multi_scale(8)),
        };
        Self {
            input_channels: 3,
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: vec![3, 2, 8],
            stage3_dilations: DEFAULT_DILATIONS.to_vec(),
            classifier_channels: 16,
            num_classes,
            svn,
        }
    }

    pub fn variant(&self) -> ModelVariant {
        match &self.svn {
            None => ModelVariant::A,
            Some(c) if c.scales.len() == 1 => ModelVariant::B,
            Some(_) => ModelVariant::C,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Total spatial reduction of the encoder.
    pub fn output_stride(&self) -> usize {
        1 << self.stages()
    }

    pub fn encoder_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.input_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.num_classes == 0 || self.classifier_channels == 0 {
            return config_err("channel and class counts must be positive");
        }
        if self.stage_channels.is_empty() {
            return config_err("at least one stage is required");
        }
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return config_err(format!(
                "{} stage widths but {} block counts",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            ));
        }
        let last = *self.blocks_per_stage.last().unwrap();
        if self.stage3_dilations.len() != last {
            return config_err(format!(
                "{} dilations for {last} last-stage blocks",
                self.stage3_dilations.len()
            ));
        }
        if self.stage3_dilations.contains(&0) {
            return config_err("dilations must be at least 1");
        }
        let mut prev = self.input_channels;
        for &c in &self.stage_channels {
            if c <= prev {
                return config_err(format!("downsampling {prev}->{c} must widen the channels"));
            }
            if c % 2 != 0 {
                return config_err(format!("stage width {c} must be even for the split blocks"));
            }
            prev = c;
        }
        if let Some(svn) = &self.svn {
            svn.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
