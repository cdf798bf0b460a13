use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Anchor = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub base_channels: usize,
    pub depth_multiple: f64,
    pub num_scales: usize,
    /// Per scale, finest first: `(w, h)` in input pixels.
    pub anchors: Vec<Vec<Anchor>>,
    pub input_size: usize,
    pub asaf_enabled: bool,
    pub transformer_heads: usize,
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let mut cfg = DetectorConfig {
            base_channels: 16,
            depth_multiple: 0.33,
            num_scales: 4,
            anchors: Vec::new(),
            input_size: 320,
            asaf_enabled: true,
            transformer_heads: 4,
            num_classes: 1,
        };
        cfg.anchors = default_anchors(&cfg.strides());
        cfg
    }
}

/// Three square-ish anchors per scale spanning about one octave around `2 * stride`.
pub fn default_anchors(strides: &[usize]) -> Vec<Vec<Anchor>> {
    strides
        .iter()
        .map(|&s| {
            let s = s as f64;
            vec![(1.25 * s, 1.5 * s), (2.0 * s, 2.0 * s), (3.5 * s, 3.0 * s)]
        })
        .collect()
}

impl DetectorConfig {
    /// The plain three-scale graph without attention fusion.
    pub fn baseline() -> Self {
        let mut cfg = DetectorConfig {
            num_scales: 3,
            asaf_enabled: false,
            ..DetectorConfig::default()
        };
        cfg.anchors = default_anchors(&cfg.strides());
        cfg
    }

    pub fn strides(&self) -> Vec<usize> {
        match self.num_scales {
            4 => vec![4, 8, 16, 32],
            _ => vec![8, 16, 32],
        }
    }

    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn repeats(&self, n: usize) -> usize {
        ((n as f64 * self.depth_multiple).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales != 3 && self.num_scales != 4 {
            return Err(Error::Config(format!("num_scales must be 3 or 4, got {}", self.num_scales)));
        }
        if self.asaf_enabled && self.num_scales != 4 {
            return Err(Error::Config("attention fusion requires the four-scale head".into()));
        }
        if self.anchors.len() != self.num_scales || self.anchors.iter().any(|a| a.is_empty()) {
            return Err(Error::Config(format!(
                "need a non-empty anchor list for each of {} scales",
                self.num_scales
            )));
        }
        let na = self.anchors[0].len();
        if self.anchors.iter().any(|a| a.len() != na) {
            return Err(Error::Config("every scale needs the same anchor count".into()));
        }
        if self
            .anchors
            .iter()
            .flatten()
            .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
        {
            return Err(Error::Config("anchor sides must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config("base_channels must be even and at least 2".into()));
        }
        if self.transformer_heads == 0 || (8 * self.base_channels) % self.transformer_heads != 0 {
            return Err(Error::Config(format!(
                "transformer width {} not divisible by {} heads",
                8 * self.base_channels,
                self.transformer_heads
            )));
        }
        if !(self.depth_multiple > 0.0) || self.num_classes == 0 {
            return Err(Error::Config("depth_multiple and num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn anchors_per_scale(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }
}
