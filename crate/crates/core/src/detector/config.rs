use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcblock::DEFAULT_RATIO;

/// Output strides of the three prediction scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Input sides must be a multiple of the coarsest stride.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelSize {
    S,
    M,
    L,
}

/// Depth multiple, width multiple and channel cap for one model size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaling {
    pub depth: f64,
    pub width: f64,
    pub max_channels: usize,
}

impl ModelSize {
    pub const ALL: [ModelSize; 3] = [ModelSize::S, ModelSize::M, ModelSize::L];

    pub fn scaling(self) -> Scaling {
        let (depth, width, max_channels) = match self {
            ModelSize::S => (0.33, 0.50, 1024),
            ModelSize::M => (0.67, 0.75, 768),
            ModelSize::L => (1.00, 1.00, 512),
        };
        Scaling {
            depth,
            width,
            max_channels,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelSize::S => "Small",
            ModelSize::M => "Medium",
            ModelSize::L => "Large",
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelSize::S => "S",
            ModelSize::M => "M",
            ModelSize::L => "L",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "small" => Ok(ModelSize::S),
            "m" | "medium" => Ok(ModelSize::M),
            "l" | "large" => Ok(ModelSize::L),
            other => Err(Error::Config(format!("unknown model size `{other}` (expected S, M or L)"))),
        }
    }
}

impl Scaling {
    /// Channel width after capping and width scaling, rounded up to a multiple of 8.
    pub fn channels(&self, base: usize) -> usize {
        let scaled = base.min(self.max_channels) as f64 * self.width;
        ((scaled / 8.0).ceil() as usize) * 8
    }

    pub fn repeats(&self, base: usize) -> usize {
        ((base as f64 * self.depth).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub size: ModelSize,
    pub gc_enabled: bool,
    pub gc_ratio: usize,
    pub num_classes: usize,
    /// DFL bins per box side.
    pub reg_max: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            size: ModelSize::S,
            gc_enabled: false,
            gc_ratio: DEFAULT_RATIO,
            num_classes: 9,
            reg_max: 16,
        }
    }
}

impl DetectorConfig {
    pub fn new(size: ModelSize, gc_enabled: bool) -> Self {
        Self {
            size,
            gc_enabled,
            ..Self::default()
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.reg_max < 2 {
            return Err(Error::Config(format!("reg_max must be at least 2 (got {})", self.reg_max)));
        }
        if self.gc_ratio == 0 {
            return Err(Error::Config("gc_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_arithmetic() {
        let l = ModelSize::L.scaling();
        assert_eq!([64, 128, 256, 512, 1024].map(|c| l.channels(c)), [64, 128, 256, 512, 512]);
        let s = ModelSize::S.scaling();
        assert_eq!([64, 128, 256, 512, 1024].map(|c| s.channels(c)), [32, 64, 128, 256, 512]);
        let m = ModelSize::M.scaling();
        assert_eq!([64, 128, 256, 512, 1024].map(|c| m.channels(c)), [48, 96, 192, 384, 576]);
        assert_eq!([3, 6].map(|n| s.repeats(n)), [1, 2]);
        assert_eq!([3, 6].map(|n| m.repeats(n)), [2, 4]);
        assert_eq!([3, 6].map(|n| l.repeats(n)), [3, 6]);
    }

    #[test]
    fn size_parsing() {
        assert_eq!("large".parse::<ModelSize>().unwrap(), ModelSize::L);
        assert_eq!("s".parse::<ModelSize>().unwrap(), ModelSize::S);
        assert!(matches!("XL".parse::<ModelSize>(), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        let mut c = DetectorConfig::default();
        c.reg_max = 1;
        assert!(c.validate().is_err());
        c = DetectorConfig::default().with_classes(0);
        assert!(c.validate().is_err());
    }
}
