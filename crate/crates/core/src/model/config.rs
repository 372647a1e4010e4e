use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::BranchGeometry;
use crate::error::{Error, Result};
use crate::tensor::kernels::conv_out_len;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub blocks: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    /// Highest dilation level of the stage's attention layers.
    pub dilation_levels: u32,
}

/// Published size of a variant, in millions of parameters and GFLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub params_m: f64,
    pub flops_g: f64,
}

fn default_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    pub window: usize,
    pub head_dim: usize,
    #[serde(default = "default_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_ratio")]
    pub expansion: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Targets>,
}

pub const VARIANT_NAMES: [&str; 6] = ["femto", "pico", "nano", "tiny", "small", "base"];

/// Dilation levels of the four stages.
pub const STAGE_LEVELS: [u32; 4] = [3, 2, 1, 0];

fn published(name: &str, stem: usize, stages: [(usize, usize); 4], params_m: f64, flops_g: f64) -> VariantConfig {
    VariantConfig {
        name: name.into(),
        stem: StemConfig { blocks: 2, channels: stem },
        stages: stages
            .iter()
            .zip(STAGE_LEVELS)
            .map(|(&(blocks, channels), dilation_levels)| StageConfig { blocks, channels, dilation_levels })
            .collect(),
        window: 7,
        head_dim: 32,
        mlp_ratio: 4,
        expansion: 4,
        targets: Some(Targets { params_m, flops_g }),
    }
}

impl VariantConfig {
    pub fn tiny() -> Self {
        published("tiny", 64, [(2, 64), (3, 128), (6, 256), (2, 512)], 28.367, 5.694)
    }

    pub fn small() -> Self {
        published("small", 64, [(2, 96), (3, 192), (6, 384), (2, 768)], 62.886, 11.59)
    }

    pub fn base() -> Self {
        published("base", 64, [(4, 96), (6, 192), (14, 384), (2, 768)], 103.576, 22.316)
    }

    pub fn nano() -> Self {
        published("nano", 64, [(1, 64), (2, 128), (4, 256), (1, 512)], 16.649, 3.812)
    }

    /// Widths are multiples of 48, so heads are 24 wide.
    pub fn pico() -> Self {
        VariantConfig {
            head_dim: 24,
            ..published("pico", 48, [(1, 48), (2, 96), (4, 192), (1, 384)], 9.55, 2.217)
        }
    }

    pub fn femto() -> Self {
        published("femto", 32, [(1, 32), (2, 64), (4, 128), (1, 256)], 4.4, 1.049)
    }

    /// Reduced four-stage model for 64×64 inputs.
    pub fn micro() -> Self {
        VariantConfig {
            name: "micro".into(),
            stem: StemConfig { blocks: 2, channels: 16 },
            stages: [16, 32, 64, 128]
                .iter()
                .zip(STAGE_LEVELS)
                .map(|(&channels, dilation_levels)| StageConfig { blocks: 1, channels, dilation_levels })
                .collect(),
            window: 4,
            head_dim: 8,
            mlp_ratio: 4,
            expansion: 4,
            targets: None,
        }
    }

    /// Two-stage model small enough for finite-difference checks at 16×16.
    pub fn micro_two_stage() -> Self {
        VariantConfig {
            name: "micro2".into(),
            stem: StemConfig { blocks: 2, channels: 4 },
            stages: vec![
                StageConfig { blocks: 1, channels: 4, dilation_levels: 1 },
                StageConfig { blocks: 1, channels: 8, dilation_levels: 0 },
            ],
            window: 2,
            head_dim: 4,
            mlp_ratio: 2,
            expansion: 2,
            targets: None,
        }
    }

    /// Looks up a published variant or one of the reduced configs.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "tiny" => Self::tiny(),
            "small" => Self::small(),
            "base" => Self::base(),
            "nano" => Self::nano(),
            "pico" => Self::pico(),
            "femto" => Self::femto(),
            "micro" => Self::micro(),
            "micro2" => Self::micro_two_stage(),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?}; expected one of {}, micro, micro2",
                    VARIANT_NAMES.join(", ")
                )))
            }
        })
    }

    /// The six published variants, smallest first.
    pub fn published() -> Vec<Self> {
        VARIANT_NAMES.iter().map(|n| Self::named(n).unwrap()).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("variant config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("variant {}: {m}", self.name)));
        if self.stem.blocks != 2 {
            return bad(format!("stem must have 2 convolutions, got {}", self.stem.blocks));
        }
        if self.stem.channels == 0 || self.stages.is_empty() {
            return bad("needs a stem width and at least one stage".into());
        }
        if self.window == 0 || self.head_dim == 0 || self.mlp_ratio == 0 || self.expansion == 0 {
            return bad("window, head_dim, mlp_ratio and expansion must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 {
                return bad(format!("stage {} has no blocks", i + 1));
            }
            if s.channels % self.head_dim != 0 {
                return bad(format!("stage {} width {} is not divisible by head_dim {}", i + 1, s.channels, self.head_dim));
            }
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    /// Square map side after the stem and after each stage, or a
    /// configuration error naming the first stage whose attention branches do
    /// not fit the resolution.
    pub fn stage_sides(&self, resolution: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        let mut side = conv_out_len(resolution, 2);
        let mut sides = vec![side];
        for (i, s) in self.stages.iter().enumerate() {
            side = conv_out_len(side, 2);
            for level in 0..=s.dilation_levels {
                BranchGeometry::new(level, (side, side), self.window).map_err(|e| {
                    Error::Config(format!("resolution {resolution}: stage {} ({side}×{side}) cannot host attention: {e}", i + 1))
                })?;
            }
            sides.push(side);
        }
        Ok(sides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_sides_at_224() {
        for v in VariantConfig::published() {
            assert_eq!(v.stage_sides(224).unwrap(), vec![112, 56, 28, 14, 7]);
            let levels: Vec<u32> = v.stages.iter().map(|s| s.dilation_levels).collect();
            assert_eq!(levels, vec![3, 2, 1, 0]);
        }
    }

    #[test]
    fn table_values() {
        let t = VariantConfig::tiny();
        assert_eq!(t.stem, StemConfig { blocks: 2, channels: 64 });
        let bc: Vec<_> = t.stages.iter().map(|s| (s.blocks, s.channels)).collect();
        assert_eq!(bc, vec![(2, 64), (3, 128), (6, 256), (2, 512)]);
        assert_eq!(t.targets.unwrap().params_m, 28.367);
        assert_eq!(VariantConfig::femto().targets.unwrap(), Targets { params_m: 4.4, flops_g: 1.049 });
    }

    #[test]
    fn bad_resolution_names_the_stage() {
        let e = VariantConfig::tiny().stage_sides(200).unwrap_err().to_string();
        assert!(e.contains("stage 1"), "{e}");
        let e = VariantConfig::tiny().stage_sides(448 + 32).unwrap_err().to_string();
        assert!(e.contains("stage"), "{e}");
        assert!(VariantConfig::micro().stage_sides(64).is_ok());
        assert!(VariantConfig::micro_two_stage().stage_sides(16).is_ok());
    }

    #[test]
    fn json_roundtrip_and_unknown_names() {
        let v = VariantConfig::small();
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(VariantConfig::from_json(&text).unwrap(), v);
        assert!(matches!(VariantConfig::named("bogus"), Err(Error::Config(_))));
        assert!(VariantConfig::from_json("{\"name\": 3}").is_err());
    }
}
