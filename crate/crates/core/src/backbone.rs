//! Per-scale, per-modality feature extractor producing a four-layer pyramid
//! at strides 4, 8, 16 and 32.

use seffsal_autograd::{ConvSpec, Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Cbr, Init};

/// Smallest accepted input side.
pub const MIN_INPUT: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    /// Residual stride-1 blocks after each stage's downsampling block.
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.stage_channels;
        if c.iter().any(|&v| v == 0) {
            return Err(Error::config("stage_channels", "all widths must be positive"));
        }
        if c.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("stage_channels", format!("widths {c:?} must be non-decreasing")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::Depth => "depth",
        }
    }
}

/// The four encoder features of one modality at one scale.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub layers: [Var; 4],
    pub source_scale: usize,
    pub modality: Modality,
}

/// One stride-2 halving: 3×3 kernel, padding 1.
pub fn halve(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Spatial side of pyramid layers 1–4 for an input side `n`.
pub fn pyramid_sizes(n: usize) -> [usize; 4] {
    let l1 = halve(halve(n));
    let l2 = halve(l1);
    let l3 = halve(l2);
    [l1, l2, l3, halve(l3)]
}

#[derive(Clone, Debug)]
struct Stage {
    down: Cbr,
    blocks: Vec<Cbr>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Cbr,
    stages: [Stage; 4],
}

impl Backbone {
    pub fn new(init: &mut Init<'_>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c = config.stage_channels;
        let stem = init.cbr("stem", 3, c[0], ConvSpec::strided(3, 2));
        let stages = std::array::from_fn(|j| {
            let mut s = init.scope(&format!("stage{}", j + 1));
            let cin = if j == 0 { c[0] } else { c[j - 1] };
            Stage {
                down: s.cbr("down", cin, c[j], ConvSpec::strided(3, 2)),
                blocks: (0..config.blocks_per_stage)
                    .map(|b| s.cbr(&format!("block{b}"), c[j], c[j], ConvSpec::same(3)))
                    .collect(),
            }
        });
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `image` must be `[N, 3, H, W]` with `H, W ≥ MIN_INPUT`.
    pub fn extract_features(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        image: Var,
        source_scale: usize,
        modality: Modality,
    ) -> Result<FeaturePyramid> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(Error::contract(format!("backbone expects 3 input channels, got {s}")));
        }
        if s.h < MIN_INPUT || s.w < MIN_INPUT {
            return Err(Error::contract(format!("input {s} is smaller than {MIN_INPUT}×{MIN_INPUT}")));
        }
        let mut x = self.stem.forward(g, p, image)?;
        let mut layers = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.down.forward(g, p, x)?;
            for block in &stage.blocks {
                let y = block.forward(g, p, x)?;
                x = g.add(x, y)?;
            }
            layers.push(x);
        }
        Ok(FeaturePyramid {
            layers: layers.try_into().expect("four stages"),
            source_scale,
            modality,
        })
    }
}

/// A backbone with its own parameter store.
pub struct StandaloneBackbone {
    pub params: ParamStore,
    pub backbone: Backbone,
}

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<StandaloneBackbone> {
    let mut params = ParamStore::new();
    let backbone = Backbone::new(&mut Init::new(&mut params, seed).scope("backbone"), config)?;
    Ok(StandaloneBackbone { params, backbone })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_channel_progression() {
        let bad = BackboneConfig {
            stage_channels: [16, 8, 32, 64],
            blocks_per_stage: 1,
        };
        assert!(matches!(build_backbone(&bad, 0), Err(Error::Config { .. })));
        let zero = BackboneConfig {
            stage_channels: [0, 8, 32, 64],
            blocks_per_stage: 1,
        };
        assert!(build_backbone(&zero, 0).is_err());
    }
}
