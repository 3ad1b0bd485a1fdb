// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Global attention, representation read from the class token.
    VanillaCls,
    /// Global attention, representation is the mean over patch tokens.
    VanillaMeanpool,
    /// Windowed / shifted-window attention with patch merging between stages.
    Windowed,
    /// Alternating block and grid attention, preceded by convolutional blocks.
    GridBlock,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::VanillaCls => "vanilla-cls",
            Self::VanillaMeanpool => "vanilla-meanpool",
            Self::Windowed => "windowed",
            Self::GridBlock => "gridblock",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla-cls" => Ok(Self::VanillaCls),
            "vanilla-meanpool" => Ok(Self::VanillaMeanpool),
            "windowed" => Ok(Self::Windowed),
            "gridblock" => Ok(Self::GridBlock),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

/// Hyperparameters of a toy transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of attention-MLP layers.
    pub depth: usize,
    /// Heads per attention layer (doubled after a patch merge).
    pub heads: usize,
    /// Embedding width.
    pub dim: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Patch tokens per image side.
    pub patch_grid: usize,
    /// Window side for windowed, block and grid attention.
    pub window: usize,
    /// Alternate shifted windows (windowed variant).
    pub shift: bool,
    /// Merge 2×2 patches halfway through the network (windowed variant).
    pub merge: bool,
    /// Input image side in pixels.
    pub image_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for a variant: width 32, 4 layers of 4 heads.
    pub fn new(variant: Variant, seed: u64) -> Self {
        let (patch_grid, heads) = match variant {
            Variant::VanillaCls | Variant::VanillaMeanpool => (4, 4),
            Variant::Windowed | Variant::GridBlock => (8, 2),
        };
        Self {
            variant,
            depth: 4,
            heads,
            dim: 32,
            mlp_ratio: 2,
            patch_grid,
            window: 4,
            shift: true,
            merge: true,
            image_size: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.heads == 0 || self.dim == 0 || self.patch_grid == 0 {
            return fail("depth, heads, dim and patch_grid must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.image_size % self.patch_grid != 0 {
            return fail(format!(
                "image size {} not divisible by patch grid {}",
                self.image_size, self.patch_grid
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        match self.variant {
            Variant::Windowed | Variant::GridBlock => {
                if self.window == 0 || self.patch_grid % self.window != 0 {
                    return fail(format!(
                        "patch grid {} not divisible by window {}",
                        self.patch_grid, self.window
                    ));
                }
                if self.variant == Variant::Windowed && self.merge {
                    if self.depth < 2 || self.patch_grid % 2 != 0 {
                        return fail("patch merging needs depth >= 2 and an even grid".into());
                    }
                    let g2 = self.patch_grid / 2;
                    if g2 % self.window.min(g2) != 0 {
                        return fail("merged grid not divisible by window".into());
                    }
                }
            }
            Variant::VanillaCls | Variant::VanillaMeanpool => {}
        }
        Ok(())
    }

    /// Pixels per patch side.
    pub fn patch_size(&self) -> usize {
        self.image_size / self.patch_grid
    }

    /// Flattened patch length (3 channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_size() * self.patch_size() * 3
    }

    /// Stable identifier derived from the configuration.
    pub fn model_id(&self) -> String {
        let mut id = format!(
            "{}-d{}-h{}-L{}-g{}-s{}",
            self.variant, self.dim, self.heads, self.depth, self.patch_grid, self.seed
        );
        if matches!(self.variant, Variant::Windowed | Variant::GridBlock) {
            id.push_str(&format!("-w{}", self.window));
        }
        if self.variant == Variant::Windowed && (!self.shift || !self.merge) {
            id.push_str(&format!("-sh{}-m{}", self.shift as u8, self.merge as u8));
        }
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_head_split() {
        let mut cfg = ModelConfig::new(Variant::VanillaCls, 0);
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_window_not_dividing_grid() {
        let mut cfg = ModelConfig::new(Variant::Windowed, 0);
        cfg.window = 3;
        assert!(cfg.validate().is_err());
        cfg.window = 4;
        cfg.validate().unwrap();
    }

    #[test]
    fn variant_round_trips_through_str() {
        for v in [
            Variant::VanillaCls,
            Variant::VanillaMeanpool,
            Variant::Windowed,
            Variant::GridBlock,
        ] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }
}
