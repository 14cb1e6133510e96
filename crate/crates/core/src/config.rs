use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pyramid strides relative to the input frame.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Channel count of the one-hot object representation (background excluded).
pub const MAX_OBJECTS: usize = 15;

/// Classes predicted per pixel: background plus [`MAX_OBJECTS`].
pub const NUM_CLASSES: usize = MAX_OBJECTS + 1;

/// Deformable attention hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvaConfig {
    pub heads: usize,
    /// Sampling offsets per head and per scale.
    pub n_k: usize,
    /// Semantic-offset window radius at the stride-8 level, in that level's
    /// pixels.
    pub sigma_base: f64,
    pub embed_dim: usize,
    pub strides: [usize; 3],
    /// Bound offsets through `tanh` (window for semantic offsets, level extent
    /// for flow offsets). When off, raw head outputs are used as offsets.
    pub offset_norm: bool,
}

impl AdvaConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Window radius of level `level`, in pixels of the stride-8 level. It
    /// grows in proportion to the level's stride.
    pub fn sigma(&self, level: usize) -> f64 {
        self.sigma_base * self.strides[level] as f64 / self.strides[0] as f64
    }

    /// The same radius in pixels of level `level` itself, the unit offsets
    /// are applied in.
    pub fn window(&self, level: usize) -> f64 {
        self.sigma(level) * self.strides[0] as f64 / self.strides[level] as f64
    }

    /// Raw offset-head width: heads × scales × n_k × 2.
    pub fn offset_width(&self) -> usize {
        self.heads * self.strides.len() * self.n_k * 2
    }

    /// Flat index of an offset component; `axis` 0 is row, 1 is column.
    pub fn offset_index(&self, head: usize, scale: usize, k: usize, axis: usize) -> usize {
        ((head * self.strides.len() + scale) * self.n_k + k) * 2 + axis
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::input(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.n_k == 0 {
            return Err(Error::input("n_k must be at least 1"));
        }
        if self.sigma_base.is_nan() || self.sigma_base <= 0.0 {
            return Err(Error::input("sigma_base must be positive"));
        }
        Ok(())
    }
}

/// Full network configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attn: AdvaConfig,
    /// Stem then four stride-2 stages of the image backbone.
    pub backbone_widths: [usize; 5],
    pub mask_widths: [usize; 5],
    pub flow_width: usize,
    pub ffn_dim: usize,
    pub decoder_dim: usize,
    pub gn_groups: usize,
    /// Padded frame size `[H, W]` at which positional grids are stored.
    pub frame_size: [usize; 2],
    /// Add the per-level scale embedding.
    pub scale_embedding: bool,
}

impl ModelConfig {
    /// Desk-scale base configuration (C = 128).
    pub fn base() -> Self {
        Self {
            attn: AdvaConfig {
                heads: 8,
                n_k: 4,
                sigma_base: 4.0,
                embed_dim: 128,
                strides: STRIDES,
                offset_norm: true,
            },
            backbone_widths: [16, 32, 64, 128, 256],
            mask_widths: [16, 16, 32, 32, 64],
            flow_width: 32,
            ffn_dim: 256,
            decoder_dim: 64,
            gn_groups: 8,
            frame_size: [64, 64],
            scale_embedding: true,
        }
    }

    /// Reduced configuration used for fast training runs on a single core.
    pub fn small() -> Self {
        Self {
            attn: AdvaConfig {
                heads: 4,
                n_k: 4,
                sigma_base: 4.0,
                embed_dim: 32,
                strides: STRIDES,
                offset_norm: true,
            },
            backbone_widths: [8, 16, 24, 32, 48],
            mask_widths: [8, 8, 16, 16, 32],
            flow_width: 16,
            ffn_dim: 64,
            decoder_dim: 32,
            gn_groups: 8,
            frame_size: [64, 64],
            scale_embedding: true,
        }
    }

    /// Smallest configuration, for whole-model gradient checks.
    pub fn micro() -> Self {
        Self {
            attn: AdvaConfig {
                heads: 2,
                n_k: 2,
                sigma_base: 2.0,
                embed_dim: 8,
                strides: STRIDES,
                offset_norm: true,
            },
            backbone_widths: [4, 4, 6, 8, 8],
            mask_widths: [4, 4, 4, 6, 6],
            flow_width: 4,
            ffn_dim: 8,
            decoder_dim: 16,
            gn_groups: 8,
            frame_size: [32, 32],
            scale_embedding: true,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.attn.embed_dim
    }

    /// Level sizes for a padded frame.
    pub fn level_sizes(&self, h: usize, w: usize) -> [(usize, usize); 3] {
        level_sizes(h, w)
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        if self.attn.strides != STRIDES {
            return Err(Error::input("pyramid strides are fixed at 8/16/32"));
        }
        if self.attn.embed_dim < 2 {
            return Err(Error::input("embed_dim must be at least 2 to carry flow"));
        }
        if self.gn_groups == 0 || !self.decoder_dim.is_multiple_of(self.gn_groups) {
            return Err(Error::input("decoder_dim must be a multiple of gn_groups"));
        }
        let [h, w] = self.frame_size;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::input("frame_size must be a positive multiple of 32"));
        }
        if self.backbone_widths.iter().chain(&self.mask_widths).any(|&c| c == 0) {
            return Err(Error::input("encoder widths must be positive"));
        }
        Ok(())
    }
}

pub fn level_sizes(h: usize, w: usize) -> [(usize, usize); 3] {
    STRIDES.map(|s| (h.div_ceil(s), w.div_ceil(s)))
}

/// Inference-time switches over a trained network. Turning a branch off
/// zeroes its contribution; nothing is retrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gates {
    pub flow_offsets: bool,
    pub qk_flow: bool,
    pub long_term: bool,
    pub multi_scale: bool,
}

impl Default for Gates {
    fn default() -> Self {
        Self {
            flow_offsets: true,
            qk_flow: true,
            long_term: true,
            multi_scale: true,
        }
    }
}

impl Gates {
    /// Apply a `--disable` switch name.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        match name {
            "flow-offsets" => self.flow_offsets = false,
            "qk-flow" => self.qk_flow = false,
            "long-term" => self.long_term = false,
            "multi-scale" => self.multi_scale = false,
            other => return Err(Error::usage(format!("unknown ablation switch {other:?}"))),
        }
        Ok(())
    }
}
