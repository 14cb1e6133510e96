//! Image and mask encoders producing 3-level pyramids in a shared
//! embedding space.

mod mask;

pub use mask::{shuffle_channels, MaskEncoder, ObjectMask, Permutation};

use image::RgbImage;
use rand::Rng;

use crate::config::{level_sizes, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Frames are padded to a multiple of this before encoding.
pub const PAD_MULTIPLE: usize = 32;

/// Smallest accepted frame side before padding.
pub const MIN_FRAME_SIDE: usize = 8;

/// One pyramid level stored as `[h·w, C]` tokens in row-major pixel order.
#[derive(Clone, Copy, Debug)]
pub struct Level<'t, T> {
    pub tokens: Var<'t, T>,
    pub h: usize,
    pub w: usize,
}

impl<'t, T: Scalar> Level<'t, T> {
    pub fn from_map(map: Var<'t, T>) -> Result<Self> {
        let s = map.shape();
        if s.len() != 3 {
            return Err(Error::shape("Level::from_map", &s, &[]));
        }
        let tokens = map.reshape(&[s[0], s[1] * s[2]])?.transpose()?;
        Ok(Self { tokens, h: s[1], w: s[2] })
    }

    /// `[C, h, w]` view of the tokens.
    pub fn to_map(&self) -> Result<Var<'t, T>> {
        let c = self.channels();
        self.tokens.transpose()?.reshape(&[c, self.h, self.w])
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn with_tokens(&self, tokens: Var<'t, T>) -> Self {
        Self { tokens, ..*self }
    }
}

/// Three levels at strides 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid<'t, T> {
    pub levels: [Level<'t, T>; 3],
}

impl<'t, T: Scalar> Pyramid<'t, T> {
    pub fn from_maps(maps: [Var<'t, T>; 3]) -> Result<Self> {
        Ok(Self {
            levels: [Level::from_map(maps[0])?, Level::from_map(maps[1])?, Level::from_map(maps[2])?],
        })
    }

    pub fn sizes(&self) -> [(usize, usize); 3] {
        self.levels.map(|l| (l.h, l.w))
    }

    pub fn try_map(&self, mut f: impl FnMut(usize, &Level<'t, T>) -> Result<Var<'t, T>>) -> Result<Self> {
        let mut out = self.levels;
        for (i, l) in self.levels.iter().enumerate() {
            out[i] = l.with_tokens(f(i, l)?);
        }
        Ok(Self { levels: out })
    }

    pub fn detach(&self) -> PyramidValues<T> {
        PyramidValues {
            levels: self.levels.map(|l| (l.tokens.value(), l.h, l.w)),
        }
    }

    pub fn check_same_layout(&self, other: &Pyramid<'t, T>, op: &'static str) -> Result<()> {
        for (a, b) in self.levels.iter().zip(&other.levels) {
            let (sa, sb) = (a.tokens.shape(), b.tokens.shape());
            if (a.h, a.w) != (b.h, b.w) || sa[0] != sb[0] {
                return Err(Error::shape(op, &sa, &sb));
            }
        }
        Ok(())
    }
}

/// Pyramid values detached from any tape.
#[derive(Clone, Debug)]
pub struct PyramidValues<T> {
    pub levels: [(Tensor<T>, usize, usize); 3],
}

impl<T: Scalar> PyramidValues<T> {
    pub fn attach<'t>(&self, tape: &'t Tape<T>) -> Pyramid<'t, T> {
        Pyramid {
            levels: [0, 1, 2].map(|i| {
                let (t, h, w) = &self.levels[i];
                Level {
                    tokens: tape.constant(t.clone()),
                    h: *h,
                    w: *w,
                }
            }),
        }
    }

    pub fn num_values(&self) -> usize {
        self.levels.iter().map(|l| l.0.len()).sum()
    }
}

/// Padded size used for a frame of `h × w`.
pub fn padded_size(h: usize, w: usize) -> Result<(usize, usize)> {
    if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE {
        return Err(Error::input(format!(
            "frame {h}x{w} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
        )));
    }
    Ok((h.next_multiple_of(PAD_MULTIPLE), w.next_multiple_of(PAD_MULTIPLE)))
}

/// Zero-pad a `[C, H, W]` tensor at the bottom and right.
pub fn pad_map<T: Scalar>(t: &Tensor<T>, hp: usize, wp: usize) -> Tensor<T> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[c, hp, wp]);
    let od = out.data_mut();
    for ch in 0..c {
        for y in 0..h.min(hp) {
            for x in 0..w.min(wp) {
                od[(ch * hp + y) * wp + x] = t.data()[(ch * h + y) * w + x];
            }
        }
    }
    out
}

/// RGB frame as a normalised `[3, H, W]` tensor.
pub fn frame_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::c((raw[p * 3 + c] as f64 / 255.0 - 0.5) * 4.0)
    })
}

/// Output of [`ImageEncoder::encode`].
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures<'t, T> {
    /// Backbone maps before projection, used as decoder skips.
    pub skip: [Var<'t, T>; 3],
    /// Stride-4 backbone map for the finest decoder level.
    pub fine: Var<'t, T>,
    /// Projected levels with positional and scale embeddings.
    pub pyramid: Pyramid<'t, T>,
}

/// Strided convolutional backbone plus per-level projections to the common
/// embedding width.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub stem: Conv,
    pub stages: [Conv; 4],
    pub proj: [Linear; 3],
    pub pos: [ParamId; 3],
    pub scale: [ParamId; 3],
}

impl ImageEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let w = cfg.backbone_widths;
        let c = cfg.embed_dim();
        let g = "image_encoder";
        let stem = Conv::new(store, init, g, "image_encoder.stem", 3, w[0], 3, 2);
        let stages = [0, 1, 2, 3].map(|i| Conv::new(store, init, g, &format!("image_encoder.stage{}", i + 1), w[i], w[i + 1], 3, 2));
        let proj = [0, 1, 2].map(|l| Linear::new(store, init, "projection", &format!("projection.l{l}"), w[l + 2], c));
        let [fh, fw] = cfg.frame_size;
        let sizes = level_sizes(fh, fw);
        let pos = [0, 1, 2].map(|l| {
            let (h, w) = sizes[l];
            store.add("positional", &format!("positional.l{l}"), init.normal(&[c, h, w], 0.02))
        });
        let scale = [0, 1, 2].map(|l| store.add("scale_embedding", &format!("scale_embedding.l{l}"), init.normal(&[c], 0.02)));
        Self {
            stem,
            stages,
            proj,
            pos,
            scale,
        }
    }

    /// Backbone maps at strides 8, 16 and 32, and the stride-4 map.
    pub fn backbone<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, frame: Var<'t, T>) -> Result<([Var<'t, T>; 3], Var<'t, T>)> {
        let mut x = self.stem.forward(ctx, frame)?.gelu()?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(ctx, x)?.gelu()?;
            outs.push(x);
        }
        Ok(([outs[1], outs[2], outs[3]], outs[0]))
    }

    /// Linear per-level map to the common width; no embeddings.
    pub fn project_to_common<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, maps: &[Var<'t, T>; 3]) -> Result<Pyramid<'t, T>> {
        let raw = Pyramid::from_maps(*maps)?;
        raw.try_map(|l, lv| self.proj[l].forward(ctx, lv.tokens))
    }

    /// Add positional and (optionally) scale embeddings.
    pub fn embed<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, cfg: &ModelConfig, p: &Pyramid<'t, T>) -> Result<Pyramid<'t, T>> {
        p.try_map(|l, lv| {
            let mut pos = ctx.p(self.pos[l]);
            let ps = pos.shape();
            if (ps[1], ps[2]) != (lv.h, lv.w) {
                pos = pos.resize(lv.h, lv.w)?;
            }
            let pos_tokens = Level::from_map(pos)?.tokens;
            let mut t = lv.tokens.add(pos_tokens)?;
            if cfg.scale_embedding {
                t = t.add_along(ctx.p(self.scale[l]), -1)?;
            }
            Ok(t)
        })
    }

    /// Encode a padded `[3, H, W]` frame.
    pub fn encode<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, cfg: &ModelConfig, frame: Var<'t, T>) -> Result<ImageFeatures<'t, T>> {
        let s = frame.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::input(format!("expected a [3, H, W] frame, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h < PAD_MULTIPLE || w < PAD_MULTIPLE || h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
            return Err(Error::input(format!(
                "frame {h}x{w} must be at least {PAD_MULTIPLE} and a multiple of {PAD_MULTIPLE}; pad it first"
            )));
        }
        let (skip, fine) = self.backbone(ctx, frame)?;
        let projected = self.project_to_common(ctx, &skip)?;
        let pyramid = self.embed(ctx, cfg, &projected)?;
        debug_assert_eq!(pyramid.sizes(), level_sizes(h, w));
        Ok(ImageFeatures { skip, fine, pyramid })
    }
}
