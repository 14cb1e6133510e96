//! Top-down feature-pyramid decoder producing per-class logits.

use rand::Rng;

use crate::config::{ModelConfig, NUM_CLASSES};
use crate::encoders::{ObjectMask, Pyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct Decoder {
    pub lateral: [Conv; 3],
    /// Lateral of the stride-4 backbone map.
    pub lateral_fine: Conv,
    /// Group-norm affine parameters for strides 8, 16, 32 and 4.
    pub gamma: [ParamId; 4],
    pub beta: [ParamId; 4],
    pub head: Conv,
    pub out: Conv,
    pub groups: usize,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let (c, d) = (cfg.embed_dim(), cfg.decoder_dim);
        let g = "decoder";
        let lateral = [0, 1, 2].map(|l| {
            Conv::new(
                store,
                init,
                g,
                &format!("decoder.lateral{l}"),
                c + cfg.backbone_widths[l + 2],
                d,
                1,
                1,
            )
        });
        let lateral_fine = Conv::new(store, init, g, "decoder.lateral_fine", cfg.backbone_widths[1], d, 1, 1);
        let gamma = [0, 1, 2, 3].map(|l| store.add(g, &format!("decoder.gn{l}.gamma"), Tensor::full(&[d], T::one())));
        let beta = [0, 1, 2, 3].map(|l| store.add(g, &format!("decoder.gn{l}.beta"), Tensor::zeros(&[d])));
        let head = Conv::new(store, init, g, "decoder.head", d, d, 3, 1);
        let out = Conv::new(store, init, g, "decoder.out", d, NUM_CLASSES, 1, 1);
        Self {
            lateral,
            lateral_fine,
            gamma,
            beta,
            head,
            out,
            groups: cfg.gn_groups,
        }
    }

    /// Logits `[16, H, W]` for a padded `H × W` frame from the fused pyramid
    /// and the raw backbone maps. The last top-down step adds the stride-4
    /// map `fine`, and logits are computed at that resolution.
    pub fn decode<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        fused: &Pyramid<'t, T>,
        skip: &[Var<'t, T>; 3],
        fine: Var<'t, T>,
        out_size: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let mut x: Option<Var<'t, T>> = None;
        for l in (0..3).rev() {
            let f = fused.levels[l].to_map()?;
            let (fs, ss) = (f.shape(), skip[l].shape());
            if fs[1..] != ss[1..] {
                return Err(Error::input(format!(
                    "decoder level {l}: fused {fs:?} and skip {ss:?} differ spatially"
                )));
            }
            let mut y = self.lateral[l].forward(ctx, Var::concat(&[f, skip[l]], 0)?)?;
            if let Some(up) = x {
                y = y.add(up.resize(fs[1], fs[2])?)?;
            }
            y = y.group_norm(ctx.p(self.gamma[l]), ctx.p(self.beta[l]), self.groups)?.gelu()?;
            x = Some(y);
        }
        let x = x.expect("three levels");
        let fs = fine.shape();
        let x = self
            .lateral_fine
            .forward(ctx, fine)?
            .add(x.resize(fs[1], fs[2])?)?
            .group_norm(ctx.p(self.gamma[3]), ctx.p(self.beta[3]), self.groups)?
            .gelu()?;
        let h = self.head.forward(ctx, x)?.gelu()?;
        let logits = self.out.forward(ctx, h)?;
        logits.resize(out_size.0, out_size.1)
    }
}

/// Per-pixel argmax over classes; ties go to the smaller class index.
pub fn logits_to_mask<T: Scalar>(logits: &Tensor<T>) -> Result<ObjectMask> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != NUM_CLASSES {
        return Err(Error::input(format!("expected [{NUM_CLASSES}, H, W] logits, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = logits.data();
    let labels = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if d[k * h * w + p] > d[best * h * w + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    ObjectMask::new(h, w, labels)
}
