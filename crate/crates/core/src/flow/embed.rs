use rand::Rng;

use super::FlowField;
use crate::config::{ModelConfig, STRIDES};
use crate::encoders::{Level, Pyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Flow at the three pyramid strides as `[2, H_l, W_l]` maps with channels
/// `(dy, dx)` in level pixels: block-averaged, then divided by the stride.
///
/// The field must already be padded to a multiple of 32.
pub fn flow_levels<T: Scalar>(flow: &FlowField) -> Result<[Tensor<T>; 3]> {
    let (h, w) = (flow.h, flow.w);
    if h % STRIDES[2] != 0 || w % STRIDES[2] != 0 {
        return Err(Error::input(format!("flow {h}x{w} is not padded to a multiple of 32")));
    }
    Ok(STRIDES.map(|s| {
        let (hl, wl) = (h / s, w / s);
        let norm = 1.0 / (s * s * s) as f64;
        let mut out = Tensor::zeros(&[2, hl, wl]);
        let mut acc = vec![0.0f64; 2 * hl * wl];
        for y in 0..h {
            for x in 0..w {
                let j = (y / s) * wl + x / s;
                acc[j] += flow.v[y * w + x] as f64;
                acc[hl * wl + j] += flow.u[y * w + x] as f64;
            }
        }
        for (o, a) in out.data_mut().iter_mut().zip(acc) {
            *o = T::c(a * norm);
        }
        out
    }))
}

/// Multi-scale motion features: per level a linear map of the level flow plus
/// a small convolutional branch, both to C channels.
#[derive(Clone, Debug)]
pub struct FlowEncoder {
    pub linear: [Linear; 3],
    pub conv: [Conv; 3],
    pub out: [Conv; 3],
}

impl FlowEncoder {
    /// The linear term starts as an identity into channels 0 and 1 (row and
    /// column displacement), and the convolutional branch never writes those
    /// two channels at initialisation, so they carry the level flow verbatim.
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim();
        let fw = cfg.flow_width;
        let g = "flow_encoder";
        let linear = [0, 1, 2].map(|l| {
            let mut w: Tensor<T> = init.normal(&[2, c], 0.1);
            let d = w.data_mut();
            d[..2].fill(T::zero());
            d[c..c + 2].fill(T::zero());
            d[0] = T::one();
            d[c + 1] = T::one();
            Linear::with_values(store, g, &format!("flow_encoder.linear{l}"), w, Tensor::zeros(&[c]))
        });
        let conv = [0, 1, 2].map(|l| Conv::new(store, init, g, &format!("flow_encoder.conv{l}"), 2, fw, 3, 1));
        let out = [0, 1, 2].map(|l| {
            let oc = Conv::new(store, init, g, &format!("flow_encoder.out{l}"), fw, c, 1, 1);
            let w = store.get_mut(oc.w);
            let d = w.data_mut();
            d[..2 * fw].fill(T::zero());
            oc
        });
        Self { linear, conv, out }
    }

    /// Embed level flows (from [`flow_levels`]) into a pyramid.
    pub fn encode<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, levels: &[Var<'t, T>; 3]) -> Result<Pyramid<'t, T>> {
        let mut out = Vec::with_capacity(3);
        for (l, f) in levels.iter().enumerate() {
            let s = f.shape();
            if s.len() != 3 || s[0] != 2 {
                return Err(Error::input(format!("level flow must be [2, H, W], got {s:?}")));
            }
            let lin = self.linear[l].forward(ctx, Level::from_map(*f)?.tokens)?;
            let h = self.conv[l].forward(ctx, *f)?.gelu()?;
            let conv = Level::from_map(self.out[l].forward(ctx, h)?)?;
            out.push(conv.with_tokens(conv.tokens.add(lin)?));
        }
        Ok(Pyramid {
            levels: [out[0], out[1], out[2]],
        })
    }
}
