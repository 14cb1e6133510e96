//! The assembled network: sequential propagation, toy training,
//! checkpoints, whole-model gradient checks and the attention benchmark.

mod bench;
mod checkpoint;
mod gradcheck;
mod train;

pub use bench::{bench, fit_exponent, BenchOptions, BenchReport, BenchRow};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{model_gradcheck, GradcheckOptions, GroupResult};
pub use train::{clip_loss, train_toy, Clip, TrainOptions, TrainReport};

use std::str::FromStr;
use std::time::Instant;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adva::{CrossAttention, PrevFrame, QkFlow, SelfAttention};
use crate::config::{Gates, ModelConfig};
use crate::dataio::{FlowPair, Sequence};
use crate::decoder::{logits_to_mask, Decoder};
use crate::encoders::{frame_tensor, pad_map, padded_size, ImageEncoder, MaskEncoder, ObjectMask, Pyramid, PyramidValues};
use crate::error::{Error, Result};
use crate::flow::{flow_levels, FlowEncoder, FlowField};
use crate::memory::{Fusion, LongTermReadout, MemoryBank, MemoryEntry, MemoryPolicy, MemoryView};
use crate::nn::{Adam, Ctx, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Every sub-network, holding parameter ids into one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Networks {
    pub image: ImageEncoder,
    pub mask: MaskEncoder,
    pub flow: FlowEncoder,
    pub self_attn: SelfAttention,
    pub qk_flow: QkFlow,
    pub cross: CrossAttention,
    pub readout: LongTermReadout,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

/// Weights, configuration and (after training) optimizer state.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub nets: Networks,
    pub optimizer: Option<Adam<T>>,
}

impl<T: Scalar> Model<T> {
    /// Fresh weights drawn from a ChaCha stream seeded with `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let init = &mut Init { rng: &mut rng };
        let nets = Networks {
            image: ImageEncoder::new(&mut params, init, &cfg),
            mask: MaskEncoder::new(&mut params, init, &cfg),
            flow: FlowEncoder::new(&mut params, init, &cfg),
            self_attn: SelfAttention::new(&mut params, init, &cfg),
            qk_flow: QkFlow::new(&mut params, &cfg),
            cross: CrossAttention::new(&mut params, init, &cfg),
            readout: LongTermReadout::new(&mut params, init, &cfg),
            fusion: Fusion::new(&mut params, init, &cfg),
            decoder: Decoder::new(&mut params, init, &cfg),
        };
        Ok(Self {
            cfg,
            params,
            nets,
            optimizer: None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            nets: self.nets.clone(),
            optimizer: self.optimizer.as_ref().map(|o| Adam {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
                m: o.m.iter().map(Tensor::cast).collect(),
                v: o.v.iter().map(Tensor::cast).collect(),
            }),
        }
    }
}

/// A frame normalised and zero-padded to a multiple of 32.
#[derive(Clone, Debug)]
pub struct PaddedFrame<T> {
    pub tensor: Tensor<T>,
    pub size: (usize, usize),
    pub padded: (usize, usize),
}

impl<T: Scalar> PaddedFrame<T> {
    pub fn new(img: &RgbImage) -> Result<Self> {
        let size = (img.height() as usize, img.width() as usize);
        let padded = padded_size(size.0, size.1)?;
        Ok(Self {
            tensor: pad_map(&frame_tensor(img), padded.0, padded.1),
            size,
            padded,
        })
    }
}

/// Current-frame encoding: backbone skips and post-self-attention tokens.
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t, T> {
    pub skip: [Var<'t, T>; 3],
    pub fine: Var<'t, T>,
    pub features: Pyramid<'t, T>,
}

/// Flow features for one frame pair: inverse flow on the current grid and
/// direct flow on the previous grid.
#[derive(Clone, Copy, Debug)]
pub struct FlowFeatures<'t, T> {
    pub inverse: Pyramid<'t, T>,
    pub direct: Pyramid<'t, T>,
}

/// Previous-frame state entering the short-term branch.
#[derive(Clone, Copy, Debug)]
pub struct Previous<'t, T> {
    pub features: Pyramid<'t, T>,
    pub mask: Pyramid<'t, T>,
}

impl Networks {
    pub fn encode_frame<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, cfg: &ModelConfig, frame: &Tensor<T>) -> Result<Encoded<'t, T>> {
        let f = self.image.encode(ctx, cfg, ctx.constant(frame.clone()))?;
        let (features, _) = self.self_attn.forward(ctx, &cfg.attn, &f.pyramid)?;
        Ok(Encoded {
            skip: f.skip,
            fine: f.fine,
            features,
        })
    }

    /// Mask embedding of an already padded mask.
    pub fn embed_mask<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, mask: &ObjectMask) -> Result<Pyramid<'t, T>> {
        self.mask.encode(ctx, ctx.constant(mask.onehot()))
    }

    /// Flow features of an already padded field.
    pub fn embed_flow<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, flow: &FlowField) -> Result<Pyramid<'t, T>> {
        let levels = flow_levels::<T>(flow)?.map(|t| ctx.constant(t));
        self.flow.encode(ctx, &levels)
    }

    /// Logits `[16, Hp, Wp]` for the current frame.
    #[allow(clippy::too_many_arguments)]
    pub fn predict<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        cfg: &ModelConfig,
        gates: &Gates,
        cur: &Encoded<'t, T>,
        prev: &Previous<'t, T>,
        flow: Option<&FlowFeatures<'t, T>>,
        memory: &[MemoryView<'t, T>],
        padded: (usize, usize),
    ) -> Result<Var<'t, T>> {
        if flow.is_none() && (gates.flow_offsets || gates.qk_flow) {
            return Err(Error::usage("flow is required unless both flow branches are disabled"));
        }
        let (query_m, keys) = match flow {
            Some(f) if gates.qk_flow => self.qk_flow.enrich(ctx, &cur.features, &prev.features, &f.inverse, &f.direct)?,
            _ => (cur.features, prev.features),
        };
        let prev_frame = PrevFrame {
            keys,
            features: prev.features,
            mask: prev.mask,
        };
        let short = self.cross.forward(
            ctx,
            &cfg.attn,
            gates,
            &cur.features,
            &query_m,
            Some(&prev_frame),
            flow.map(|f| &f.inverse),
        )?;
        let long = if gates.long_term && !memory.is_empty() {
            self.readout.readout(ctx, cfg.attn.heads, &cur.features, memory)?.0
        } else {
            cur.features.try_map(|_, l| Ok(ctx.zeros(&l.tokens.shape())))?
        };
        let fused = self.fusion.fuse(ctx, &cur.features, &short.pyramid, &long)?;
        self.decoder.decode(ctx, &fused, &cur.skip, cur.fine, padded)
    }
}

/// Crop `[16, Hp, Wp]` logits to `[16, h, w]`.
pub fn crop_logits<'t, T: Scalar>(logits: Var<'t, T>, size: (usize, usize)) -> Result<Var<'t, T>> {
    logits.slice(1, 0, size.0)?.slice(2, 0, size.1)
}

/// Where propagation takes flow from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowSource {
    /// Exact flow from the synthetic generator.
    Oracle,
    /// `.flo` files next to the sequence.
    Files,
    /// Oracle flow plus Gaussian noise of this standard deviation (pixels).
    Noisy(f64),
}

impl FromStr for FlowSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "files" => Ok(Self::Files),
            _ => {
                let sigma = s
                    .strip_prefix("noisy:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| Error::usage(format!("flow source must be oracle, files or noisy:<sigma>, got {s:?}")))?;
                Ok(Self::Noisy(sigma))
            }
        }
    }
}

/// Corrupt both directions of every pair with independent Gaussian noise.
pub fn noisy_flows(pairs: &[FlowPair], sigma: f64, seed: u64) -> Result<Vec<FlowPair>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(2 * i as u64);
            Ok(FlowPair {
                direct: p.direct.with_noise(sigma, s)?,
                inverse: p.inverse.with_noise(sigma, s + 1)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct PropagateOptions {
    pub gates: Gates,
    pub memory: MemoryPolicy,
}

/// Per-frame outputs for frames `1..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationTrace {
    pub masks: Vec<ObjectMask>,
    pub seconds: Vec<f64>,
    /// Bank size at the time each frame was read out.
    pub bank_sizes: Vec<usize>,
}

impl PropagationTrace {
    /// Frame-0 annotation followed by the predictions.
    pub fn full_sequence(&self, first: &ObjectMask) -> Vec<ObjectMask> {
        std::iter::once(first.clone()).chain(self.masks.iter().cloned()).collect()
    }
}

/// State carried from one frame to the next, detached from any tape.
struct Carry<T> {
    features: PyramidValues<T>,
    mask: PyramidValues<T>,
}

/// Segment frames `1..T` from the frame-0 annotation. `flows` must hold one
/// pair per adjacent frame pair unless both flow branches are gated off.
pub fn propagate<T: Scalar>(
    model: &Model<T>,
    seq: &Sequence,
    flows: Option<&[FlowPair]>,
    opts: &PropagateOptions,
) -> Result<PropagationTrace> {
    seq.validate()?;
    let needs_flow = opts.gates.flow_offsets || opts.gates.qk_flow;
    if let Some(f) = flows {
        if f.len() + 1 != seq.len() {
            return Err(Error::input(format!("{} flow pairs for {} frames", f.len(), seq.len())));
        }
    } else if needs_flow && seq.len() > 1 {
        return Err(Error::usage("propagation needs flow; disable both flow branches to run without it"));
    }
    let (cfg, nets) = (&model.cfg, &model.nets);
    let first = seq.first_annotation()?;
    let mut trace = PropagationTrace {
        masks: Vec::with_capacity(seq.len().saturating_sub(1)),
        seconds: Vec::with_capacity(seq.len().saturating_sub(1)),
        bank_sizes: Vec::with_capacity(seq.len().saturating_sub(1)),
    };
    let mut bank: MemoryBank<MemoryEntry<T>> = MemoryBank::new(opts.memory);

    let f0 = PaddedFrame::<T>::new(&seq.frames[0])?;
    let (size, padded) = (f0.size, f0.padded);
    let mut carry = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params, false);
        let enc = nets.encode_frame(&ctx, cfg, &f0.tensor)?;
        let mask = nets.embed_mask(&ctx, &first.padded(padded.0, padded.1))?;
        bank.maybe_memorize(0, || Ok(nets.readout.entry(&ctx, &enc.features, &mask)?.detach()))?;
        Carry {
            features: enc.features.detach(),
            mask: mask.detach(),
        }
    };

    for t in 1..seq.len() {
        let start = Instant::now();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params, false);
        let frame = PaddedFrame::<T>::new(&seq.frames[t])?;
        let cur = nets.encode_frame(&ctx, cfg, &frame.tensor)?;
        let prev = Previous {
            features: carry.features.attach(&tape),
            mask: carry.mask.attach(&tape),
        };
        let flow = match flows {
            Some(f) if needs_flow => {
                let pair = &f[t - 1];
                Some(FlowFeatures {
                    inverse: nets.embed_flow(&ctx, &pair.inverse.padded(padded.0, padded.1))?,
                    direct: nets.embed_flow(&ctx, &pair.direct.padded(padded.0, padded.1))?,
                })
            }
            _ => None,
        };
        let memory: Vec<MemoryView<'_, T>> = bank.entries().map(|e| e.attach(&tape)).collect();
        trace.bank_sizes.push(bank.len());
        let logits = nets.predict(&ctx, cfg, &opts.gates, &cur, &prev, flow.as_ref(), &memory, padded)?;
        let mask = logits_to_mask(&crop_logits(logits, size)?.value())?;
        let mask_emb = nets.embed_mask(&ctx, &mask.padded(padded.0, padded.1))?;
        bank.maybe_memorize(t, || Ok(nets.readout.entry(&ctx, &cur.features, &mask_emb)?.detach()))?;
        carry = Carry {
            features: cur.features.detach(),
            mask: mask_emb.detach(),
        };
        trace.masks.push(mask);
        trace.seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(trace)
}
