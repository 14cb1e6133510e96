//! Desk-scale training on short clips with per-pixel cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{crop_logits, Encoded, FlowFeatures, Model, Networks, PaddedFrame, Previous};
use crate::config::{Gates, ModelConfig, NUM_CLASSES};
use crate::dataio::{FlowPair, Sequence};
use crate::decoder::logits_to_mask;
use crate::encoders::{ObjectMask, Permutation};
use crate::error::{Error, Result};
use crate::nn::{Adam, Ctx};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Consecutive frames with ground truth and the flows between them. Masks
/// are unpadded; frames are padded.
#[derive(Clone, Debug)]
pub struct Clip<T> {
    pub frames: Vec<PaddedFrame<T>>,
    pub masks: Vec<ObjectMask>,
    pub flows: Vec<FlowPair>,
}

impl<T: Scalar> Clip<T> {
    /// Frames `start .. start + len` of `seq`, labels relabelled by `perm`.
    pub fn from_sequence(seq: &Sequence, start: usize, len: usize, perm: &Permutation) -> Result<Self> {
        if len < 2 || start + len > seq.len() {
            return Err(Error::input(format!(
                "clip {start}..{} does not fit a {}-frame sequence",
                start + len,
                seq.len()
            )));
        }
        let flows = seq
            .flows
            .as_ref()
            .ok_or_else(|| Error::input(format!("training sequence {:?} has no flows", seq.name)))?;
        let frames = (start..start + len)
            .map(|t| PaddedFrame::new(&seq.frames[t]))
            .collect::<Result<_>>()?;
        let masks = (start..start + len)
            .map(|t| {
                seq.annotations[t]
                    .as_ref()
                    .map(|m| m.relabel(perm))
                    .ok_or_else(|| Error::input(format!("training sequence {:?} lacks ground truth for frame {t}", seq.name)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            frames,
            masks,
            flows: flows[start..start + len - 1].to_vec(),
        })
    }
}

/// Per-pixel cross-entropy of `[16, h, w]` logits against a mask.
pub fn mask_cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, target: &ObjectMask) -> Result<Var<'t, T>> {
    let (h, w) = (target.height(), target.width());
    let targets: Vec<usize> = target.labels().iter().map(|&l| l as usize).collect();
    logits.reshape(&[NUM_CLASSES, h * w])?.transpose()?.cross_entropy(&targets)
}

/// Mean cross-entropy over frames `1..` of a clip. Frame 0 seeds the memory
/// and the short-term branch with its ground truth. Later frames pass their
/// predicted mask on, or the ground truth with `teacher_forcing`.
pub fn clip_loss<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &ModelConfig,
    nets: &Networks,
    gates: &Gates,
    clip: &Clip<T>,
    teacher_forcing: bool,
) -> Result<Var<'t, T>> {
    let padded = clip.frames[0].padded;
    let size = clip.frames[0].size;
    let pad = |m: &ObjectMask| m.padded(padded.0, padded.1);
    let first: Encoded<'t, T> = nets.encode_frame(ctx, cfg, &clip.frames[0].tensor)?;
    let first_mask = nets.embed_mask(ctx, &pad(&clip.masks[0]))?;
    let memory = [nets.readout.entry(ctx, &first.features, &first_mask)?];
    let mut prev = Previous {
        features: first.features,
        mask: first_mask,
    };
    let mut total: Option<Var<'t, T>> = None;
    for t in 1..clip.frames.len() {
        let cur = nets.encode_frame(ctx, cfg, &clip.frames[t].tensor)?;
        let pair = &clip.flows[t - 1];
        let flow = FlowFeatures {
            inverse: nets.embed_flow(ctx, &pair.inverse.padded(padded.0, padded.1))?,
            direct: nets.embed_flow(ctx, &pair.direct.padded(padded.0, padded.1))?,
        };
        let logits = crop_logits(nets.predict(ctx, cfg, gates, &cur, &prev, Some(&flow), &memory, padded)?, size)?;
        let loss = mask_cross_entropy(logits, &clip.masks[t])?;
        total = Some(match total {
            Some(acc) => acc.add(loss)?,
            None => loss,
        });
        if t + 1 < clip.frames.len() {
            let next = if teacher_forcing {
                clip.masks[t].clone()
            } else {
                logits_to_mask(&logits.value())?
            };
            prev = Previous {
                features: cur.features,
                mask: nets.embed_mask(ctx, &pad(&next))?,
            };
        }
    }
    total
        .ok_or_else(|| Error::input("a clip needs at least two frames"))?
        .scale(1.0 / (clip.frames.len() - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_len: usize,
    /// Relabel objects by a random permutation per clip.
    pub shuffle: bool,
    pub teacher_forcing: bool,
    pub gates: Gates,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1e-3,
            seed: 0,
            clip_len: 3,
            shuffle: true,
            teacher_forcing: false,
            gates: Gates::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Adam on clip cross-entropy. Clip choice, shuffling and order are drawn
/// from `opts.seed`, so a run is reproducible.
pub fn train_toy(model: &mut Model<f32>, seqs: &[Sequence], opts: &TrainOptions) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if opts.steps == 0 {
        return Ok(report);
    }
    if opts.clip_len < 2 {
        return Err(Error::input("clip_len must be at least 2"));
    }
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return Err(Error::input("learning rate must be positive"));
    }
    let usable: Vec<&Sequence> = seqs.iter().filter(|s| s.len() >= opts.clip_len).collect();
    if usable.is_empty() {
        return Err(Error::input(format!("no training sequence has {} frames", opts.clip_len)));
    }
    for s in &usable {
        s.validate()?;
        if !s.fully_annotated() || s.flows.is_none() {
            return Err(Error::input(format!(
                "training sequence {:?} needs masks and flows on every frame",
                s.name
            )));
        }
    }
    let mut opt = model.optimizer.take().unwrap_or_else(|| Adam::new(&model.params, opts.lr));
    opt.lr = opts.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for step in 0..opts.steps {
        let seq = usable[rng.gen_range(0..usable.len())];
        let start = rng.gen_range(0..=seq.len() - opts.clip_len);
        let perm = if opts.shuffle {
            Permutation::random(&mut rng)
        } else {
            Permutation::identity()
        };
        let clip = Clip::<f32>::from_sequence(seq, start, opts.clip_len, &perm)?;
        let diverged = |reason: String| Error::Training { step, reason };
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params, true);
        let loss = match clip_loss(&ctx, &model.cfg, &model.nets, &opts.gates, &clip, opts.teacher_forcing) {
            Err(Error::NonFinite(op)) => return Err(diverged(format!("non-finite value in {op}"))),
            other => other?,
        };
        let value = loss.value().item().real();
        if !value.is_finite() {
            return Err(diverged(format!("loss is {value}")));
        }
        tape.backward(loss)?;
        let grads = ctx.grads();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged("non-finite gradient".into()));
        }
        opt.update(&mut model.params, &grads);
        report.losses.push(value);
    }
    model.optimizer = Some(opt);
    Ok(report)
}
