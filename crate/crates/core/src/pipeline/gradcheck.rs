//! Finite-difference check of every parameter group of a small model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{clip_loss, Clip, Model};
use crate::config::{Gates, ModelConfig};
use crate::dataio::{gen_synthetic, Motion, ShapeKind, ShapeSpec, SynthSpec};
use crate::encoders::Permutation;
use crate::error::Result;
use crate::nn::Ctx;
use crate::tensor::gradcheck::{probe_indices, rel_err};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckOptions {
    pub config: ModelConfig,
    /// Square frame side before padding.
    pub frame: usize,
    pub frames: usize,
    pub seed: u64,
    /// Entries probed per parameter tensor.
    pub probes: usize,
    /// Central-difference step. Bilinear sampling is piecewise linear in its
    /// coordinates, and a large step lets sample points cross grid lines.
    pub step: f64,
    pub tolerance: f64,
    /// Std of the noise added to every weight so that no parameter sits at
    /// a symmetric initial value (zeroed heads sample exactly on grid
    /// points, where bilinear sampling has a kink).
    pub jitter: f64,
    /// Corrupt the analytic backward pass; used as a negative control.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            config: ModelConfig::micro(),
            frame: 16,
            frames: 3,
            seed: 0,
            probes: 3,
            step: 1e-5,
            tolerance: 1e-2,
            jitter: 0.05,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_err: f64,
    pub probes: usize,
    /// Largest analytic gradient magnitude seen in the group.
    pub max_grad: f64,
    pub passed: bool,
}

/// Compare tape gradients of the clip loss against central differences,
/// parameter by parameter, and summarise per group. Runs in `f64`.
pub fn model_gradcheck(opts: &GradcheckOptions) -> Result<Vec<GroupResult>> {
    let mut model = Model::<f64>::new(opts.config.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED);
    let noise = Normal::new(0.0, opts.jitter.max(0.0)).expect("finite std");
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let side = opts.frame as f64;
    let spec = SynthSpec {
        name: "gradcheck".into(),
        height: opts.frame,
        width: opts.frame,
        frames: opts.frames.max(2),
        seed: opts.seed,
        shapes: vec![
            ShapeSpec {
                kind: ShapeKind::Rect,
                size: [side * 0.4, side * 0.35],
                center: [side * 0.35, side * 0.4],
                angle: 0.0,
                motion: Motion {
                    translation: [1.0, 0.5],
                    ..Motion::default()
                },
            },
            ShapeSpec {
                kind: ShapeKind::Ellipse,
                size: [side * 0.3, side * 0.4],
                center: [side * 0.7, side * 0.6],
                angle: 20.0,
                motion: Motion {
                    translation: [-0.5, 0.0],
                    rotation: 5.0,
                    scale: 1.0,
                },
            },
        ],
        texture_contrast: 90.0,
    };
    let seq = gen_synthetic(&spec)?;
    let clip = Clip::<f64>::from_sequence(&seq, 0, seq.len(), &Permutation::identity())?;
    let gates = Gates::default();

    let analytic = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params, true);
        let loss = clip_loss(&ctx, &model.cfg, &model.nets, &gates, &clip, true)?;
        tape.inject_backward_fault(opts.inject_fault);
        tape.backward(loss)?;
        ctx.grads()
    };
    let eval = |m: &Model<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.params, false);
        Ok(clip_loss(&ctx, &m.cfg, &m.nets, &gates, &clip, true)?.value().item())
    };

    let mut results: Vec<GroupResult> = model
        .params
        .groups()
        .into_iter()
        .map(|group| GroupResult {
            group,
            max_rel_err: 0.0,
            probes: 0,
            max_grad: 0.0,
            passed: true,
        })
        .collect();
    let meta: Vec<(String, usize)> = model.params.iter().map(|p| (p.group.clone(), p.value.len())).collect();
    for (i, (group, len)) in meta.into_iter().enumerate() {
        let r = results.iter_mut().find(|r| r.group == group).expect("group listed");
        for idx in probe_indices(len, Some(opts.probes)) {
            let x0 = model.params.iter().nth(i).expect("param").value.data()[idx];
            let set = |m: &mut Model<f64>, v: f64| m.params.iter_mut().nth(i).expect("param").value.data_mut()[idx] = v;
            set(&mut model, x0 + opts.step);
            let up = eval(&model)?;
            set(&mut model, x0 - opts.step);
            let down = eval(&model)?;
            set(&mut model, x0);
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[i].data()[idx];
            r.max_rel_err = r.max_rel_err.max(rel_err(a, numeric));
            r.max_grad = r.max_grad.max(a.abs());
            r.probes += 1;
        }
    }
    for r in &mut results {
        r.passed = r.max_rel_err <= opts.tolerance;
    }
    Ok(results)
}
