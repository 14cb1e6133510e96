//! Long-term memory: a bounded FIFO of memorised frames with the first frame
//! pinned, dense readout at strides 16 and 32, and fusion with the
//! short-term branch.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adva::dense_attend;
use crate::config::ModelConfig;
use crate::encoders::Pyramid;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Which frames are memorised and how many are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPolicy {
    pub every: usize,
    pub capacity: usize,
}

impl Default for MemoryPolicy {
    fn default() -> Self {
        Self { every: 5, capacity: 16 }
    }
}

impl MemoryPolicy {
    pub fn new(every: usize, capacity: usize) -> Result<Self> {
        if every == 0 || capacity == 0 {
            return Err(Error::input("memory interval and capacity must be at least 1"));
        }
        Ok(Self { every, capacity })
    }

    pub fn selects(&self, frame: usize) -> bool {
        frame.is_multiple_of(self.every)
    }
}

/// FIFO of `(frame_index, entry)` whose first element is frame 0 and is
/// never evicted.
#[derive(Clone, Debug)]
pub struct MemoryBank<E> {
    policy: MemoryPolicy,
    entries: VecDeque<(usize, E)>,
}

impl<E> MemoryBank<E> {
    pub fn new(policy: MemoryPolicy) -> Self {
        Self {
            policy,
            entries: VecDeque::new(),
        }
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &E> {
        self.entries.iter().map(|e| &e.1)
    }

    /// Insert when the policy selects `frame`; returns whether it was stored.
    /// The entry is built lazily so skipped frames cost nothing.
    pub fn maybe_memorize(&mut self, frame: usize, entry: impl FnOnce() -> Result<E>) -> Result<bool> {
        if !self.policy.selects(frame) {
            return Ok(false);
        }
        if self.entries.iter().any(|e| e.0 == frame) {
            return Err(Error::usage(format!("frame {frame} is already memorised")));
        }
        if self.entries.is_empty() && frame != 0 {
            return Err(Error::usage("the first memorised frame must be frame 0"));
        }
        self.entries.push_back((frame, entry()?));
        if self.entries.len() > self.policy.capacity && self.entries.len() > 1 {
            self.entries.remove(1);
        }
        Ok(true)
    }
}

/// Memorised tokens of one frame, detached from any tape: keys are the
/// stride-16 then stride-32 tokens, values the same plus the projected mask
/// embedding.
#[derive(Clone, Debug)]
pub struct MemoryEntry<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

impl<T: Scalar> MemoryEntry<T> {
    pub fn attach<'t>(&self, tape: &'t Tape<T>) -> MemoryView<'t, T> {
        MemoryView {
            keys: tape.constant(self.keys.clone()),
            values: tape.constant(self.values.clone()),
        }
    }

    pub fn num_values(&self) -> usize {
        self.keys.len() + self.values.len()
    }
}

/// Memory tokens of one frame on a tape, `[N16 + N32, C]` each.
#[derive(Clone, Copy, Debug)]
pub struct MemoryView<'t, T> {
    pub keys: Var<'t, T>,
    pub values: Var<'t, T>,
}

impl<'t, T: Scalar> MemoryView<'t, T> {
    pub fn detach(&self) -> MemoryEntry<T> {
        MemoryEntry {
            keys: self.keys.value(),
            values: self.values.value(),
        }
    }
}

/// Dense attention from the current stride-16/32 tokens to all memory tokens.
#[derive(Clone, Debug)]
pub struct LongTermReadout {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mask_proj: Linear,
}

impl LongTermReadout {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim();
        let mut mk = |s: &str| Linear::new(store, init, "memory", &format!("memory.{s}"), c, c);
        Self {
            q: mk("q"),
            k: mk("k"),
            v: mk("v"),
            o: mk("o"),
            mask_proj: mk("mask_proj"),
        }
    }

    /// Memory tokens for a frame from its post-self-attention features and
    /// its mask embedding.
    pub fn entry<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, features: &Pyramid<'t, T>, mask: &Pyramid<'t, T>) -> Result<MemoryView<'t, T>> {
        features.check_same_layout(mask, "memory entry")?;
        let keys = Var::concat(&[features.levels[1].tokens, features.levels[2].tokens], 0)?;
        let m = Var::concat(&[mask.levels[1].tokens, mask.levels[2].tokens], 0)?;
        let values = keys.add(self.mask_proj.forward(ctx, m)?)?;
        Ok(MemoryView { keys, values })
    }

    /// Levels 1 and 2 hold the readout; level 0 is the query passed through.
    /// Also returns the `[heads, P, M]` weights.
    pub fn readout<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        heads: usize,
        query: &Pyramid<'t, T>,
        memory: &[MemoryView<'t, T>],
    ) -> Result<(Pyramid<'t, T>, Var<'t, T>)> {
        if memory.is_empty() {
            return Err(Error::usage("long-term readout needs a non-empty memory bank"));
        }
        let [_, l1, l2] = query.levels;
        let n1 = l1.h * l1.w;
        let q = self.q.forward(ctx, Var::concat(&[l1.tokens, l2.tokens], 0)?)?;
        let keys: Vec<Var<'t, T>> = memory.iter().map(|m| m.keys).collect();
        let values: Vec<Var<'t, T>> = memory.iter().map(|m| m.values).collect();
        let k = self.k.forward(ctx, Var::concat(&keys, 0)?)?;
        let v = self.v.forward(ctx, Var::concat(&values, 0)?)?;
        let (att, w) = dense_attend(q, k, v, heads)?;
        let out = self.o.forward(ctx, att)?;
        let p = out.shape()[0];
        let mut levels = query.levels;
        levels[1] = l1.with_tokens(out.slice(0, 0, n1)?);
        levels[2] = l2.with_tokens(out.slice(0, n1, p - n1)?);
        Ok((Pyramid { levels }, w))
    }
}

/// Per-level `query + W·[short ‖ long]`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub lin: [Linear; 3],
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim();
        Self {
            lin: [0, 1, 2].map(|l| Linear::new(store, init, "fusion", &format!("fusion.l{l}"), 2 * c, c)),
        }
    }

    pub fn fuse<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        query: &Pyramid<'t, T>,
        short: &Pyramid<'t, T>,
        long: &Pyramid<'t, T>,
    ) -> Result<Pyramid<'t, T>> {
        query.check_same_layout(short, "fuse")?;
        query.check_same_layout(long, "fuse")?;
        for l in 0..3 {
            let (s, g) = (short.levels[l].tokens.shape(), long.levels[l].tokens.shape());
            if s != g {
                return Err(Error::input(format!("fuse: level {l} branches differ: {s:?} vs {g:?}")));
            }
        }
        query.try_map(|l, q| {
            let cat = Var::concat(&[short.levels[l].tokens, long.levels[l].tokens], 1)?;
            q.tokens.add(self.lin[l].forward(ctx, cat)?)
        })
    }
}
