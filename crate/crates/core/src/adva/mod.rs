//! Multi-scale, multi-head deformable attention across frames and within a
//! frame, with decoupled query-driven and flow-driven sampling offsets.
//!
//! Offsets are laid out as `[P, heads, scales, N_k, 2]` flattened to
//! `[P, heads·3·N_k·2]`; the last axis is `(row, col)` in pixels of the level
//! being sampled.

use rand::Rng;

use crate::config::{AdvaConfig, Gates, ModelConfig, STRIDES};
use crate::encoders::{Level, Pyramid};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Ffn, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Reference point of query `(i, j)` on a `qh × qw` grid, rescaled to an
/// `sh × sw` grid (pixel centres aligned).
pub fn rescale_reference(i: usize, j: usize, q: (usize, usize), s: (usize, usize)) -> (f64, f64) {
    (
        (i as f64 + 0.5) * s.0 as f64 / q.0 as f64 - 0.5,
        (j as f64 + 0.5) * s.1 as f64 / q.1 as f64 - 0.5,
    )
}

/// Reference points repeated `n_k` times per query: `[P·n_k, 2]`.
pub fn reference_points<T: Scalar>(q: (usize, usize), s: (usize, usize), n_k: usize) -> Tensor<T> {
    Tensor::from_fn(&[q.0 * q.1 * n_k, 2], |i| {
        let (p, axis) = (i / (2 * n_k), i % 2);
        let (r, c) = rescale_reference(p / q.1, p % q.1, q, s);
        T::c(if axis == 0 { r } else { c })
    })
}

/// Per-column bound of the semantic offsets: the window radius of the
/// sampled level, in its own pixels.
pub fn semantic_bounds(cfg: &AdvaConfig) -> Vec<f64> {
    (0..cfg.offset_width())
        .map(|i| cfg.window((i / (2 * cfg.n_k)) % STRIDES.len()))
        .collect()
}

/// Per-column bound of the flow offsets: extent of the sampled level along
/// the offset's axis.
pub fn flow_bounds(cfg: &AdvaConfig, sizes: &[(usize, usize); 3]) -> Vec<f64> {
    (0..cfg.offset_width())
        .map(|i| {
            let s = (i / (2 * cfg.n_k)) % STRIDES.len();
            if i % 2 == 0 {
                sizes[s].0 as f64
            } else {
                sizes[s].1 as f64
            }
        })
        .collect()
}

fn bounded<'t, T: Scalar>(ctx: &Ctx<'t, T>, raw: Var<'t, T>, bounds: &[f64], norm: bool) -> Result<Var<'t, T>> {
    if !norm {
        return Ok(raw);
    }
    let b = ctx.constant(Tensor::from_f64(&[bounds.len()], bounds)?);
    raw.tanh()?.mul_along(b, -1)
}

/// σ_s·tanh(θ(q)) for projected queries `q: [P, C]`.
pub fn semantic_offsets<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &AdvaConfig, head: &Linear, q: Var<'t, T>) -> Result<Var<'t, T>> {
    let raw = head.forward(ctx, q)?;
    bounded(ctx, raw, &semantic_bounds(cfg), cfg.offset_norm)
}

/// D_s·tanh(θ^f(E)) for flow features `E` on the query grid.
pub fn flow_offsets<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &AdvaConfig,
    head: &Linear,
    flow_feat: &Level<'t, T>,
    query: (usize, usize),
    sizes: &[(usize, usize); 3],
) -> Result<Var<'t, T>> {
    if (flow_feat.h, flow_feat.w) != query {
        return Err(Error::input(format!(
            "flow features {}x{} do not match query grid {}x{}",
            flow_feat.h, flow_feat.w, query.0, query.1
        )));
    }
    let raw = head.forward(ctx, flow_feat.tokens)?;
    bounded(ctx, raw, &flow_bounds(cfg, sizes), cfg.offset_norm)
}

/// Flow-head weights `[C, width]` that read the row/column flow from feature
/// channels 0 and 1 and emit it, converted to each sampled level's pixels, as
/// every offset. With offset normalisation the gain includes the `1/D`
/// factor, or with `exact = Some((dy, dx))` the `atanh` that makes a constant
/// flow of that value (query-level pixels) come out exactly.
pub fn flow_passthrough<T: Scalar>(
    cfg: &AdvaConfig,
    query_level: usize,
    sizes: &[(usize, usize); 3],
    exact: Option<(f64, f64)>,
) -> Tensor<T> {
    let c = cfg.embed_dim;
    let width = cfg.offset_width();
    let bounds = flow_bounds(cfg, sizes);
    let mut w = Tensor::zeros(&[c, width]);
    let d = w.data_mut();
    for col in 0..width {
        let (axis, s) = (col % 2, (col / (2 * cfg.n_k)) % STRIDES.len());
        let ratio = STRIDES[query_level] as f64 / STRIDES[s] as f64;
        let gain = match (cfg.offset_norm, exact) {
            (false, _) => ratio,
            (true, None) => ratio / bounds[col],
            (true, Some((dy, dx))) => {
                let f = if axis == 0 { dy } else { dx };
                if f == 0.0 {
                    ratio / bounds[col]
                } else {
                    (f * ratio / bounds[col]).atanh() / f
                }
            }
        };
        d[axis * width + col] = T::c(gain);
    }
    w
}

/// Per-query-level learnable modules of one attention block.
#[derive(Clone, Debug)]
pub struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Projections {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, group: &str, name: &str, c: usize) -> Self {
        let mk = |store: &mut ParamStore<T>, init: &mut Init<'_, R>, s: &str| Linear::new(store, init, group, &format!("{name}.{s}"), c, c);
        Self {
            q: mk(store, init, "q"),
            k: mk(store, init, "k"),
            v: mk(store, init, "v"),
            o: mk(store, init, "o"),
        }
    }
}

/// Semantic-head bias spreading the `N_k` samples of a head along a
/// head-specific direction, sample 0 at the reference point.
fn semantic_bias<T: Scalar>(cfg: &AdvaConfig) -> Tensor<T> {
    let mut b = Tensor::zeros(&[cfg.offset_width()]);
    let d = b.data_mut();
    for h in 0..cfg.heads {
        let a = std::f64::consts::TAU * h as f64 / cfg.heads as f64;
        for s in 0..STRIDES.len() {
            for k in 0..cfg.n_k {
                let r = 0.5 * k as f64 / cfg.n_k as f64;
                for (axis, dir) in [a.sin(), a.cos()].into_iter().enumerate() {
                    let v = r * dir;
                    d[cfg.offset_index(h, s, k, axis)] = T::c(if cfg.offset_norm { v.atanh() } else { v * cfg.window(s) });
                }
            }
        }
    }
    b
}

/// Sampling locations and attention weights of one query level.
#[derive(Clone, Debug)]
pub struct LevelTrace<'t, T> {
    /// Scales that were sampled.
    pub scales: Vec<usize>,
    /// `points[h][i]`: `[P·N_k, 2]` sampling points of head `h` on
    /// `scales[i]`.
    pub points: Vec<Vec<Var<'t, T>>>,
    /// `weights[h]`: `[P, 1, |scales|·N_k]` softmax weights.
    pub weights: Vec<Var<'t, T>>,
}

/// Key and value maps `[C, H_s, W_s]` split per head.
struct HeadMaps<'t, T> {
    keys: Vec<[Var<'t, T>; 3]>,
    values: Vec<[Var<'t, T>; 3]>,
}

fn head_maps<'t, T: Scalar>(cfg: &AdvaConfig, keys: &[Level<'t, T>; 3], values: &[Level<'t, T>; 3]) -> Result<HeadMaps<'t, T>> {
    let d = cfg.head_dim();
    let split = |levels: &[Level<'t, T>; 3]| -> Result<Vec<[Var<'t, T>; 3]>> {
        let maps = [levels[0].to_map()?, levels[1].to_map()?, levels[2].to_map()?];
        (0..cfg.heads)
            .map(|h| {
                Ok([
                    maps[0].slice(0, h * d, d)?,
                    maps[1].slice(0, h * d, d)?,
                    maps[2].slice(0, h * d, d)?,
                ])
            })
            .collect()
    };
    Ok(HeadMaps {
        keys: split(keys)?,
        values: split(values)?,
    })
}

/// Sample keys/values at reference + offsets and attend. `q: [P, C]` is the
/// projected query; returns `[P, C]` before the output projection.
#[allow(clippy::too_many_arguments)]
fn deformable_attend<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &AdvaConfig,
    q: Var<'t, T>,
    query: (usize, usize),
    maps: &HeadMaps<'t, T>,
    sizes: &[(usize, usize); 3],
    offsets: Var<'t, T>,
    scales: &[usize],
) -> Result<(Var<'t, T>, LevelTrace<'t, T>)> {
    let (d, nk) = (cfg.head_dim(), cfg.n_k);
    let p = query.0 * query.1;
    let refs: Vec<Var<'t, T>> = scales
        .iter()
        .map(|&s| ctx.constant(reference_points(query, sizes[s], nk)))
        .collect();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut trace = LevelTrace {
        scales: scales.to_vec(),
        points: Vec::new(),
        weights: Vec::new(),
    };
    for h in 0..cfg.heads {
        let mut ks = Vec::with_capacity(scales.len());
        let mut vs = Vec::with_capacity(scales.len());
        let mut pts = Vec::with_capacity(scales.len());
        for (i, &s) in scales.iter().enumerate() {
            let off = offsets.slice(1, cfg.offset_index(h, s, 0, 0), 2 * nk)?.reshape(&[p * nk, 2])?;
            let pt = refs[i].add(off)?;
            ks.push(maps.keys[h][s].bilinear_sample(pt)?.reshape(&[p, nk, d])?);
            vs.push(maps.values[h][s].bilinear_sample(pt)?.reshape(&[p, nk, d])?);
            pts.push(pt);
        }
        let k = Var::concat(&ks, 1)?;
        let v = Var::concat(&vs, 1)?;
        let qh = q.slice(1, h * d, d)?.reshape(&[p, 1, d])?;
        let w = qh.matmul(k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?.softmax(-1)?;
        heads.push(w.matmul(v)?.reshape(&[p, d])?);
        trace.points.push(pts);
        trace.weights.push(w);
    }
    Ok((Var::concat(&heads, 1)?, trace))
}

/// Dense multi-head attention of `q: [P, C]` over `k, v: [N, C]`, inputs
/// already projected. Returns `[P, C]` and the `[heads, P, N]` weights.
pub fn dense_attend<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, heads: usize) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (p, c) = (q.shape()[0], q.shape()[1]);
    let n = k.shape()[0];
    if c % heads != 0 || k.shape()[1] != c || v.shape() != k.shape() {
        return Err(Error::shape("dense_attend", &q.shape(), &k.shape()));
    }
    let d = c / heads;
    let split = |x: Var<'t, T>, rows: usize| -> Result<Var<'t, T>> {
        // [rows, C] → [heads, rows, d]
        let parts: Vec<Var<'t, T>> = (0..heads)
            .map(|h| x.slice(1, h * d, d)?.reshape(&[1, rows, d]))
            .collect::<Result<_>>()?;
        Var::concat(&parts, 0)
    };
    let (qh, kh, vh) = (split(q, p)?, split(k, n)?, split(v, n)?);
    let w = qh.matmul(kh.transpose()?)?.scale(1.0 / (d as f64).sqrt())?.softmax(-1)?;
    let o = w.matmul(vh)?;
    let parts: Vec<Var<'t, T>> = (0..heads).map(|h| o.slice(0, h, 1)?.reshape(&[p, d])).collect::<Result<_>>()?;
    Ok((Var::concat(&parts, 1)?, w))
}

/// Deformable attention within one frame's pyramid; offsets come from the
/// queries only.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub proj: Projections,
    pub offsets: [Linear; 3],
    pub ffn: [Ffn; 3],
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let a = &cfg.attn;
        let c = a.embed_dim;
        let g = "self_attn";
        let proj = Projections::new(store, init, g, "self_attn", c);
        let offsets = [0, 1, 2].map(|l| {
            Linear::with_values(
                store,
                g,
                &format!("self_attn.offsets{l}"),
                Tensor::zeros(&[c, a.offset_width()]),
                semantic_bias(a),
            )
        });
        let ffn = [0, 1, 2].map(|l| Ffn::new(store, init, g, &format!("self_attn.ffn{l}"), c, cfg.ffn_dim));
        Self { proj, offsets, ffn }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        cfg: &AdvaConfig,
        x: &Pyramid<'t, T>,
    ) -> Result<(Pyramid<'t, T>, [LevelTrace<'t, T>; 3])> {
        let sizes = x.sizes();
        let keys = x.try_map(|_, l| self.proj.k.forward(ctx, l.tokens))?;
        let values = x.try_map(|_, l| self.proj.v.forward(ctx, l.tokens))?;
        let maps = head_maps(cfg, &keys.levels, &values.levels)?;
        let mut traces = Vec::with_capacity(3);
        let out = x.try_map(|l, lv| {
            let q = self.proj.q.forward(ctx, lv.tokens)?;
            let off = semantic_offsets(ctx, cfg, &self.offsets[l], q)?;
            let (att, tr) = deformable_attend(ctx, cfg, q, (lv.h, lv.w), &maps, &sizes, off, &[0, 1, 2])?;
            traces.push(tr);
            let y = lv.tokens.add(self.proj.o.forward(ctx, att)?)?;
            self.ffn[l].forward(ctx, y)
        })?;
        let [a, b, c]: [LevelTrace<'t, T>; 3] = traces.try_into().map_err(|_| Error::usage("trace count"))?;
        Ok((out, [a, b, c]))
    }
}

/// Additive flow enrichment of queries and keys: `Q_m = Q + W_inv·E_inv`,
/// `K_m = K + W_dir·E_dir`, where `E` are flow features on the respective
/// grids. Zero-initialised, so it starts as the identity.
#[derive(Clone, Debug)]
pub struct QkFlow {
    pub inv: [Linear; 3],
    pub dir: [Linear; 3],
}

impl QkFlow {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim();
        Self {
            inv: [0, 1, 2].map(|l| Linear::zeroed(store, "qk_flow", &format!("qk_flow.inv{l}"), c, c)),
            dir: [0, 1, 2].map(|l| Linear::zeroed(store, "qk_flow", &format!("qk_flow.dir{l}"), c, c)),
        }
    }

    pub fn enrich<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        q: &Pyramid<'t, T>,
        k: &Pyramid<'t, T>,
        flow_inv: &Pyramid<'t, T>,
        flow_dir: &Pyramid<'t, T>,
    ) -> Result<(Pyramid<'t, T>, Pyramid<'t, T>)> {
        q.check_same_layout(flow_inv, "qk_flow_enrich")?;
        k.check_same_layout(flow_dir, "qk_flow_enrich")?;
        let qm = q.try_map(|l, lv| lv.tokens.add(self.inv[l].forward(ctx, flow_inv.levels[l].tokens)?))?;
        let km = k.try_map(|l, lv| lv.tokens.add(self.dir[l].forward(ctx, flow_dir.levels[l].tokens)?))?;
        Ok((qm, km))
    }
}

/// Previous-frame inputs to the cross-frame attention.
#[derive(Clone, Copy, Debug)]
pub struct PrevFrame<'t, T> {
    /// Key source (after self-attention and, if enabled, flow enrichment).
    pub keys: Pyramid<'t, T>,
    /// Image features summed with the projected mask embedding for values.
    pub features: Pyramid<'t, T>,
    pub mask: Pyramid<'t, T>,
}

/// Output of [`CrossAttention::forward`].
#[derive(Clone, Debug)]
pub struct CrossOutput<'t, T> {
    pub pyramid: Pyramid<'t, T>,
    pub traces: Vec<LevelTrace<'t, T>>,
    /// Per level, the semantic and (if active) flow offsets `[P, width]`.
    pub semantic: Vec<Var<'t, T>>,
    pub flow: Vec<Option<Var<'t, T>>>,
}

/// Deformable attention from the current frame into the previous one.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub proj: Projections,
    pub mask_proj: Linear,
    pub semantic: [Linear; 3],
    pub flow: [Linear; 3],
    pub ffn: [Ffn; 3],
}

impl CrossAttention {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let a = &cfg.attn;
        let c = a.embed_dim;
        let g = "adva.attention";
        let proj = Projections::new(store, init, g, "adva", c);
        let mask_proj = Linear::new(store, init, g, "adva.mask_proj", c, c);
        let semantic = [0, 1, 2].map(|l| {
            Linear::with_values(
                store,
                "adva.semantic_offsets",
                &format!("adva.semantic{l}"),
                Tensor::zeros(&[c, a.offset_width()]),
                semantic_bias(a),
            )
        });
        let [fh, fw] = cfg.frame_size;
        let sizes = cfg.level_sizes(fh, fw);
        let flow = [0, 1, 2].map(|l| {
            Linear::with_values(
                store,
                "adva.flow_offsets",
                &format!("adva.flow{l}"),
                flow_passthrough(a, l, &sizes, None),
                Tensor::zeros(&[a.offset_width()]),
            )
        });
        let ffn = [0, 1, 2].map(|l| Ffn::new(store, init, "adva.ffn", &format!("adva.ffn{l}"), c, cfg.ffn_dim));
        Self {
            proj,
            mask_proj,
            semantic,
            flow,
            ffn,
        }
    }

    /// The deformable operator alone: projected queries attend to projected
    /// key/value pyramids. Returns the per-level `[P, C]` outputs before the
    /// output projection; `out.pyramid` is left as `queries`.
    #[allow(clippy::too_many_arguments)]
    pub fn attend_projected<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        cfg: &AdvaConfig,
        multi_scale: bool,
        queries: &Pyramid<'t, T>,
        keys: &Pyramid<'t, T>,
        values: &Pyramid<'t, T>,
        flow: Option<&Pyramid<'t, T>>,
    ) -> Result<(Vec<Var<'t, T>>, CrossOutput<'t, T>)> {
        keys.check_same_layout(values, "adva_attend")?;
        let sizes = keys.sizes();
        let maps = head_maps(cfg, &keys.levels, &values.levels)?;
        let mut out = CrossOutput {
            pyramid: *queries,
            traces: Vec::with_capacity(3),
            semantic: Vec::with_capacity(3),
            flow: Vec::with_capacity(3),
        };
        let mut att = Vec::with_capacity(3);
        for l in 0..3 {
            let lq = &queries.levels[l];
            let qsize = (lq.h, lq.w);
            let sem = semantic_offsets(ctx, cfg, &self.semantic[l], lq.tokens)?;
            let (off, fo) = match flow {
                Some(f) => {
                    let fo = flow_offsets(ctx, cfg, &self.flow[l], &f.levels[l], qsize, &sizes)?;
                    (sem.add(fo)?, Some(fo))
                }
                None => (sem, None),
            };
            let scales: Vec<usize> = if multi_scale { vec![0, 1, 2] } else { vec![l] };
            let (a, tr) = deformable_attend(ctx, cfg, lq.tokens, qsize, &maps, &sizes, off, &scales)?;
            att.push(a);
            out.traces.push(tr);
            out.semantic.push(sem);
            out.flow.push(fo);
        }
        Ok((att, out))
    }

    /// `query` is the residual stream, `query_m` the (possibly enriched)
    /// queries that drive attention scores and semantic offsets, and `flow`
    /// the inverse-flow features on the current grid (`None` or gated off →
    /// no flow offsets).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        cfg: &AdvaConfig,
        gates: &Gates,
        query: &Pyramid<'t, T>,
        query_m: &Pyramid<'t, T>,
        prev: Option<&PrevFrame<'t, T>>,
        flow: Option<&Pyramid<'t, T>>,
    ) -> Result<CrossOutput<'t, T>> {
        let prev = prev.ok_or_else(|| Error::usage("cross-frame attention needs a previous frame; the first frame uses memory only"))?;
        query.check_same_layout(query_m, "adva_cross_attention")?;
        query.check_same_layout(&prev.keys, "adva_cross_attention")?;
        prev.keys.check_same_layout(&prev.features, "adva_cross_attention")?;
        prev.keys.check_same_layout(&prev.mask, "adva_cross_attention")?;
        let keys = prev.keys.try_map(|_, l| self.proj.k.forward(ctx, l.tokens))?;
        let values = prev.features.try_map(|s, l| {
            let m = self.mask_proj.forward(ctx, prev.mask.levels[s].tokens)?;
            self.proj.v.forward(ctx, l.tokens.add(m)?)
        })?;
        let queries = query_m.try_map(|_, l| self.proj.q.forward(ctx, l.tokens))?;
        let flow = if gates.flow_offsets { flow } else { None };
        let (att, mut out) = self.attend_projected(ctx, cfg, gates.multi_scale, &queries, &keys, &values, flow)?;
        let mut levels = query.levels;
        for l in 0..3 {
            let y = query.levels[l].tokens.add(self.proj.o.forward(ctx, att[l])?)?;
            levels[l] = levels[l].with_tokens(self.ffn[l].forward(ctx, y)?);
        }
        out.pyramid = Pyramid { levels };
        Ok(out)
    }
}
