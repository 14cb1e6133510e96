//! Brute-force reference for deformable attention: gather every sampling
//! point with scalar bilinear interpolation, then run dense softmax attention
//! over the gathered keys and values.

use flowvos::adva::{CrossAttention, SelfAttention};
use flowvos::config::{level_sizes, AdvaConfig, ModelConfig};
use flowvos::encoders::{Level, Pyramid};
use flowvos::nn::{Ctx, Init, ParamStore};
use flowvos::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tokens `[h·w, c]` of one level, row-major over pixels.
#[derive(Clone)]
struct Grid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Grid {
    fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    /// Bilinear value at `(row, col)` after clamping the point to the grid.
    fn sample(&self, row: f64, col: f64, ch: usize) -> f64 {
        let y = row.clamp(0.0, (self.h - 1) as f64);
        let x = col.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        (1.0 - fy) * (1.0 - fx) * self.at(y0, x0, ch)
            + (1.0 - fy) * fx * self.at(y0, x1, ch)
            + fy * (1.0 - fx) * self.at(y1, x0, ch)
            + fy * fx * self.at(y1, x1, ch)
    }
}

fn grid_of(t: &Tensor<f64>, h: usize, w: usize) -> Grid {
    Grid {
        h,
        w,
        c: t.shape()[1],
        data: t.data().to_vec(),
    }
}

/// `x·W + b` for `x: [n, din]`, `W: [din, dout]`.
fn affine(x: &Grid, w: &Tensor<f64>, b: &Tensor<f64>) -> Grid {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let n = x.h * x.w;
    let mut data = vec![0.0; n * dout];
    for p in 0..n {
        for o in 0..dout {
            let mut s = b.data()[o];
            for i in 0..din {
                s += x.data[p * din + i] * w.data()[i * dout + o];
            }
            data[p * dout + o] = s;
        }
    }
    Grid {
        h: x.h,
        w: x.w,
        c: dout,
        data,
    }
}

fn column(cfg: &AdvaConfig, col: usize) -> (usize, usize) {
    // (scale, axis) of an offset column laid out as [head, scale, k, axis]
    ((col / (2 * cfg.n_k)) % 3, col % 2)
}

/// Offsets `[P, width]` from raw head outputs and per-column bounds.
fn bound(cfg: &AdvaConfig, raw: Grid, bound_of: impl Fn(usize, usize) -> f64) -> Grid {
    if !cfg.offset_norm {
        return raw;
    }
    let mut out = raw.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let (s, axis) = column(cfg, i % raw.c);
        *v = v.tanh() * bound_of(s, axis);
    }
    out
}

/// Window radius of scale `s` in that level's pixels: `sigma_base` stride-8
/// pixels scaled by the stride ratio, then converted to level pixels.
fn window(cfg: &AdvaConfig, s: usize) -> f64 {
    let stride8 = cfg.sigma_base * cfg.strides[s] as f64 / 8.0;
    stride8 * 8.0 / cfg.strides[s] as f64
}

/// Gather-and-dense attention for one query level. Returns `[P, C]`.
fn oracle_attend(cfg: &AdvaConfig, q: &Grid, keys: &[Grid; 3], values: &[Grid; 3], offsets: &Grid, scales: &[usize]) -> Grid {
    let d = cfg.embed_dim / cfg.heads;
    let mut out = vec![0.0; q.h * q.w * cfg.embed_dim];
    for i in 0..q.h {
        for j in 0..q.w {
            let p = i * q.w + j;
            for h in 0..cfg.heads {
                let mut ks: Vec<Vec<f64>> = Vec::new();
                let mut vs: Vec<Vec<f64>> = Vec::new();
                for &s in scales {
                    let (sh, sw) = (keys[s].h, keys[s].w);
                    let ry = (i as f64 + 0.5) * sh as f64 / q.h as f64 - 0.5;
                    let rx = (j as f64 + 0.5) * sw as f64 / q.w as f64 - 0.5;
                    for k in 0..cfg.n_k {
                        let col = ((h * 3 + s) * cfg.n_k + k) * 2;
                        let y = ry + offsets.data[p * offsets.c + col];
                        let x = rx + offsets.data[p * offsets.c + col + 1];
                        ks.push((0..d).map(|e| keys[s].sample(y, x, h * d + e)).collect());
                        vs.push((0..d).map(|e| values[s].sample(y, x, h * d + e)).collect());
                    }
                }
                let qv: Vec<f64> = (0..d).map(|e| q.data[p * q.c + h * d + e]).collect();
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|k| k.iter().zip(&qv).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (wgt, v) in e.iter().zip(&vs) {
                    for c in 0..d {
                        out[p * cfg.embed_dim + h * d + c] += wgt / z * v[c];
                    }
                }
            }
        }
    }
    Grid {
        h: q.h,
        w: q.w,
        c: cfg.embed_dim,
        data: out,
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> (ModelConfig, (usize, usize)) {
    let mut cfg = ModelConfig::micro();
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    cfg.attn = AdvaConfig {
        heads,
        n_k: rng.gen_range(1..=4),
        sigma_base: rng.gen_range(0.5..4.0),
        // the model needs at least two channels for the flow passthrough
        embed_dim: (heads * rng.gen_range(1..=3)).max(2),
        offset_norm: rng.gen_bool(0.7),
        ..cfg.attn
    };
    cfg.ffn_dim = 4;
    // level-0 grids from 1×1 up to 16×16
    let size = (8 * rng.gen_range(1..=16), 8 * rng.gen_range(1..=16));
    (cfg, size)
}

fn randomise(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::randn(rng, &shape, std);
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, sizes: [(usize, usize); 3], c: usize) -> [Tensor<f64>; 3] {
    sizes.map(|(h, w)| Tensor::randn(rng, &[h * w, c], 1.0))
}

fn pyramid<'t>(tape: &'t Tape<f64>, tokens: &[Tensor<f64>; 3], sizes: [(usize, usize); 3]) -> Pyramid<'t, f64> {
    Pyramid {
        levels: [0, 1, 2].map(|l| Level {
            tokens: tape.constant(tokens[l].clone()),
            h: sizes[l].0,
            w: sizes[l].1,
        }),
    }
}

fn grids(tokens: &[Tensor<f64>; 3], sizes: [(usize, usize); 3]) -> [Grid; 3] {
    [0, 1, 2].map(|l| grid_of(&tokens[l], sizes[l].0, sizes[l].1))
}

fn max_diff(a: &Tensor<f64>, b: &Grid) -> f64 {
    assert_eq!(a.len(), b.data.len());
    a.data().iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest absolute difference between cross-attention and the oracle over
/// `configs` random configurations.
pub fn cross_attention_worst_error(seed: u64, configs: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let (cfg, (fh, fw)) = random_config(&mut rng);
        let a = cfg.attn.clone();
        let mut store = ParamStore::new();
        let net = CrossAttention::new(&mut store, &mut Init { rng: &mut rng }, &cfg);
        let std = if a.offset_norm { 0.7 } else { 2.0 };
        randomise(&mut store, &mut rng, std);
        let sizes = level_sizes(fh, fw);
        let c = a.embed_dim;
        let (q, k, v, f) = (
            random_tokens(&mut rng, sizes, c),
            random_tokens(&mut rng, sizes, c),
            random_tokens(&mut rng, sizes, c),
            random_tokens(&mut rng, sizes, c),
        );
        let multi_scale = rng.gen_bool(0.75);
        let with_flow = rng.gen_bool(0.75);

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let fp = pyramid(&tape, &f, sizes);
        let (att, _) = net
            .attend_projected(
                &ctx,
                &a,
                multi_scale,
                &pyramid(&tape, &q, sizes),
                &pyramid(&tape, &k, sizes),
                &pyramid(&tape, &v, sizes),
                with_flow.then_some(&fp),
            )
            .unwrap();

        let (kg, vg, fg) = (grids(&k, sizes), grids(&v, sizes), grids(&f, sizes));
        for l in 0..3 {
            let qg = grid_of(&q[l], sizes[l].0, sizes[l].1);
            let sem = &net.semantic[l];
            let mut off = bound(&a, affine(&qg, store.get(sem.w), store.get(sem.b)), |s, _| window(&a, s));
            if with_flow {
                let fl = &net.flow[l];
                let fo = bound(&a, affine(&fg[l], store.get(fl.w), store.get(fl.b)), |s, axis| {
                    if axis == 0 {
                        sizes[s].0 as f64
                    } else {
                        sizes[s].1 as f64
                    }
                });
                for (x, y) in off.data.iter_mut().zip(&fo.data) {
                    *x += y;
                }
            }
            let scales: Vec<usize> = if multi_scale { vec![0, 1, 2] } else { vec![l] };
            let want = oracle_attend(&a, &qg, &kg, &vg, &off, &scales);
            let err = max_diff(&att[l].value(), &want);
            worst = worst.max(err);
        }
    }
    worst
}

/// Same for self-attention with the feed-forward output zeroed, so the
/// block reduces to `x + O(attention)`.
pub fn self_attention_worst_error(seed: u64, configs: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let (cfg, (fh, fw)) = random_config(&mut rng);
        let a = cfg.attn.clone();
        let mut store = ParamStore::new();
        let net = SelfAttention::new(&mut store, &mut Init { rng: &mut rng }, &cfg);
        randomise(&mut store, &mut rng, if a.offset_norm { 0.7 } else { 1.5 });
        // Zero the feed-forward output so the block is x + O(attention).
        for ffn in &net.ffn {
            for id in [ffn.down.w, ffn.down.b] {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let sizes = level_sizes(fh, fw);
        let x = random_tokens(&mut rng, sizes, a.embed_dim);

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let (out, _) = net.forward(&ctx, &a, &pyramid(&tape, &x, sizes)).unwrap();

        let xg = grids(&x, sizes);
        let p = &net.proj;
        let proj = |g: &Grid, lin: &flowvos::nn::Linear| affine(g, store.get(lin.w), store.get(lin.b));
        let kg = [0, 1, 2].map(|l| proj(&xg[l], &p.k));
        let vg = [0, 1, 2].map(|l| proj(&xg[l], &p.v));
        for l in 0..3 {
            let qg = proj(&xg[l], &p.q);
            let off = bound(&a, proj(&qg, &net.offsets[l]), |s, _| window(&a, s));
            let att = oracle_attend(&a, &qg, &kg, &vg, &off, &[0, 1, 2]);
            let mut want = proj(&att, &p.o);
            for (w, x) in want.data.iter_mut().zip(&xg[l].data) {
                *w += x;
            }
            let err = max_diff(&out.levels[l].tokens.value(), &want);
            worst = worst.max(err);
        }
    }
    worst
}
