//! Wall-time scaling of the deformable operator against dense attention.
//!
//! Both methods receive the same already-projected query, key and value
//! pyramids of one frame pair, so shared linear projections are excluded and
//! the comparison isolates the attention operators. The deformable operator
//! includes its semantic and flow offset heads.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::adva::dense_attend;
use crate::config::{level_sizes, ModelConfig};
use crate::encoders::{Level, Pyramid};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    /// Square frame sides.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub config: ModelConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256],
            repeats: 5,
            warmup: 1,
            seed: 0,
            config: ModelConfig::base(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub size: usize,
    pub pixels: usize,
    pub tokens: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    /// Sample variance of the repeated timings, in s².
    pub variance_s2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of median time against pixel count.
    pub adva_exponent: f64,
    pub dense_exponent: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<7} {:>6} {:>8} {:>7} {:>12} {:>12} {:>12}\n",
            "method", "size", "pixels", "tokens", "median_s", "min_s", "var_s2"
        );
        for r in &self.rows {
            s += &format!(
                "{:<7} {:>6} {:>8} {:>7} {:>12.6} {:>12.6} {:>12.3e}\n",
                r.method, r.size, r.pixels, r.tokens, r.median_s, r.min_s, r.variance_s2
            );
        }
        s += &format!(
            "exponent adva  {:.3}\nexponent dense {:.3}\n",
            self.adva_exponent, self.dense_exponent
        );
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn random_pyramid<'t>(tape: &'t Tape<f32>, rng: &mut ChaCha8Rng, sizes: &[(usize, usize); 3], c: usize) -> Pyramid<'t, f32> {
    Pyramid {
        levels: [0, 1, 2].map(|l| {
            let (h, w) = sizes[l];
            Level {
                tokens: tape.constant(Tensor::randn(rng, &[h * w, c], 1.0)),
                h,
                w,
            }
        }),
    }
}

fn stack<'t>(p: &Pyramid<'t, f32>) -> Result<Var<'t, f32>> {
    Var::concat(&p.levels.map(|l| l.tokens), 0)
}

fn summarise(method: &str, size: usize, tokens: usize, mut t: Vec<f64>) -> BenchRow {
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let median = if n % 2 == 1 { t[n / 2] } else { 0.5 * (t[n / 2 - 1] + t[n / 2]) };
    let mean = t.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    BenchRow {
        method: method.into(),
        size,
        pixels: size * size,
        tokens,
        median_s: median,
        min_s: t[0],
        max_s: t[n - 1],
        variance_s2: variance,
    }
}

pub fn bench(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.sizes.len() < 2 || opts.repeats == 0 {
        return Err(Error::input("bench needs at least two sizes and one repeat"));
    }
    if let Some(&s) = opts.sizes.iter().find(|&&s| s < 32 || s % 32 != 0) {
        return Err(Error::input(format!("bench size {s} must be a positive multiple of 32")));
    }
    let model = Model::<f32>::new(opts.config.clone(), opts.seed)?;
    let cfg = &model.cfg;
    let c = cfg.embed_dim();
    let mut rows = Vec::new();
    for &size in &opts.sizes {
        let sizes = level_sizes(size, size);
        let tokens: usize = sizes.iter().map(|(h, w)| h * w).sum();
        let mut times = [Vec::new(), Vec::new()];
        for rep in 0..opts.warmup + opts.repeats {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.params, false);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ size as u64);
            let q = random_pyramid(&tape, &mut rng, &sizes, c);
            let k = random_pyramid(&tape, &mut rng, &sizes, c);
            let v = random_pyramid(&tape, &mut rng, &sizes, c);
            let flow = random_pyramid(&tape, &mut rng, &sizes, c);

            let start = Instant::now();
            let (att, _) = model.nets.cross.attend_projected(&ctx, &cfg.attn, true, &q, &k, &v, Some(&flow))?;
            std::hint::black_box(att.iter().map(|a| a.value_ref().data()[0]).sum::<f32>());
            let adva = start.elapsed().as_secs_f64();

            let (qs, ks, vs) = (stack(&q)?, stack(&k)?, stack(&v)?);
            let start = Instant::now();
            let (out, _) = dense_attend(qs, ks, vs, cfg.attn.heads)?;
            std::hint::black_box(out.value_ref().data()[0]);
            let dense = start.elapsed().as_secs_f64();

            if rep >= opts.warmup {
                times[0].push(adva);
                times[1].push(dense);
            }
        }
        let [a, d] = times;
        rows.push(summarise("adva", size, tokens, a));
        rows.push(summarise("dense", size, tokens, d));
    }
    let exponent = |m: &str| {
        let r: Vec<&BenchRow> = rows.iter().filter(|r| r.method == m).collect();
        let xs: Vec<f64> = r.iter().map(|r| r.pixels as f64).collect();
        let ys: Vec<f64> = r.iter().map(|r| r.median_s).collect();
        fit_exponent(&xs, &ys)
    };
    Ok(BenchReport {
        adva_exponent: exponent("adva"),
        dense_exponent: exponent("dense"),
        rows,
    })
}
