//! Dense displacement fields: synthetic oracle flows, `.flo` IO and the
//! multi-scale flow representation fed to the matcher.

mod embed;
mod flo;

pub use embed::{flow_levels, FlowEncoder};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which frame pair a field relates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Previous → current, defined on the previous frame's grid.
    Direct,
    /// Current → previous, defined on the current frame's grid.
    Inverse,
}

/// Per-pixel displacement in input pixels; `u` is along columns (x), `v`
/// along rows (y).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub direction: Direction,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize, direction: Direction) -> Self {
        Self {
            h,
            w,
            u: vec![0.0; h * w],
            v: vec![0.0; h * w],
            direction,
        }
    }

    pub fn new(h: usize, w: usize, u: Vec<f32>, v: Vec<f32>, direction: Direction) -> Result<Self> {
        if u.len() != h * w || v.len() != h * w {
            return Err(Error::input(format!("flow components do not match {h}x{w}")));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::input("flow contains non-finite values"));
        }
        Ok(Self { h, w, u, v, direction })
    }

    /// `(dx, dy)` at pixel `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.w + x;
        (self.u[i], self.v[i])
    }

    /// Bilinear lookup with edge clamping; returns `(dx, dy)`.
    pub fn sample(&self, y: f64, x: f64) -> (f64, f64) {
        let yc = y.clamp(0.0, (self.h - 1) as f64);
        let xc = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = (yc - y0 as f64, xc - x0 as f64);
        let lerp = |c: &[f32]| {
            let g = |yy: usize, xx: usize| c[yy * self.w + xx] as f64;
            (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
        };
        (lerp(&self.u), lerp(&self.v))
    }

    /// Copy with i.i.d. Gaussian noise of deviation `sigma` px on both
    /// components.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::input(format!("noise deviation {sigma} is invalid")));
        }
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::input(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for x in out.u.iter_mut().chain(out.v.iter_mut()) {
            *x += normal.sample(&mut rng) as f32;
        }
        Ok(out)
    }

    /// Zero-extend at the bottom and right.
    pub fn padded(&self, hp: usize, wp: usize) -> Self {
        let mut out = Self::zeros(hp, wp, self.direction);
        for y in 0..self.h.min(hp) {
            for x in 0..self.w.min(wp) {
                out.u[y * wp + x] = self.u[y * self.w + x];
                out.v[y * wp + x] = self.v[y * self.w + x];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f32 {
        self.u.iter().chain(&self.v).fold(0.0f32, |m, x| m.max(x.abs()))
    }
}

/// Geometric transform between two frames, in pixel coordinates with the
/// origin at the centre of the top-left pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Translation {
        dx: f64,
        dy: f64,
    },
    /// Rotation about `center` (`[x, y]`, default frame centre); positive
    /// angles turn the x axis towards the y axis.
    Rotation {
        degrees: f64,
        #[serde(default)]
        center: Option<[f64; 2]>,
    },
    /// `x' = m[0][0] x + m[0][1] y + m[0][2]`, `y' = m[1][0] x + m[1][1] y + m[1][2]`.
    Affine {
        m: [[f64; 3]; 2],
    },
    /// Smooth random displacement: per-node vectors on a `cells × cells`
    /// lattice, bilinearly interpolated.
    Deformation {
        cells: usize,
        amplitude: f64,
        seed: u64,
    },
}

/// Fixed-point iterations used to invert non-affine deformations.
pub const INVERSE_ITERATIONS: usize = 10;

/// Residual tolerance of the fixed-point inverse, in pixels.
pub const INVERSE_TOLERANCE: f64 = 1e-3;

enum Resolved {
    Affine([[f64; 3]; 2]),
    Lattice {
        gy: usize,
        gx: usize,
        sy: f64,
        sx: f64,
        nodes: Vec<(f64, f64)>,
    },
}

impl Resolved {
    fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Resolved::Affine(m) => (m[0][0] * x + m[0][1] * y + m[0][2] - x, m[1][0] * x + m[1][1] * y + m[1][2] - y),
            Resolved::Lattice { gy, gx, sy, sx, nodes } => {
                let fy = (y / sy).clamp(0.0, (*gy - 1) as f64);
                let fx = (x / sx).clamp(0.0, (*gx - 1) as f64);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(gy - 1), (x0 + 1).min(gx - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let n = |yy: usize, xx: usize| nodes[yy * gx + xx];
                let mix = |f: fn((f64, f64)) -> f64| {
                    (1.0 - ty) * ((1.0 - tx) * f(n(y0, x0)) + tx * f(n(y0, x1))) + ty * ((1.0 - tx) * f(n(y1, x0)) + tx * f(n(y1, x1)))
                };
                (mix(|p| p.0), mix(|p| p.1))
            }
        }
    }
}

impl Transform {
    fn resolve(&self, h: usize, w: usize) -> Result<Resolved> {
        let center = |c: &Option<[f64; 2]>| c.unwrap_or([(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0]);
        let m = match self {
            Transform::Identity => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            Transform::Translation { dx, dy } => [[1.0, 0.0, *dx], [0.0, 1.0, *dy]],
            Transform::Rotation { degrees, center: c } => {
                let [cx, cy] = center(c);
                let (s, co) = degrees.to_radians().sin_cos();
                [[co, -s, cx - co * cx + s * cy], [s, co, cy - s * cx - co * cy]]
            }
            Transform::Affine { m } => *m,
            Transform::Deformation { cells, amplitude, seed } => {
                if *cells == 0 || !amplitude.is_finite() || *amplitude < 0.0 {
                    return Err(Error::input("deformation needs cells ≥ 1 and a finite amplitude ≥ 0"));
                }
                let (gy, gx) = (cells + 1, cells + 1);
                let sy = ((h - 1).max(1)) as f64 / *cells as f64;
                let sx = ((w - 1).max(1)) as f64 / *cells as f64;
                // Displacement must be a contraction for the inverse to exist
                // and for the fixed-point iteration to converge.
                if 2.0 * amplitude / sy.min(sx) >= 0.25 {
                    return Err(Error::input(format!(
                        "deformation amplitude {amplitude} is too large for {cells} cells on {h}x{w}; not invertible"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let nodes = (0..gy * gx)
                    .map(|_| (rng.gen_range(-amplitude..=*amplitude), rng.gen_range(-amplitude..=*amplitude)))
                    .collect();
                return Ok(Resolved::Lattice { gy, gx, sy, sx, nodes });
            }
        };
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("transform has non-finite parameters"));
        }
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-9 {
            return Err(Error::input("affine transform is not invertible"));
        }
        Ok(Resolved::Affine(m))
    }

    /// Image of pixel `(x, y)` under the transform.
    pub fn apply(&self, x: f64, y: f64, h: usize, w: usize) -> Result<(f64, f64)> {
        let (dx, dy) = self.resolve(h, w)?.displacement(x, y);
        Ok((x + dx, y + dy))
    }
}

fn affine_inverse(m: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    [[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]]
}

/// Direct (`T(p) − p`) and inverse (`T⁻¹(p) − p`) flows of a transform on an
/// `h × w` grid.
pub fn synth_flow(t: &Transform, h: usize, w: usize) -> Result<(FlowField, FlowField)> {
    if h == 0 || w == 0 {
        return Err(Error::input("flow grid must be non-empty"));
    }
    let r = t.resolve(h, w)?;
    let mut dir = FlowField::zeros(h, w, Direction::Direct);
    let mut inv = FlowField::zeros(h, w, Direction::Inverse);
    let inverse = match &r {
        Resolved::Affine(m) => Some(Resolved::Affine(affine_inverse(m))),
        Resolved::Lattice { .. } => None,
    };
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let i = y * w + x;
            let (dx, dy) = r.displacement(xf, yf);
            dir.u[i] = dx as f32;
            dir.v[i] = dy as f32;
            let (ix, iy) = match &inverse {
                Some(ri) => ri.displacement(xf, yf),
                None => {
                    // q solves q + d(q) = p.
                    let (mut qx, mut qy) = (xf, yf);
                    for _ in 0..INVERSE_ITERATIONS {
                        let (ddx, ddy) = r.displacement(qx, qy);
                        qx = xf - ddx;
                        qy = yf - ddy;
                    }
                    (qx - xf, qy - yf)
                }
            };
            inv.u[i] = ix as f32;
            inv.v[i] = iy as f32;
        }
    }
    Ok((dir, inv))
}
