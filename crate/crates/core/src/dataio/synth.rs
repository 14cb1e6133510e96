//! Textured moving shapes with exact masks and flows.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::MAX_OBJECTS;
use crate::encoders::ObjectMask;
use crate::error::{Error, Result};
use crate::flow::{Direction, FlowField};

use super::{FlowPair, Sequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// Per-frame motion, compounded from the starting pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Motion {
    /// `[dx, dy]` pixels per frame.
    pub translation: [f64; 2],
    /// Degrees per frame.
    pub rotation: f64,
    /// Multiplicative size change per frame.
    pub scale: f64,
}

impl Default for Motion {
    fn default() -> Self {
        Self {
            translation: [0.0, 0.0],
            rotation: 0.0,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// `[width, height]` in pixels at frame 0.
    pub size: [f64; 2],
    /// Centre `[x, y]` at frame 0, in pixel-centre coordinates.
    pub center: [f64; 2],
    #[serde(default)]
    pub angle: f64,
    #[serde(default)]
    pub motion: Motion,
}

/// A synthetic sequence. Later shapes are drawn in front of earlier ones;
/// shape `i` carries label `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(alias = "H")]
    pub height: usize,
    #[serde(alias = "W")]
    pub width: usize,
    #[serde(alias = "T")]
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    pub shapes: Vec<ShapeSpec>,
    /// Peak-to-peak amplitude of the per-texel shape noise, in 8-bit levels.
    #[serde(default = "default_contrast")]
    pub texture_contrast: f64,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_contrast() -> f64 {
    90.0
}

/// Texel edge in pixels for shape and background textures.
const TEXEL: f64 = 2.0;
const TEX_SIDE: usize = 128;

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.len() > MAX_OBJECTS {
            return Err(Error::input(format!(
                "{} shapes requested, at most {MAX_OBJECTS} supported",
                self.shapes.len()
            )));
        }
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::input("height, width and frames must be positive"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::input(format!("invalid sequence name {:?}", self.name)));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let nums = [s.size[0], s.size[1], s.center[0], s.center[1], s.angle]
                .into_iter()
                .chain(s.motion.translation)
                .chain([s.motion.rotation, s.motion.scale]);
            if nums.into_iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("shape {i} has non-finite parameters")));
            }
            if s.size[0] <= 0.0 || s.size[1] <= 0.0 || s.motion.scale <= 0.0 {
                return Err(Error::input(format!("shape {i} needs positive size and scale")));
            }
        }
        if !(0.0..=255.0).contains(&self.texture_contrast) {
            return Err(Error::input("texture_contrast must lie in [0, 255]"));
        }
        Ok(())
    }

    /// A single `size`-pixel square starting at `(x, y)` and translating by
    /// `(dx, dy)` per frame.
    pub fn moving_square(h: usize, w: usize, frames: usize, size: f64, start: [f64; 2], step: [f64; 2], seed: u64) -> Self {
        Self {
            name: "square".into(),
            height: h,
            width: w,
            frames,
            seed,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Rect,
                size: [size, size],
                center: start,
                angle: 0.0,
                motion: Motion {
                    translation: step,
                    ..Motion::default()
                },
            }],
            texture_contrast: default_contrast(),
        }
    }
}

fn shape(kind: ShapeKind, size: [f64; 2], center: [f64; 2], angle: f64, motion: Motion) -> ShapeSpec {
    ShapeSpec {
        kind,
        size,
        center,
        angle,
        motion,
    }
}

fn moving(translation: [f64; 2], rotation: f64, scale: f64) -> Motion {
    Motion {
        translation,
        rotation,
        scale,
    }
}

fn suite_spec(name: &str, (h, w, frames): (usize, usize, usize), seed: u64, shapes: Vec<ShapeSpec>) -> SynthSpec {
    SynthSpec {
        name: name.into(),
        height: h,
        width: w,
        frames,
        seed,
        shapes,
        texture_contrast: default_contrast(),
    }
}

/// Moderate-motion sequences: 64×128, 12 frames, up to three objects moving
/// a few pixels per frame with some rotation and scaling.
pub fn standard_suite(seed: u64) -> Vec<SynthSpec> {
    use ShapeKind::{Ellipse, Rect};
    let dims = (64, 128, 12);
    vec![
        suite_spec(
            "std-square",
            dims,
            seed,
            vec![shape(Rect, [22.0, 22.0], [24.0, 30.0], 0.0, moving([5.0, 1.0], 0.0, 1.0))],
        ),
        suite_spec(
            "std-ellipse",
            dims,
            seed + 1,
            vec![shape(Ellipse, [30.0, 20.0], [96.0, 32.0], 10.0, moving([-4.0, 0.5], 3.0, 1.01))],
        ),
        suite_spec(
            "std-pair",
            dims,
            seed + 2,
            vec![
                shape(Rect, [20.0, 26.0], [20.0, 36.0], 0.0, moving([4.0, -1.0], 2.0, 1.0)),
                shape(Ellipse, [24.0, 18.0], [100.0, 26.0], 0.0, moving([-3.0, 1.5], 0.0, 0.99)),
            ],
        ),
    ]
}

/// Fast translation: 64×256, 6 frames, objects moving 36 to 40 pixels per
/// frame, more than four stride-8 cells.
pub fn fast_motion_suite(seed: u64) -> Vec<SynthSpec> {
    use ShapeKind::{Ellipse, Rect};
    let dims = (64, 256, 6);
    vec![
        suite_spec(
            "fast-right",
            dims,
            seed,
            vec![shape(Rect, [22.0, 22.0], [22.0, 30.0], 0.0, moving([38.0, 0.0], 0.0, 1.0))],
        ),
        suite_spec(
            "fast-left",
            dims,
            seed + 1,
            vec![shape(Ellipse, [26.0, 20.0], [230.0, 34.0], 0.0, moving([-40.0, 1.0], 0.0, 1.0))],
        ),
        suite_spec(
            "fast-pair",
            dims,
            seed + 2,
            vec![
                shape(Rect, [20.0, 20.0], [20.0, 20.0], 0.0, moving([36.0, 1.5], 0.0, 1.0)),
                shape(Ellipse, [24.0, 18.0], [232.0, 44.0], 0.0, moving([-36.0, -1.5], 0.0, 1.0)),
            ],
        ),
    ]
}

/// Similarity pose `p = c + s·R(θ)·u` of a shape at one frame.
#[derive(Clone, Copy, Debug)]
struct Pose {
    c: [f64; 2],
    s: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    fn at(shape: &ShapeSpec, t: usize) -> Self {
        let tf = t as f64;
        let m = &shape.motion;
        let theta = (shape.angle + tf * m.rotation).to_radians();
        let (sin, cos) = if theta == 0.0 { (0.0, 1.0) } else { theta.sin_cos() };
        Self {
            c: [shape.center[0] + tf * m.translation[0], shape.center[1] + tf * m.translation[1]],
            s: m.scale.powi(t as i32),
            cos,
            sin,
        }
    }

    fn to_local(self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.c[0]) / self.s, (y - self.c[1]) / self.s);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    fn to_image(self, u: f64, v: f64) -> (f64, f64) {
        (
            self.c[0] + self.s * (self.cos * u - self.sin * v),
            self.c[1] + self.s * (self.sin * u + self.cos * v),
        )
    }
}

fn inside(shape: &ShapeSpec, u: f64, v: f64) -> bool {
    let (hw, hh) = (shape.size[0] / 2.0, shape.size[1] / 2.0);
    match shape.kind {
        ShapeKind::Rect => (-hw..hw).contains(&u) && (-hh..hh).contains(&v),
        ShapeKind::Ellipse => (u / hw).powi(2) + (v / hh).powi(2) < 1.0,
    }
}

struct Texture {
    base: [f64; 3],
    noise: Vec<[f64; 3]>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, base_range: (f64, f64), contrast: f64) -> Self {
        let base = [0; 3].map(|_| rng.gen_range(base_range.0..base_range.1));
        let noise = (0..TEX_SIDE * TEX_SIDE)
            .map(|_| [0; 3].map(|_| (rng.gen::<f64>() - 0.5) * contrast))
            .collect();
        Self { base, noise }
    }

    fn color(&self, u: f64, v: f64) -> Rgb<u8> {
        let cell = |a: f64| ((a / TEXEL).floor() as i64).rem_euclid(TEX_SIDE as i64) as usize;
        let n = self.noise[cell(v) * TEX_SIDE + cell(u)];
        Rgb([0, 1, 2].map(|c| (self.base[c] + n[c]).round().clamp(0.0, 255.0) as u8))
    }
}

/// Which shape covers pixel `(x, y)` at pose set `poses`: the front-most
/// one, as an index into `shapes`.
fn owner(shapes: &[ShapeSpec], poses: &[Pose], x: f64, y: f64) -> Option<usize> {
    (0..shapes.len()).rev().find(|&i| {
        let (u, v) = poses[i].to_local(x, y);
        inside(&shapes[i], u, v)
    })
}

/// Render the sequence described by `spec`: frames, masks for every frame
/// and flows for every adjacent pair. Background pixels have zero flow;
/// object pixels carry their owner's exact similarity motion.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Sequence> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = Texture::random(&mut rng, (60.0, 120.0), spec.texture_contrast * 0.5);
    let textures: Vec<Texture> = spec
        .shapes
        .iter()
        .map(|_| Texture::random(&mut rng, (70.0, 190.0), spec.texture_contrast))
        .collect();
    let poses: Vec<Vec<Pose>> = (0..spec.frames)
        .map(|t| spec.shapes.iter().map(|s| Pose::at(s, t)).collect())
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut owners = Vec::with_capacity(spec.frames);
    for pose in &poses {
        let mut img = RgbImage::new(w as u32, h as u32);
        let mut own = vec![None; h * w];
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let o = owner(&spec.shapes, pose, xf, yf);
                let px = match o {
                    Some(i) => {
                        let (u, v) = pose[i].to_local(xf, yf);
                        textures[i].color(u, v)
                    }
                    None => background.color(xf, yf),
                };
                img.put_pixel(x as u32, y as u32, px);
                own[y * w + x] = o;
            }
        }
        let labels = own.iter().map(|o| o.map_or(0, |i| i as u8 + 1)).collect();
        masks.push(Some(ObjectMask::new(h, w, labels)?));
        frames.push(img);
        owners.push(own);
    }

    let mut flows = Vec::with_capacity(spec.frames.saturating_sub(1));
    for t in 0..spec.frames.saturating_sub(1) {
        let mut dir = FlowField::zeros(h, w, Direction::Direct);
        let mut inv = FlowField::zeros(h, w, Direction::Inverse);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let p = y * w + x;
                if let Some(i) = owners[t][p] {
                    let (u, v) = poses[t][i].to_local(xf, yf);
                    let (nx, ny) = poses[t + 1][i].to_image(u, v);
                    dir.u[p] = (nx - xf) as f32;
                    dir.v[p] = (ny - yf) as f32;
                }
                if let Some(i) = owners[t + 1][p] {
                    let (u, v) = poses[t + 1][i].to_local(xf, yf);
                    let (px, py) = poses[t][i].to_image(u, v);
                    inv.u[p] = (px - xf) as f32;
                    inv.v[p] = (py - yf) as f32;
                }
            }
        }
        flows.push(FlowPair { direct: dir, inverse: inv });
    }

    Ok(Sequence {
        name: spec.name.clone(),
        frames,
        annotations: masks,
        flows: Some(flows),
    })
}
