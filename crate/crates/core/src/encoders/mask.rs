use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, MAX_OBJECTS, NUM_CLASSES, STRIDES};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

use super::{Level, Pyramid};

/// Per-pixel object labels: 0 is background, 1..=15 are objects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl ObjectMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::input(format!(
                "mask of {h}x{w} needs {} labels, got {}",
                h * w,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > MAX_OBJECTS) {
            return Err(Error::input(format!("object label {bad} is outside 0..={MAX_OBJECTS}")));
        }
        Ok(Self { h, w, labels })
    }

    pub fn background(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    /// Sorted distinct non-background labels.
    pub fn object_ids(&self) -> Vec<u8> {
        let mut seen = [false; NUM_CLASSES];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..NUM_CLASSES as u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn binary(&self, id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }

    /// `[15, H, W]` indicator of labels 1..=15.
    pub fn onehot<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.h * self.w;
        let mut t = Tensor::zeros(&[MAX_OBJECTS, self.h, self.w]);
        let d = t.data_mut();
        for (p, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                d[(l as usize - 1) * hw + p] = T::one();
            }
        }
        t
    }

    /// Extend with background at the bottom and right.
    pub fn padded(&self, hp: usize, wp: usize) -> Self {
        let mut labels = vec![0; hp * wp];
        for y in 0..self.h.min(hp) {
            for x in 0..self.w.min(wp) {
                labels[y * wp + x] = self.get(y, x);
            }
        }
        Self { h: hp, w: wp, labels }
    }

    /// Top-left `h × w` window.
    pub fn crop(&self, h: usize, w: usize) -> Self {
        let (h, w) = (h.min(self.h), w.min(self.w));
        let labels = (0..h * w).map(|i| self.get(i / w, i % w)).collect();
        Self { h, w, labels }
    }

    pub fn relabel(&self, perm: &Permutation) -> Self {
        Self {
            labels: self.labels.iter().map(|&l| perm.apply(l)).collect(),
            ..self.clone()
        }
    }
}

/// Bijection on labels that keeps background fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Permutation([u8; NUM_CLASSES]);

impl Permutation {
    pub fn identity() -> Self {
        let mut p = [0u8; NUM_CLASSES];
        for (i, v) in p.iter_mut().enumerate() {
            *v = i as u8;
        }
        Self(p)
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut p = Self::identity();
        p.0[1..].shuffle(rng);
        p
    }

    pub fn from_table(table: [u8; NUM_CLASSES]) -> Result<Self> {
        let mut seen = [false; NUM_CLASSES];
        for &v in &table {
            if v as usize >= NUM_CLASSES || seen[v as usize] {
                return Err(Error::input("permutation table is not a bijection"));
            }
            seen[v as usize] = true;
        }
        if table[0] != 0 {
            return Err(Error::input("permutation must fix background"));
        }
        Ok(Self(table))
    }

    pub fn apply(&self, label: u8) -> u8 {
        self.0[label as usize]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = [0u8; NUM_CLASSES];
        for (i, &v) in self.0.iter().enumerate() {
            inv[v as usize] = i as u8;
        }
        Self(inv)
    }

    pub fn table(&self) -> [u8; NUM_CLASSES] {
        self.0
    }
}

/// Reassign object labels to a random permutation of the 15 slots. The
/// returned permutation maps old labels to new ones.
pub fn shuffle_channels(mask: &ObjectMask, seed: u64) -> (ObjectMask, Permutation) {
    let perm = Permutation::random(&mut ChaCha8Rng::seed_from_u64(seed));
    (mask.relabel(&perm), perm)
}

/// Convolutional mask encoder with a direct pooled one-hot path.
#[derive(Clone, Debug)]
pub struct MaskEncoder {
    pub stem: Conv,
    pub stages: [Conv; 4],
    pub proj: [Linear; 3],
    pub direct: [Linear; 3],
}

impl MaskEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let w = cfg.mask_widths;
        let c = cfg.embed_dim();
        let g = "mask_encoder";
        let stem = Conv::new(store, init, g, "mask_encoder.stem", MAX_OBJECTS, w[0], 3, 2);
        let stages = [0, 1, 2, 3].map(|i| Conv::new(store, init, g, &format!("mask_encoder.stage{}", i + 1), w[i], w[i + 1], 3, 2));
        let proj = [0, 1, 2].map(|l| Linear::new(store, init, g, &format!("mask_encoder.proj{l}"), w[l + 2], c));
        let direct = [0, 1, 2].map(|l| Linear::new(store, init, g, &format!("mask_encoder.direct{l}"), MAX_OBJECTS, c));
        Self {
            stem,
            stages,
            proj,
            direct,
        }
    }

    /// Embed a `[15, H, W]` one-hot (or soft) mask into a 3-level pyramid.
    pub fn encode<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, onehot: Var<'t, T>) -> Result<Pyramid<'t, T>> {
        let s = onehot.shape();
        if s.len() != 3 || s[0] != MAX_OBJECTS {
            return Err(Error::input(format!("expected a [{MAX_OBJECTS}, H, W] mask, got {s:?}")));
        }
        if !s[1].is_multiple_of(STRIDES[2]) || !s[2].is_multiple_of(STRIDES[2]) {
            return Err(Error::input(format!("mask {}x{} is not padded to a multiple of 32", s[1], s[2])));
        }
        let mut x = self.stem.forward(ctx, onehot)?.gelu()?;
        let mut maps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(ctx, x)?.gelu()?;
            if i >= 1 {
                maps.push(x);
            }
        }
        let raw = Pyramid::from_maps([maps[0], maps[1], maps[2]])?;
        raw.try_map(|l, lv| {
            let conv = self.proj[l].forward(ctx, lv.tokens)?;
            let pooled = Level::from_map(onehot.avg_pool(STRIDES[l])?)?;
            conv.add(self.direct[l].forward(ctx, pooled.tokens)?)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(ObjectMask::new(1, 2, vec![0, 16]).is_err());
        assert!(ObjectMask::new(1, 2, vec![0]).is_err());
        assert!(ObjectMask::new(1, 2, vec![0, 15]).is_ok());
    }

    #[test]
    fn onehot_places_labels_in_channels() {
        let m = ObjectMask::new(1, 3, vec![0, 1, 15]).unwrap();
        let t = m.onehot::<f32>();
        assert_eq!(t.shape(), &[15, 1, 3]);
        assert_eq!(t.at(&[0, 0, 1]), 1.0);
        assert_eq!(t.at(&[14, 0, 2]), 1.0);
        assert_eq!(t.data().iter().sum::<f32>(), 2.0);
    }

    #[test]
    fn permutation_round_trip() {
        let m = ObjectMask::new(2, 2, vec![0, 3, 7, 3]).unwrap();
        let (s, perm) = shuffle_channels(&m, 11);
        assert_eq!(s.labels()[0], 0);
        assert_eq!(s.relabel(&perm.inverse()), m);
        assert_eq!(s.object_ids().len(), 2);
        assert!(Permutation::from_table([1; NUM_CLASSES]).is_err());
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let m = ObjectMask::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let p = m.padded(4, 5);
        assert_eq!(p.get(3, 4), 0);
        assert_eq!(p.crop(2, 3), m);
    }

    /// The first convolution sees a shuffled mask exactly as the original mask
    /// seen through input channels permuted the same way.
    #[test]
    fn first_layer_is_equivariant_to_channel_shuffle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig::micro();
        let mut store = ParamStore::<f64>::new();
        let enc = MaskEncoder::new(&mut store, &mut Init { rng: &mut rng }, &cfg);
        let labels: Vec<u8> = (0..64).map(|i| [0u8, 2, 5, 9][i % 4]).collect();
        let m = ObjectMask::new(8, 8, labels).unwrap();
        let (s, perm) = shuffle_channels(&m, 5);

        let w = store.get(enc.stem.w).clone();
        let ws = w.shape().to_vec();
        // Channel k of the original mask lands in channel perm(k+1)-1.
        let permuted = Tensor::from_fn(&ws, |i| {
            let k = (i / (ws[2] * ws[3])) % ws[1];
            let o = i / (ws[1] * ws[2] * ws[3]);
            let rest = i % (ws[2] * ws[3]);
            let src = perm.apply(k as u8 + 1) as usize - 1;
            w.data()[(o * ws[1] + src) * ws[2] * ws[3] + rest]
        });
        let tape = Tape::new();
        let a = tape.constant(s.onehot()).conv2d(tape.constant(w), None, 2, 1).unwrap().value();
        let b = tape
            .constant(m.onehot())
            .conv2d(tape.constant(permuted), None, 2, 1)
            .unwrap()
            .value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
