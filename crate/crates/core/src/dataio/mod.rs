//! DAVIS-layout sequence directories and synthetic sequences.
//!
//! Layout under a dataset root:
//!
//! ```text
//! JPEGImages/[480p/]<seq>/00000.jpg|png
//! Annotations/[480p/]<seq>/00000.png   indexed palette, index = object label
//! flow/<seq>/00000_dir.flo             frame 0 → 1, on frame 0's grid
//! flow/<seq>/00000_inv.flo             frame 1 → 0, on frame 1's grid
//! synth/<seq>.json                     generator spec of a synthetic sequence
//! ```

mod maskpng;
mod synth;

pub use maskpng::{davis_palette, read_mask_png, read_png_text, write_mask_png};
pub use synth::{fast_motion_suite, gen_synthetic, standard_suite, Motion, ShapeKind, ShapeSpec, SynthSpec};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::encoders::ObjectMask;
use crate::error::{Error, Result};
use crate::flow::{read_flo, write_flo, Direction, FlowField};

/// Flows between frames `t` and `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub direct: FlowField,
    pub inverse: FlowField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    /// One slot per frame; frame 0 is always annotated.
    pub annotations: Vec<Option<ObjectMask>>,
    /// One pair per adjacent frame pair, when available.
    pub flows: Option<Vec<FlowPair>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of every frame.
    pub fn size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.height() as usize, f.width() as usize))
    }

    pub fn first_annotation(&self) -> Result<&ObjectMask> {
        self.annotations
            .first()
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::input(format!("sequence {:?} has no frame-0 annotation", self.name)))
    }

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::input(format!("sequence {:?} has no frames", self.name)));
        }
        let (h, w) = self.size();
        if let Some(i) = self.frames.iter().position(|f| (f.height() as usize, f.width() as usize) != (h, w)) {
            let f = &self.frames[i];
            return Err(Error::input(format!(
                "frame {i} is {}x{}, frame 0 is {h}x{w}",
                f.height(),
                f.width()
            )));
        }
        if self.annotations.len() != self.frames.len() {
            return Err(Error::input("annotation slots do not match frame count"));
        }
        self.first_annotation()?;
        for (i, m) in self.annotations.iter().enumerate() {
            if let Some(m) = m {
                if (m.height(), m.width()) != (h, w) {
                    return Err(Error::input(format!(
                        "annotation {i} is {}x{}, frames are {h}x{w}",
                        m.height(),
                        m.width()
                    )));
                }
            }
        }
        if let Some(flows) = &self.flows {
            if flows.len() + 1 != self.frames.len() {
                return Err(Error::input(format!("{} flow pairs for {} frames", flows.len(), self.frames.len())));
            }
            for (i, f) in flows.iter().enumerate() {
                for ff in [&f.direct, &f.inverse] {
                    if (ff.h, ff.w) != (h, w) {
                        return Err(Error::input(format!("flow {i} is {}x{}, frames are {h}x{w}", ff.h, ff.w)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether every frame carries a ground-truth mask.
    pub fn fully_annotated(&self) -> bool {
        self.annotations.iter().all(Option::is_some)
    }
}

fn frame_name(i: usize) -> String {
    format!("{i:05}")
}

/// `<root>/<kind>/480p/<seq>` if it exists, else `<root>/<kind>/<seq>`.
fn resolve(root: &Path, kind: &str, seq: &str) -> PathBuf {
    let hi = root.join(kind).join("480p").join(seq);
    if hi.is_dir() {
        hi
    } else {
        root.join(kind).join(seq)
    }
}

/// Names of the sequences under `<root>/JPEGImages`, sorted.
pub fn list_sequences(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let root = root.as_ref();
    let base = root.join("JPEGImages");
    let dir = if base.join("480p").is_dir() { base.join("480p") } else { base };
    if !dir.is_dir() {
        return Err(Error::input(format!("{} has no JPEGImages directory", root.display())));
    }
    let mut names = Vec::new();
    for e in fs::read_dir(&dir)? {
        let e = e?;
        if e.file_type()?.is_dir() {
            names.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Files in `dir` with one of `exts`, keyed by their numeric stem.
fn indexed_files(dir: &Path, exts: &[&str]) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let ext = p.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|x| exts.contains(&x.as_str())) {
            continue;
        }
        if let Some(i) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            if out.insert(i, p.clone()).is_some() {
                return Err(Error::input(format!("duplicate frame index {i} in {}", dir.display())));
            }
        }
    }
    Ok(out)
}

/// Load sequence `name` from a dataset root. With `name = None` the root must
/// hold exactly one sequence.
pub fn load_sequence(root: impl AsRef<Path>, name: Option<&str>) -> Result<Sequence> {
    let root = root.as_ref();
    let name = match name {
        Some(n) => n.to_string(),
        None => {
            let all = list_sequences(root)?;
            match all.as_slice() {
                [one] => one.clone(),
                [] => return Err(Error::input(format!("no sequences under {}", root.display()))),
                _ => {
                    return Err(Error::usage(format!(
                        "{} holds {} sequences; pick one of {}",
                        root.display(),
                        all.len(),
                        all.join(", ")
                    )))
                }
            }
        }
    };
    let img_dir = resolve(root, "JPEGImages", &name);
    if !img_dir.is_dir() {
        return Err(Error::input(format!("missing frame directory {}", img_dir.display())));
    }
    let frame_files = indexed_files(&img_dir, &["jpg", "jpeg", "png"])?;
    if frame_files.is_empty() {
        return Err(Error::input(format!("no frames in {}", img_dir.display())));
    }
    let mut frames = Vec::with_capacity(frame_files.len());
    let mut position = BTreeMap::new();
    for (k, (idx, path)) in frame_files.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
            .to_rgb8();
        if let Some(first) = frames.first() {
            let first: &RgbImage = first;
            if img.dimensions() != first.dimensions() {
                return Err(Error::input(format!(
                    "mixed frame sizes: {} is {}x{}, first frame is {}x{}",
                    path.display(),
                    img.height(),
                    img.width(),
                    first.height(),
                    first.width()
                )));
            }
        }
        frames.push(img);
        position.insert(*idx, k);
    }

    let first_idx = *frame_files.keys().next().expect("non-empty");
    let ann_dir = resolve(root, "Annotations", &name);
    let ann_files = if ann_dir.is_dir() {
        indexed_files(&ann_dir, &["png"])?
    } else {
        BTreeMap::new()
    };
    if !ann_files.contains_key(&first_idx) {
        return Err(Error::input(format!(
            "missing first-frame annotation {}/{}.png",
            ann_dir.display(),
            frame_name(first_idx)
        )));
    }
    let mut annotations = vec![None; frames.len()];
    for (idx, path) in &ann_files {
        if let Some(&k) = position.get(idx) {
            annotations[k] = Some(read_mask_png(path)?);
        }
    }

    let flow_dir = root.join("flow").join(&name);
    let flows = if flow_dir.is_dir() {
        Some(read_flow_dir(&flow_dir, &frame_files.keys().copied().collect::<Vec<_>>())?)
    } else {
        None
    };
    let seq = Sequence {
        name,
        frames,
        annotations,
        flows,
    };
    seq.validate()?;
    Ok(seq)
}

fn read_flow_dir(dir: &Path, indices: &[usize]) -> Result<Vec<FlowPair>> {
    indices
        .windows(2)
        .map(|pair| {
            let stem = frame_name(pair[0]);
            Ok(FlowPair {
                direct: read_flo(dir.join(format!("{stem}_dir.flo")), Direction::Direct)?,
                inverse: read_flo(dir.join(format!("{stem}_inv.flo")), Direction::Inverse)?,
            })
        })
        .collect()
}

/// Write a sequence under `root` in the layout above: PNG frames, indexed
/// annotations and, when present, `.flo` flows. `text` is embedded in every
/// annotation PNG.
pub fn save_sequence(root: impl AsRef<Path>, seq: &Sequence, text: &[(&str, &str)]) -> Result<()> {
    seq.validate()?;
    let root = root.as_ref();
    let img_dir = root.join("JPEGImages").join(&seq.name);
    let ann_dir = root.join("Annotations").join(&seq.name);
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&ann_dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        let path = img_dir.join(format!("{}.png", frame_name(i)));
        f.save(&path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    for (i, m) in seq.annotations.iter().enumerate() {
        if let Some(m) = m {
            write_mask_png(ann_dir.join(format!("{}.png", frame_name(i))), m, text)?;
        }
    }
    if let Some(flows) = &seq.flows {
        let flow_dir = root.join("flow").join(&seq.name);
        fs::create_dir_all(&flow_dir)?;
        for (i, f) in flows.iter().enumerate() {
            write_flo(flow_dir.join(format!("{}_dir.flo", frame_name(i))), &f.direct)?;
            write_flo(flow_dir.join(format!("{}_inv.flo", frame_name(i))), &f.inverse)?;
        }
    }
    Ok(())
}

/// Write predicted masks as `<dir>/%05d.png`, embedding `text`.
pub fn save_masks(dir: impl AsRef<Path>, masks: &[(usize, ObjectMask)], text: &[(&str, &str)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, m) in masks {
        write_mask_png(dir.join(format!("{}.png", frame_name(*i))), m, text)?;
    }
    Ok(())
}

/// Read every `%05d.png` mask in `dir`, keyed by frame index.
pub fn load_masks(dir: impl AsRef<Path>) -> Result<BTreeMap<usize, ObjectMask>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::input(format!("missing mask directory {}", dir.display())));
    }
    indexed_files(dir, &["png"])?
        .into_iter()
        .map(|(i, path)| Ok((i, read_mask_png(path)?)))
        .collect()
}

/// Store the generator spec next to a saved synthetic sequence so that exact
/// flow can be regenerated later.
pub fn save_synth_spec(root: impl AsRef<Path>, spec: &SynthSpec) -> Result<()> {
    let dir = root.as_ref().join("synth");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(format!("{}.json", spec.name)), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

/// The stored generator spec of sequence `name`, if there is one.
pub fn load_synth_spec(root: impl AsRef<Path>, name: &str) -> Result<Option<SynthSpec>> {
    let path = root.as_ref().join("synth").join(format!("{name}.json"));
    if !path.is_file() {
        return Ok(None);
    }
    SynthSpec::from_json(&fs::read_to_string(&path)?).map(Some)
}

#[cfg(test)]
mod tests;
