//! Indexed-palette PNG masks in the DAVIS convention.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::encoders::ObjectMask;
use crate::error::{Error, Result};

/// The 256-entry palette used by DAVIS annotations (index 1 is dark red).
pub fn davis_palette() -> [[u8; 3]; 256] {
    let mut pal = [[0u8; 3]; 256];
    for (i, entry) in pal.iter_mut().enumerate() {
        let mut c = i;
        for j in 0..8 {
            for (ch, v) in entry.iter_mut().enumerate() {
                *v |= (((c >> ch) & 1) as u8) << (7 - j);
            }
            c >>= 3;
        }
    }
    pal
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(format!("{}: {e}", path.display()))
}

/// Write an 8-bit indexed PNG with the DAVIS palette. `text` entries become
/// tEXt chunks.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &ObjectMask, text: &[(&str, &str)]) -> Result<()> {
    let path = path.as_ref();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, mask.width() as u32, mask.height() as u32);
    enc.set_color(ColorType::Indexed);
    enc.set_depth(BitDepth::Eight);
    enc.set_palette(davis_palette().concat());
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(|e| png_err(path, e))?;
    }
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(mask.labels()).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

/// Raw per-pixel values of an indexed or 8-bit grayscale PNG, plus the
/// image size `(h, w)`.
fn read_indices(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = match (info.color_type, info.bit_depth) {
        (ColorType::Indexed, d) => d as usize,
        (ColorType::Grayscale, BitDepth::Eight) => 8,
        (c, d) => {
            return Err(png_err(
                path,
                format!("expected an indexed or 8-bit grayscale mask, got {c:?} at {d:?}"),
            ));
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            let bit = x * bits;
            let byte = row[bit / 8];
            let shift = 8 - bits - bit % 8;
            out.push((byte >> shift) & ((1u16 << bits) - 1) as u8);
        }
    }
    Ok((h, w, out))
}

/// Read a mask whose palette indices are object labels. More than 15
/// distinct objects, or any index above 15, is rejected.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<ObjectMask> {
    let path = path.as_ref();
    let (h, w, idx) = read_indices(path)?;
    let mut seen = [false; 256];
    for &i in &idx {
        seen[i as usize] = true;
    }
    let distinct = seen[1..].iter().filter(|&&s| s).count();
    if distinct > crate::config::MAX_OBJECTS {
        return Err(Error::input(format!(
            "{}: {distinct} distinct object indices, at most {} supported",
            path.display(),
            crate::config::MAX_OBJECTS
        )));
    }
    ObjectMask::new(h, w, idx).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

/// tEXt chunks of a PNG as `(keyword, text)` pairs.
pub fn read_png_text(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let reader = dec.read_info().map_err(|e| png_err(path, e))?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|c| (c.keyword.clone(), c.text.clone()))
        .collect())
}
