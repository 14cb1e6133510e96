use std::fs::File;
use std::io::BufWriter;

use super::*;
use crate::flow::synth_flow;
use crate::flow::Transform;

fn spec_json(shapes: &str, frames: usize) -> String {
    format!(r#"{{"name": "toy", "height": 40, "width": 64, "frames": {frames}, "seed": 3, "shapes": [{shapes}]}}"#)
}

fn centroid(m: &ObjectMask, id: u8) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) == id {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    (sx / n, sy / n)
}

#[test]
fn palette_matches_davis_colours() {
    let p = davis_palette();
    assert_eq!(p[0], [0, 0, 0]);
    assert_eq!(p[1], [128, 0, 0]);
    assert_eq!(p[2], [0, 128, 0]);
    assert_eq!(p[3], [128, 128, 0]);
    assert_eq!(p[4], [0, 0, 128]);
    assert_eq!(p[8], [64, 0, 0]);
    assert_eq!(p[255], [224, 224, 192]);
}

#[test]
fn mask_png_round_trip_keeps_labels_and_text() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    let labels: Vec<u8> = (0..6 * 7).map(|i| (i % 16) as u8).collect();
    let m = ObjectMask::new(6, 7, labels).unwrap();
    write_mask_png(&path, &m, &[("run", "{\"seed\":1}")]).unwrap();
    assert_eq!(read_mask_png(&path).unwrap(), m);
    assert_eq!(read_png_text(&path).unwrap(), vec![("run".to_string(), "{\"seed\":1}".to_string())]);
}

fn write_raw_png(path: &Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, rows: &[u8]) {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path).unwrap()), w, h);
    enc.set_color(color);
    enc.set_depth(depth);
    if color == png::ColorType::Indexed {
        enc.set_palette(davis_palette().concat());
    }
    let mut wr = enc.write_header().unwrap();
    wr.write_image_data(rows).unwrap();
    wr.finish().unwrap();
}

#[test]
fn low_bit_depth_and_grayscale_masks_are_read() {
    let dir = tempfile::tempdir().unwrap();
    // 4-bit indexed, 3 px wide: each row packs into 2 bytes.
    let p4 = dir.path().join("four.png");
    write_raw_png(&p4, 3, 2, png::ColorType::Indexed, png::BitDepth::Four, &[0x12, 0x30, 0x0f, 0x50]);
    assert_eq!(read_mask_png(&p4).unwrap().labels(), &[1, 2, 3, 0, 15, 5]);
    let p2 = dir.path().join("two.png");
    write_raw_png(&p2, 5, 1, png::ColorType::Indexed, png::BitDepth::Two, &[0b0001_1011, 0b1100_0000]);
    assert_eq!(read_mask_png(&p2).unwrap().labels(), &[0, 1, 2, 3, 3]);
    let pg = dir.path().join("gray.png");
    write_raw_png(&pg, 2, 1, png::ColorType::Grayscale, png::BitDepth::Eight, &[0, 7]);
    assert_eq!(read_mask_png(&pg).unwrap().labels(), &[0, 7]);
}

#[test]
fn more_than_fifteen_indices_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("many.png");
    let rows: Vec<u8> = (0..17).collect();
    write_raw_png(&p, 17, 1, png::ColorType::Indexed, png::BitDepth::Eight, &rows);
    let err = read_mask_png(&p).unwrap_err();
    assert!(matches!(err, Error::Input(ref m) if m.contains("16 distinct")), "{err}");
    let p = dir.path().join("high.png");
    write_raw_png(&p, 2, 1, png::ColorType::Indexed, png::BitDepth::Eight, &[0, 200]);
    assert!(matches!(read_mask_png(&p), Err(Error::Input(_))));
}

#[test]
fn rgb_mask_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rgb.png");
    write_raw_png(&p, 1, 1, png::ColorType::Rgb, png::BitDepth::Eight, &[1, 2, 3]);
    assert!(matches!(read_mask_png(&p), Err(Error::Format(_))));
}

#[test]
fn square_centroid_advances_exactly() {
    let spec = SynthSpec::moving_square(40, 64, 5, 8.0, [10.0, 20.0], [2.0, 0.0], 1);
    let seq = gen_synthetic(&spec).unwrap();
    assert_eq!(seq.len(), 5);
    let c0 = centroid(seq.annotations[0].as_ref().unwrap(), 1);
    for t in 1..5 {
        let c = centroid(seq.annotations[t].as_ref().unwrap(), 1);
        assert_eq!((c.0 - c0.0, c.1 - c0.1), (2.0 * t as f64, 0.0));
    }
    let m = seq.annotations[0].as_ref().unwrap();
    assert_eq!(m.labels().iter().filter(|&&l| l == 1).count(), 64);
    let f = &seq.flows.as_ref().unwrap()[0];
    let (dx, dy) = f.direct.at(20, 10);
    assert_eq!((dx, dy), (2.0, 0.0));
    assert_eq!(f.inverse.at(20, 12), (-2.0, 0.0));
    assert_eq!(f.direct.at(0, 0), (0.0, 0.0));
}

#[test]
fn front_shape_owns_overlap() {
    let shapes = r#"
        {"kind": "rect", "size": [12, 12], "center": [10, 20], "motion": {"translation": [3, 0]}},
        {"kind": "ellipse", "size": [14, 10], "center": [54, 20], "motion": {"translation": [-3, 0]}}
    "#;
    let spec = SynthSpec::from_json(&spec_json(shapes, 12)).unwrap();
    let seq = gen_synthetic(&spec).unwrap();
    let mut overlapped = false;
    for (t, m) in seq.annotations.iter().enumerate() {
        let m = m.as_ref().unwrap();
        let (cr, ce) = (10.0 + 3.0 * t as f64, 54.0 - 3.0 * t as f64);
        for y in 0..40 {
            for x in 0..64 {
                let (xf, yf) = (x as f64, y as f64);
                let in_rect = (xf - cr).abs() < 6.0 || xf - cr == -6.0;
                let in_rect = in_rect && ((yf - 20.0).abs() < 6.0 || yf - 20.0 == -6.0);
                let in_ell = ((xf - ce) / 7.0).powi(2) + ((yf - 20.0) / 5.0).powi(2) < 1.0;
                let want = if in_ell {
                    2
                } else if in_rect {
                    1
                } else {
                    0
                };
                assert_eq!(m.get(y, x), want, "t={t} y={y} x={x}");
                overlapped |= in_ell && in_rect;
            }
        }
    }
    assert!(overlapped);
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let shapes = r#"{"kind": "ellipse", "size": [16, 10], "center": [30, 20], "angle": 10,
        "motion": {"translation": [1.5, -0.5], "rotation": 4, "scale": 1.02}}"#;
    let spec = SynthSpec::from_json(&spec_json(shapes, 4)).unwrap();
    let a = gen_synthetic(&spec).unwrap();
    let b = gen_synthetic(&spec).unwrap();
    assert_eq!(a, b);
    let mut other = spec.clone();
    other.seed += 1;
    assert_ne!(gen_synthetic(&other).unwrap().frames, a.frames);
}

#[test]
fn sixteen_shapes_are_rejected() {
    let one = r#"{"kind": "rect", "size": [2, 2], "center": [5, 5]}"#;
    let shapes = vec![one; 16].join(",");
    assert!(matches!(SynthSpec::from_json(&spec_json(&shapes, 2)), Err(Error::Input(_))));
    let shapes = vec![one; 15].join(",");
    assert!(SynthSpec::from_json(&spec_json(&shapes, 2)).is_ok());
    assert!(SynthSpec::from_json(r#"{"height": 8}"#).is_err());
}

/// Pull frame t's mask back through the inverse flow of pair t: at interior
/// object pixels of frame t + 1 the nearest source pixel has the same label.
#[test]
fn masks_follow_the_synthetic_flow() {
    let shapes = r#"
        {"kind": "rect", "size": [14, 10], "center": [20, 18], "angle": 5,
         "motion": {"translation": [2.5, 1], "rotation": 6}},
        {"kind": "ellipse", "size": [12, 12], "center": [46, 22],
         "motion": {"translation": [-1, 0], "scale": 1.05}}
    "#;
    let spec = SynthSpec::from_json(&spec_json(shapes, 4)).unwrap();
    let seq = gen_synthetic(&spec).unwrap();
    let flows = seq.flows.as_ref().unwrap();
    let mut checked = 0;
    for t in 0..3 {
        let (m0, m1) = (seq.annotations[t].as_ref().unwrap(), seq.annotations[t + 1].as_ref().unwrap());
        for y in 1..39 {
            for x in 1..63 {
                let l = m1.get(y, x);
                let interior = [(0, 1), (2, 1), (1, 0), (1, 2)]
                    .iter()
                    .all(|&(dy, dx)| m1.get(y + dy - 1, x + dx - 1) == l);
                if l == 0 || !interior {
                    continue;
                }
                let (dx, dy) = flows[t].inverse.at(y, x);
                let (sx, sy) = ((x as f32 + dx).round() as usize, (y as f32 + dy).round() as usize);
                let src = m0.get(sy, sx);
                // Pixels that were hidden behind the other shape at frame t
                // are occlusion-resolved and skipped.
                if src != 0 && src != l {
                    continue;
                }
                assert_eq!(src, l, "t={t} ({y},{x}) -> ({sy},{sx})");
                checked += 1;
            }
        }
    }
    assert!(checked > 300);
}

#[test]
fn translation_flow_matches_the_transform_oracle() {
    let spec = SynthSpec::moving_square(40, 64, 2, 10.0, [20.0, 20.0], [3.0, -2.0], 0);
    let seq = gen_synthetic(&spec).unwrap();
    let (dir, inv) = synth_flow(&Transform::Translation { dx: 3.0, dy: -2.0 }, 40, 64).unwrap();
    let pair = &seq.flows.as_ref().unwrap()[0];
    let m0 = seq.annotations[0].as_ref().unwrap();
    let m1 = seq.annotations[1].as_ref().unwrap();
    for p in 0..40 * 64 {
        if m0.labels()[p] == 1 {
            assert_eq!((pair.direct.u[p], pair.direct.v[p]), (dir.u[p], dir.v[p]));
        }
        if m1.labels()[p] == 1 {
            assert_eq!((pair.inverse.u[p], pair.inverse.v[p]), (inv.u[p], inv.v[p]));
        }
    }
}

#[test]
fn save_then_load_reproduces_labels_and_flows() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = r#"{"kind": "ellipse", "size": [16, 12], "center": [30, 20],
        "motion": {"translation": [1.25, 0.5], "rotation": 3}}"#;
    let seq = gen_synthetic(&SynthSpec::from_json(&spec_json(shapes, 3)).unwrap()).unwrap();
    save_sequence(dir.path(), &seq, &[]).unwrap();
    for sub in ["JPEGImages/toy/00002.png", "Annotations/toy/00000.png", "flow/toy/00001_inv.flo"] {
        assert!(dir.path().join(sub).is_file(), "{sub}");
    }
    let back = load_sequence(dir.path(), None).unwrap();
    assert_eq!(back, seq);
}

fn toy_dir(root: &Path, name: &str, sizes: &[(u32, u32)], annotate_first: bool) {
    let img_dir = root.join("JPEGImages").join(name);
    let ann_dir = root.join("Annotations").join(name);
    fs::create_dir_all(&img_dir).unwrap();
    fs::create_dir_all(&ann_dir).unwrap();
    for (i, &(h, w)) in sizes.iter().enumerate() {
        RgbImage::from_pixel(w, h, image::Rgb([i as u8 * 40, 0, 0]))
            .save(img_dir.join(format!("{i:05}.jpg")))
            .unwrap();
    }
    if annotate_first {
        let (h, w) = sizes[0];
        let mut labels = vec![0; (h * w) as usize];
        labels[0] = 2;
        write_mask_png(
            ann_dir.join("00000.png"),
            &ObjectMask::new(h as usize, w as usize, labels).unwrap(),
            &[],
        )
        .unwrap();
    }
}

#[test]
fn toy_directory_loads_in_index_order() {
    let dir = tempfile::tempdir().unwrap();
    toy_dir(dir.path(), "a", &[(8, 10); 3], true);
    let seq = load_sequence(dir.path(), Some("a")).unwrap();
    assert_eq!(seq.len(), 3);
    assert_eq!(seq.size(), (8, 10));
    assert!(seq.flows.is_none());
    assert_eq!(seq.annotations.iter().filter(|a| a.is_some()).count(), 1);
    let m = seq.first_annotation().unwrap();
    assert_eq!(m.get(0, 0), 2);
    assert_eq!(m.get(0, 1), 0);
    // JPEG is lossy; the red ramp still orders the frames.
    let reds: Vec<u8> = seq.frames.iter().map(|f| f.get_pixel(4, 4)[0]).collect();
    assert!(reds.windows(2).all(|p| p[0] < p[1]), "{reds:?}");
}

#[test]
fn loader_errors() {
    let dir = tempfile::tempdir().unwrap();
    toy_dir(dir.path(), "noann", &[(8, 8); 2], false);
    assert!(matches!(load_sequence(dir.path(), Some("noann")), Err(Error::Input(ref m)) if m.contains("first-frame")));
    toy_dir(dir.path(), "mixed", &[(8, 8), (8, 12)], true);
    assert!(matches!(load_sequence(dir.path(), Some("mixed")), Err(Error::Input(ref m)) if m.contains("mixed")));
    assert!(matches!(load_sequence(dir.path(), None), Err(Error::Usage(_))));
    assert!(matches!(load_sequence(dir.path(), Some("absent")), Err(Error::Input(_))));
}

#[test]
fn high_resolution_subdirectory_is_preferred() {
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("n");
    toy_dir(&nested, "seq", &[(8, 8); 2], true);
    let root = dir.path().join("root");
    for kind in ["JPEGImages", "Annotations"] {
        fs::create_dir_all(root.join(kind).join("480p")).unwrap();
        fs::rename(nested.join(kind).join("seq"), root.join(kind).join("480p").join("seq")).unwrap();
    }
    assert_eq!(list_sequences(&root).unwrap(), vec!["seq".to_string()]);
    assert_eq!(load_sequence(&root, None).unwrap().len(), 2);
}
