use std::f64::consts::TAU;
use std::fs;

use mdtrack_core::data::crop::{CropTransform, Jitter};
use mdtrack_core::data::dataset::{load_record, write_boxes};
use mdtrack_core::data::synth::{generate_set, target_plan};
use mdtrack_core::data::{generate_sequence, load_dataset, write_sequence, Image, Rect, SynthConfig};
use mdtrack_core::embed::Modality;
use mdtrack_core::Error;
use proptest::prelude::*;

fn small(modality: Modality, seed: u64) -> SynthConfig {
    SynthConfig {
        canvas: 64,
        frames: 6,
        target_min: 8.0,
        target_max: 10.0,
        amplitude: 6.0,
        modality,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn generation_is_deterministic() {
    for m in Modality::X {
        let a = generate_sequence(&small(m, 7), "a").unwrap();
        let b = generate_sequence(&small(m, 7), "a").unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.x, b.x);
        assert_eq!(a.boxes, b.boxes);
        let c = generate_sequence(&small(m, 8), "a").unwrap();
        assert_ne!(a.rgb, c.rgb);
    }
}

#[test]
fn box_centers_follow_the_trajectory_formula() {
    for seed in 0..5 {
        let cfg = small(Modality::T, seed);
        let seq = generate_sequence(&cfg, "s").unwrap();
        let p = target_plan(&cfg).unwrap().trajectory;
        for (t, b) in seq.boxes.iter().enumerate() {
            let t = t as f64;
            let ex = p.c0[0] + p.v[0] * t + p.amp[0] * (TAU * t / p.period + p.phase[0]).sin();
            let ey = p.c0[1] + p.v[1] * t + p.amp[1] * (TAU * t / p.period + p.phase[1]).sin();
            let (cx, cy) = b.center();
            assert!((cx - ex).abs() < 1e-9 && (cy - ey).abs() < 1e-9);
        }
    }
}

/// Number of 4-connected components of pixels brighter than `thr`.
fn bright_components(img: &Image, thr: u8) -> usize {
    let (w, h) = (img.width, img.height);
    let bright = |x: usize, y: usize| img.pixel(x, y)[0] > thr;
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for sy in 0..h {
        for sx in 0..w {
            if seen[sy * w + sx] || !bright(sx, sy) {
                continue;
            }
            count += 1;
            let mut stack = vec![(sx, sy)];
            seen[sy * w + sx] = true;
            while let Some((x, y)) = stack.pop() {
                let mut push = |nx: usize, ny: usize| {
                    if !seen[ny * w + nx] && bright(nx, ny) {
                        seen[ny * w + nx] = true;
                        stack.push((nx, ny));
                    }
                };
                if x > 0 {
                    push(x - 1, y);
                }
                if y > 0 {
                    push(x, y - 1);
                }
                if x + 1 < w {
                    push(x + 1, y);
                }
                if y + 1 < h {
                    push(x, y + 1);
                }
            }
        }
    }
    count
}

#[test]
fn clean_thermal_stream_has_one_hot_region() {
    for seed in 0..4 {
        let cfg = SynthConfig {
            distractors: 0,
            noise: 0.0,
            ..small(Modality::T, seed)
        };
        let seq = generate_sequence(&cfg, "t").unwrap();
        for img in &seq.x {
            assert_eq!(bright_components(img, 128), 1);
        }
        // distractors add warm regions of their own
        let busy = generate_sequence(&SynthConfig { distractors: 2, ..cfg }, "t").unwrap();
        assert!(busy.x.iter().any(|img| bright_components(img, 96) > 1));
    }
}

#[test]
fn write_then_load_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = generate_set(&small(Modality::E, 3), 2, "seq").unwrap();
    for s in &seqs {
        write_sequence(dir.path(), s).unwrap();
    }
    let records = load_dataset(dir.path()).unwrap();
    assert_eq!(records.len(), 2);
    for (r, s) in records.iter().zip(&seqs) {
        assert_eq!(r.id, s.id);
        assert_eq!(r.modality, Modality::E);
        assert_eq!(r.boxes, s.boxes);
        let back = r.load().unwrap();
        assert_eq!(back.rgb, s.rgb);
        assert_eq!(back.x, s.x);
    }
}

fn toy_dir(root: &std::path::Path, rgb: usize, x: usize) -> std::path::PathBuf {
    let dir = root.join("toy");
    for (sub, n) in [("rgb", rgb), ("x", x)] {
        fs::create_dir_all(dir.join(sub)).unwrap();
        for i in 0..n {
            Image::new(16, 16).write_ppm(&dir.join(sub).join(format!("{i:06}.ppm"))).unwrap();
        }
    }
    write_boxes(&dir.join("groundtruth.txt"), &vec![Rect::new(2.0, 3.0, 4.0, 5.0); rgb]).unwrap();
    fs::write(dir.join("meta.txt"), "modality=D\nfps=30\n").unwrap();
    dir
}

#[test]
fn toy_directory_parses() {
    let root = tempfile::tempdir().unwrap();
    let dir = toy_dir(root.path(), 3, 3);
    let r = load_record(&dir).unwrap();
    assert_eq!(r.len(), 3);
    assert_eq!(r.modality, Modality::D);
    assert_eq!(r.fps, Some(30.0));
}

#[test]
fn count_mismatch_names_the_x_directory() {
    let root = tempfile::tempdir().unwrap();
    let dir = toy_dir(root.path(), 3, 2);
    match load_record(&dir) {
        Err(Error::Dataset { path, .. }) => assert_eq!(path, dir.join("x")),
        other => panic!("expected dataset error, got {other:?}"),
    }
}

#[test]
fn bad_groundtruth_line_names_file_and_line() {
    let root = tempfile::tempdir().unwrap();
    let dir = toy_dir(root.path(), 3, 3);
    fs::write(dir.join("groundtruth.txt"), "1,1,4,4\n1,1,four,4\n1,1,4,4\n").unwrap();
    match load_record(&dir) {
        Err(Error::Parse { path, line, .. }) => {
            assert_eq!(path, dir.join("groundtruth.txt"));
            assert_eq!(line, 2);
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    fs::write(dir.join("meta.txt"), "modality=D\ncolour=red\n").unwrap();
    assert!(matches!(load_record(&dir), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn missing_frame_is_reported() {
    let root = tempfile::tempdir().unwrap();
    let dir = toy_dir(root.path(), 3, 3);
    fs::remove_file(dir.join("rgb/000001.ppm")).unwrap();
    match load_record(&dir) {
        Err(Error::Dataset { path, .. }) => assert_eq!(path, dir.join("rgb/000001.ppm")),
        other => panic!("expected dataset error, got {other:?}"),
    }
}

#[test]
fn shared_transform_puts_the_target_at_the_same_spot() {
    let seq = generate_sequence(&small(Modality::D, 1), "s").unwrap();
    let t = CropTransform::around(&seq.boxes[0], 4.0, 32, None);
    let (a, b, _) = mdtrack_core::data::crop_pair::<f32>(&seq.rgb[0], &seq.x[0], &seq.boxes[0], 4.0, 32, None);
    assert_eq!(a.shape(), b.shape());
    assert_eq!(a.data(), t.apply::<f32>(&seq.rgb[0]).data());
    assert_eq!(b.data(), t.apply::<f32>(&seq.x[0]).data());
}

proptest! {
    #[test]
    fn crop_round_trip_within_half_pixel(
        x in -20.0..200.0f64, y in -20.0..200.0f64, w in 2.0..60.0f64, h in 2.0..60.0f64,
        factor in 1.5..5.0f64, out in 8usize..128,
        dx in -0.08..0.08f64, dy in -0.08..0.08f64, s in 0.9..1.1f64,
    ) {
        let r = Rect::new(x, y, w, h);
        let t = CropTransform::around(&r, factor, out, Some(Jitter { dx, dy, scale: s }));
        let back = t.to_image(&t.to_crop(&r));
        for (a, b) in [(back.x, r.x), (back.y, r.y), (back.x + back.w, r.x + r.w), (back.y + back.h, r.y + r.h)] {
            prop_assert!((a - b).abs() < 0.5);
        }
    }

    #[test]
    fn box_lines_round_trip(x in -1e4..1e4f64, y in -1e4..1e4f64, w in 0.0..1e4f64, h in 0.0..1e4f64) {
        let r = Rect::new(x, y, w, h);
        prop_assert_eq!(Rect::parse_line(&r.to_line()).unwrap(), r);
    }
}
