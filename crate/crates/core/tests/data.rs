use hmmen::data::png_io::{read_png, write_png_u16, write_png_u8};
use hmmen::data::{generate_synthetic, load_dataset, save_dataset, SynthConfig, WeatherKind, MANIFEST_FILE};
use hmmen::metrics::connected_components;
use hmmen::Error;

fn clean_config(n: usize, size: usize) -> SynthConfig {
    SynthConfig {
        num_images: n,
        image_size: size,
        ir_misalignment_px: (0.0, 0.0),
        weather: vec![WeatherKind::Day],
        seed: 11,
        ..SynthConfig::default()
    }
}

/// IoU of the best single global threshold on the IR image.
fn ir_iou(ir: &[f32], gt: &[u8]) -> f64 {
    let mut levels: Vec<f32> = ir.to_vec();
    levels.sort_unstable_by(f32::total_cmp);
    levels.dedup();
    levels
        .iter()
        .step_by((levels.len() / 256).max(1))
        .map(|&t| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&v, &g) in ir.iter().zip(gt) {
                let p = v > t;
                inter += usize::from(p && g == 1);
                union += usize::from(p || g == 1);
            }
            inter as f64 / union.max(1) as f64
        })
        .fold(0.0, f64::max)
}

#[test]
fn aligned_clear_ir_lines_overlap_ground_truth() {
    let ds = generate_synthetic(&clean_config(12, 128)).unwrap();
    for pair in &ds.pairs {
        let iou = ir_iou(pair.ir.data(), &pair.gt_mask());
        assert!(iou >= 0.9, "{}: IR/gt IoU {iou}", pair.id);
    }
}

#[test]
fn masks_respect_component_and_imbalance_bounds() {
    let cfg = SynthConfig {
        num_images: 30,
        image_size: 128,
        seed: 5,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&cfg).unwrap();
    for (pair, rec) in ds.pairs.iter().zip(&ds.manifest.images) {
        let comps = connected_components(&pair.gt_mask(), 128, 128).unwrap();
        assert!((1..=4).contains(&comps.len()), "{}: {} components", pair.id, comps.len());
        let f = pair.positive_fraction();
        assert!((0.002..=0.05).contains(&f), "{}: positive fraction {f}", pair.id);
        assert_eq!(rec.positive_fraction, f);
        assert!(rec.misalignment_px <= 4.0);
        assert!((rec.shift_dy.hypot(rec.shift_dx) - rec.misalignment_px).abs() < 1e-9);
    }
}

#[test]
fn generation_is_deterministic_and_order_free() {
    let cfg = SynthConfig {
        num_images: 4,
        image_size: 64,
        seed: 3,
        ..SynthConfig::default()
    };
    let a = generate_synthetic(&cfg).unwrap();
    let b = generate_synthetic(&cfg).unwrap();
    assert_eq!(a.pairs, b.pairs);
    assert_eq!(a.manifest, b.manifest);
    // Image k does not depend on how many images precede or follow it.
    let fewer = generate_synthetic(&SynthConfig { num_images: 2, ..cfg.clone() }).unwrap();
    assert_eq!(fewer.pairs[..], a.pairs[..2]);
}

#[test]
fn save_and_reload_round_trip_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SynthConfig {
        num_images: 3,
        image_size: 64,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    ds.save(dir.path()).unwrap();
    assert!(dir.path().join(MANIFEST_FILE).is_file());
    let back = load_dataset(dir.path(), None).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in ds.pairs.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert!(a.rgb.max_abs_diff(&b.rgb) <= 1.0 / 255.0);
        assert!(a.ir.max_abs_diff(&b.ir) <= 1.0 / 255.0);
        assert_eq!(a.gt, b.gt);
    }
}

#[test]
fn loader_sorts_ids_and_names_orphans() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SynthConfig {
        num_images: 3,
        image_size: 32,
        line_width_px: (1.0, 1.0),
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut pairs = ds.pairs.clone();
    pairs.reverse();
    save_dataset(dir.path(), &pairs).unwrap();
    let ids: Vec<String> = load_dataset(dir.path(), None).unwrap().into_iter().map(|p| p.id).collect();
    assert_eq!(ids, ["img_00000", "img_00001", "img_00002"]);

    std::fs::remove_file(dir.path().join("ir").join("img_00001.png")).unwrap();
    match load_dataset(dir.path(), None) {
        Err(Error::Data(msg)) => assert!(msg.contains("img_00001") && msg.contains("ir"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn sixteen_bit_ir_is_normalised() {
    let dir = tempfile::tempdir().unwrap();
    for d in ["rgb", "ir", "gt"] {
        std::fs::create_dir_all(dir.path().join(d)).unwrap();
    }
    write_png_u8(&dir.path().join("rgb/a.png"), 2, 1, 3, &[0, 128, 255, 10, 20, 30]).unwrap();
    write_png_u16(&dir.path().join("ir/a.png"), 2, 1, &[65535, 0]).unwrap();
    write_png_u8(&dir.path().join("gt/a.png"), 2, 1, 1, &[255, 127]).unwrap();
    assert_eq!(read_png(&dir.path().join("ir/a.png")).unwrap().bit_depth, 16);
    let pairs = load_dataset(dir.path(), None).unwrap();
    assert_eq!(pairs[0].ir.data(), &[1.0, 0.0]);
    assert_eq!(pairs[0].gt.data(), &[1.0, 0.0]);
    assert_eq!(pairs[0].rgb.at([0, 2, 0, 0]), 1.0);
}

#[test]
fn missing_root_is_a_data_error() {
    assert!(matches!(
        load_dataset(std::path::Path::new("/nonexistent/dataset"), None),
        Err(Error::Data(_))
    ));
}

