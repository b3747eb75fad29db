use std::fs;
use std::path::Path;

use gastwin_core::config::ModelConfig;
use gastwin_core::data::{
    augment, flip_horizontal, frame_to_sample, load_dataset, quantize, render_frame, resize_pair,
    stratified_labels, synth_generate, synth_split, write_png, Diet, Sample, Split, SynthConfig,
};
use gastwin_core::Error;
use gastwin_tensor::RngState;

fn small_synth() -> SynthConfig {
    SynthConfig {
        height: 32,
        width: 32,
        train_frames: 6,
        val_frames: 3,
        test_frames: 3,
        seed: 4,
        ..SynthConfig::default()
    }
}

fn write_triple(root: &Path, name: &str, mask: Vec<u8>, label: &str) {
    let dir = root.join("train");
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::create_dir_all(dir.join("masks")).unwrap();
    write_png(
        &dir.join("images").join(format!("{name}.png")),
        4,
        2,
        (0..8).map(|v| v * 30).collect(),
    )
    .unwrap();
    write_png(&dir.join("masks").join(format!("{name}.png")), 4, 2, mask).unwrap();
    fs::write(
        dir.join("labels.csv"),
        format!("basename,diet\n{name},{label}\n"),
    )
    .unwrap();
}

#[test]
fn empty_layout_loads_nothing() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path(), Split::Train).unwrap().is_empty());
    fs::create_dir_all(dir.path().join("val/images")).unwrap();
    assert!(load_dataset(dir.path(), Split::Val).unwrap().is_empty());
}

#[test]
fn one_valid_triple_loads() {
    let dir = tempfile::tempdir().unwrap();
    write_triple(dir.path(), "a", vec![0, 1, 1, 0, 0, 0, 1, 0], "MD");
    let s = load_dataset(dir.path(), Split::Train).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!((s[0].height, s[0].width), (2, 4));
    assert_eq!(s[0].gray.len(), s[0].mask.len());
    assert_eq!(s[0].diet, Diet::MixedDiet);
    assert_eq!(s[0].gray[1], 30.0 / 255.0);
    assert_eq!(s[0].foreground(), 3);
}

#[test]
fn bad_mask_value_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_triple(dir.path(), "bad", vec![0, 2, 0, 0, 0, 0, 0, 0], "HF");
    let err = load_dataset(dir.path(), Split::Train).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("bad.png"), "{err}");
}

#[test]
fn unknown_diet_and_missing_mask_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_triple(dir.path(), "x", vec![0; 8], "XX");
    assert!(matches!(
        load_dataset(dir.path(), Split::Train),
        Err(Error::Data(_))
    ));
    write_triple(dir.path(), "x", vec![0; 8], "HG");
    fs::remove_file(dir.path().join("train/masks/x.png")).unwrap();
    let err = load_dataset(dir.path(), Split::Train).unwrap_err();
    assert!(err.to_string().contains("x.png"), "{err}");
}

fn sample(h: usize, w: usize, mask: Vec<u8>) -> Sample {
    Sample {
        id: "s".into(),
        height: h,
        width: w,
        gray: (0..h * w).map(|i| i as f32 / (h * w) as f32).collect(),
        mask,
        diet: Diet::HighGrain,
    }
}

#[test]
fn resize_identity_and_nearest_neighbour_mask() {
    let checker: Vec<u8> = (0..32 * 32)
        .map(|i| u8::from((i / 32 / 8 + i % 32 / 8) % 2 == 1))
        .collect();
    let s = sample(32, 32, checker.clone());
    assert_eq!(resize_pair(&s, (32, 32)).unwrap(), s);
    let big = resize_pair(&s, (64, 64)).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            assert_eq!(big.mask[y * 64 + x], checker[(y / 2) * 32 + x / 2]);
        }
    }
    assert!(big.mask.iter().all(|&m| m <= 1));
    let odd = resize_pair(&s, (96, 32)).unwrap();
    assert!(odd.mask.iter().all(|&m| m <= 1));
    assert!(matches!(resize_pair(&s, (40, 32)), Err(Error::Config(_))));
}

#[test]
fn flip_is_an_involution_preserving_foreground() {
    let s = sample(3, 5, vec![1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 1]);
    let f = flip_horizontal(&s);
    assert_eq!(f.foreground(), s.foreground());
    assert_ne!(f.mask, s.mask);
    assert_eq!(flip_horizontal(&f), s);
}

#[test]
fn augmentation_is_seeded_and_label_preserving() {
    let s = sample(4, 4, (0..16).map(|i| u8::from(i % 3 == 0)).collect());
    let sched = ModelConfig::default().schedule;
    let run = |seed| {
        let mut rng = RngState::new(seed);
        (0..20)
            .map(|_| augment(&s, &mut rng, &sched))
            .collect::<Vec<_>>()
    };
    let a = run(9);
    assert_eq!(a, run(9));
    assert_ne!(a, run(10));
    for o in &a {
        assert_eq!(o.diet, s.diet);
        assert_eq!(o.foreground(), s.foreground());
        assert!(o.mask == s.mask || o.mask == flip_horizontal(&s).mask);
        assert!(o.gray.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let flips = a.iter().filter(|o| o.mask != s.mask).count();
    assert!(flips > 0 && flips < 20);
}

#[test]
fn synth_output_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth();
    assert_eq!(
        synth_generate(&cfg, &dir.path().join("a")).unwrap(),
        [6, 3, 3]
    );
    synth_generate(&cfg, &dir.path().join("b")).unwrap();
    for split in ["train", "val", "test"] {
        for sub in ["images", "masks"] {
            let da = dir.path().join("a").join(split).join(sub);
            for e in fs::read_dir(&da).unwrap() {
                let p = e.unwrap().path();
                let other = dir
                    .path()
                    .join("b")
                    .join(split)
                    .join(sub)
                    .join(p.file_name().unwrap());
                assert_eq!(fs::read(&p).unwrap(), fs::read(other).unwrap());
            }
        }
        let labels = |r: &str| fs::read(dir.path().join(r).join(split).join("labels.csv")).unwrap();
        assert_eq!(labels("a"), labels("b"));
    }
}

#[test]
fn loaded_frames_match_quantized_in_memory_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth();
    synth_generate(&cfg, dir.path()).unwrap();
    let loaded = load_dataset(dir.path(), Split::Val).unwrap();
    let frames = synth_split(&cfg, Split::Val);
    assert_eq!(loaded.len(), frames.len());
    for (s, (name, f)) in loaded.iter().zip(&frames) {
        assert_eq!(s, &frame_to_sample(name, f, 32, 32));
        for (a, b) in s.gray.iter().zip(&f.gray) {
            assert!((f64::from(*a) - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    assert_eq!(quantize(1.2), 255);
    assert_eq!(quantize(-0.1), 0);
}

#[test]
fn zero_plumes_give_empty_masks() {
    let mut cfg = small_synth();
    for p in &mut cfg.plumes {
        p.count = (0, 0);
    }
    for (_, f) in synth_split(&cfg, Split::Train) {
        assert!(f.blobs.is_empty());
        assert!(f.mask.iter().all(|&m| m == 0));
    }
}

#[test]
fn single_blob_mask_is_the_analytic_level_set() {
    let mut cfg = small_synth();
    cfg.height = 40;
    cfg.width = 48;
    for p in &mut cfg.plumes {
        p.count = (1, 1);
    }
    let mut rng = RngState::new(12);
    for diet in Diet::ALL {
        let f = render_frame(&cfg, diet, &mut rng);
        let b = &f.blobs[0];
        for y in 0..40 {
            for x in 0..48 {
                let dx = (x as f64 - b.center.0) / b.sigma.0;
                let dy = (y as f64 - b.center.1) / b.sigma.1;
                let inside = (-(dx * dx + dy * dy) / 2.0).exp() > 0.2;
                assert_eq!(f.mask[y * 48 + x], u8::from(inside));
            }
        }
    }
}

#[test]
fn class_balance_matches_mix() {
    let mix = [0.5, 0.3, 0.2];
    let labels = stratified_labels(1000, &mix, &mut RngState::new(2));
    for (d, p) in Diet::ALL.iter().zip(mix) {
        let frac = labels.iter().filter(|l| *l == d).count() as f64 / 1000.0;
        assert!((frac - p).abs() <= 0.02, "{d:?}: {frac}");
    }
    let mut cfg = small_synth();
    cfg.train_frames = 1000;
    let frames = synth_split(&cfg, Split::Train);
    let total: f64 = cfg.class_mix.iter().sum();
    for (d, p) in Diet::ALL.iter().zip(cfg.class_mix) {
        let frac = frames.iter().filter(|(_, f)| f.diet == *d).count() as f64 / 1000.0;
        assert!((frac - p / total).abs() <= 0.02, "{d:?}: {frac}");
    }
}
