//! Dataset loading, augmentation and synthetic data.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lwanet::data::{
    augment, batch_indices, hflip, load_dataset, read_class_table, save_mask_png, save_rgb_png, synth_shapes,
    AugmentConfig, SegSample,
};
use lwanet::loss::LabelMap;
use lwanet::tensor::Tensor;

fn write_pair(root: &Path, split: &str, stem: &str, w: usize, h: usize, mask: &[u8]) {
    let dir = root.join(split);
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::create_dir_all(dir.join("masks")).unwrap();
    let rgb: Vec<u8> = (0..w * h * 3).map(|i| (i * 7 % 256) as u8).collect();
    save_rgb_png(&dir.join("images").join(format!("{stem}.png")), &rgb, w, h).unwrap();
    save_mask_png(&dir.join("masks").join(format!("{stem}.png")), mask, w, h).unwrap();
}

#[test]
fn loads_pairs_in_stem_order() {
    let root = tempfile::tempdir().unwrap();
    write_pair(
        root.path(),
        "train",
        "b_frame",
        4,
        3,
        &[0, 1, 2, 1, 0, 0, 0, 0, 2, 2, 2, 2],
    );
    write_pair(root.path(), "train", "a_frame", 4, 3, &[1; 12]);
    let samples = load_dataset(root.path(), "train", 3).unwrap();
    let names: Vec<&str> = samples.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["a_frame", "b_frame"]);
    assert_eq!(samples[1].mask.data(), &[0, 1, 2, 1, 0, 0, 0, 0, 2, 2, 2, 2]);
    assert_eq!(samples[1].image.shape(), [1, 3, 3, 4]);
    assert_eq!(samples[1].image.at([0, 1, 0, 0]), 7.0 / 255.0);
    assert_eq!(samples, load_dataset(root.path(), "train", 3).unwrap());
}

#[test]
fn out_of_range_class_names_the_file() {
    let root = tempfile::tempdir().unwrap();
    write_pair(root.path(), "train", "good", 2, 2, &[0, 1, 2, 3]);
    write_pair(root.path(), "train", "bad", 2, 2, &[0, 255, 0, 0]);
    let err = load_dataset(root.path(), "train", 11).unwrap_err().to_string();
    assert!(err.contains("bad.png") && err.contains("255"), "{err}");
}

#[test]
fn empty_split_is_an_error() {
    let root = tempfile::tempdir().unwrap();
    fs::create_dir_all(root.path().join("val/images")).unwrap();
    fs::create_dir_all(root.path().join("val/masks")).unwrap();
    let err = load_dataset(root.path(), "val", 3).unwrap_err().to_string();
    assert!(err.contains("no samples"), "{err}");
    assert!(load_dataset(root.path(), "missing", 3).is_err());
}

#[test]
fn unpaired_and_mismatched_files_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    write_pair(root.path(), "train", "x", 2, 2, &[0; 4]);
    save_rgb_png(&root.path().join("train/images/orphan.png"), &[0; 12], 2, 2).unwrap();
    let err = load_dataset(root.path(), "train", 2).unwrap_err().to_string();
    assert!(err.contains("orphan.png"), "{err}");

    let root = tempfile::tempdir().unwrap();
    write_pair(root.path(), "train", "x", 2, 2, &[0; 4]);
    save_mask_png(&root.path().join("train/masks/x.png"), &[0; 6], 3, 2).unwrap();
    let err = load_dataset(root.path(), "train", 2).unwrap_err().to_string();
    assert!(err.contains("x.png") && err.contains("3x2"), "{err}");
}

#[test]
fn palette_masks_read_as_indices() {
    let root = tempfile::tempdir().unwrap();
    write_pair(root.path(), "train", "p", 3, 1, &[0, 0, 0]);
    let path = root.path().join("train/masks/p.png");
    let mut enc = png::Encoder::new(BufWriter::new(File::create(&path).unwrap()), 3, 1);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(vec![0, 0, 0, 255, 0, 0, 0, 255, 0]);
    enc.write_header().unwrap().write_image_data(&[2, 0, 1]).unwrap();
    let samples = load_dataset(root.path(), "train", 3).unwrap();
    assert_eq!(samples[0].mask.data(), &[2, 0, 1]);
}

#[test]
fn class_table_round_trips() {
    let root = tempfile::tempdir().unwrap();
    fs::write(
        root.path().join("classes.json"),
        r#"{"classes": [{"name": "background", "color": [0, 0, 0]}, {"name": "forceps", "color": [255, 0, 0]}]}"#,
    )
    .unwrap();
    let table = read_class_table(root.path()).unwrap();
    assert_eq!(table.names(), ["background", "forceps"]);
    assert_eq!(table.color(1), [255, 0, 0]);
    fs::write(root.path().join("classes.json"), r#"{"classes": [], "extra": 1}"#).unwrap();
    assert!(read_class_table(root.path()).is_err());
}

fn striped_sample(h: usize, w: usize) -> SegSample {
    let mask: Vec<u8> = (0..h * w).map(|p| [0u8, 3, 5][(p % w) * 3 / w]).collect();
    let image = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        ((c * 31 + y * 7 + x * 3) % 17) as f32 / 16.0
    });
    SegSample::new("stripes", image, LabelMap::new([1, h, w], mask).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_keeps_ranges_and_class_ids(seed in any::<u64>(), rot in 0.0f64..45.0, shift in 0.0f64..0.3, flip in 0.0f64..=1.0) {
        let sample = striped_sample(20, 24);
        let cfg = AugmentConfig { rotation_deg: rot, shift, hflip_prob: flip, ..AugmentConfig::default() };
        let out = augment(&sample, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.image.shape(), sample.image.shape());
        prop_assert_eq!(out.mask.shape(), sample.mask.shape());
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let before: BTreeSet<u8> = sample.mask.data().iter().copied().chain([0]).collect();
        let after: BTreeSet<u8> = out.mask.data().iter().copied().collect();
        prop_assert!(after.is_subset(&before), "{after:?} not within {before:?}");
        prop_assert_eq!(&out, &augment(&sample, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)));
    }
}

#[test]
fn zero_range_augmentation_is_identity_and_flip_is_an_involution() {
    let sample = striped_sample(9, 12);
    let identity = AugmentConfig {
        rotation_deg: 0.0,
        shift: 0.0,
        hflip_prob: 0.0,
        ..AugmentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        assert_eq!(augment(&sample, &identity, &mut rng), sample);
    }
    let forced = AugmentConfig {
        hflip_prob: 1.0,
        ..identity
    };
    let once = augment(&sample, &forced, &mut rng);
    assert_eq!(once, hflip(&sample));
    assert_ne!(once, sample);
    assert_eq!(augment(&once, &forced, &mut rng), sample);
}

#[test]
fn synthetic_data_is_imbalanced_and_covers_every_class() {
    let classes = 11;
    let samples = synth_shapes(100, [64, 64], classes, 0).unwrap();
    let mut fg = 0usize;
    let mut seen = BTreeSet::new();
    for s in &samples {
        fg += s.mask.data().iter().filter(|&&v| v != 0).count();
        seen.extend(s.mask.data().iter().copied());
    }
    let fraction = fg as f64 / (100 * 64 * 64) as f64;
    assert!(fraction < 0.15, "foreground fraction {fraction}");
    assert!(fraction > 0.01, "foreground fraction {fraction}");
    assert_eq!(seen, (0..classes as u8).collect());
    assert_eq!(samples, synth_shapes(100, [64, 64], classes, 0).unwrap());
}

#[test]
fn batches_partition_the_index_set() {
    let sizes: Vec<usize> = batch_indices(10, 4, None).unwrap().iter().map(Vec::len).collect();
    assert_eq!(sizes, [4, 4, 2]);
    let shuffled = batch_indices(10, 4, Some(7)).unwrap();
    assert_eq!(shuffled, batch_indices(10, 4, Some(7)).unwrap());
    let all: BTreeSet<usize> = shuffled.into_iter().flatten().collect();
    assert_eq!(all, (0..10).collect());
    assert!(batch_indices(10, 0, None).is_err());
}
