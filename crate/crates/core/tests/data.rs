use std::collections::HashSet;
use std::path::PathBuf;

use capsnet::data::{
    composite, generate_multimnist, load_idx, load_mnist, multimnist_count, overlap_stats, pad_translate_40,
    read_multimnist, shift_augment, write_multimnist, AffineParams, LabeledImage, Split, MULTI_SIDE,
};
use capsnet::rng;

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CAPSNET_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

/// Ten classes of blocky synthetic digits, `n` per class.
fn synthetic(n: usize) -> Vec<LabeledImage> {
    (0..10 * n)
        .map(|i| {
            let label = (i % 10) as u8;
            let mut pixels = vec![0u8; 784];
            for y in 4..24 {
                for x in 4..24 {
                    if (x * 3 + y * (label as usize + 1) + i) % 5 < 2 {
                        pixels[y * 28 + x] = 60 + ((x * y + i) % 190) as u8;
                    }
                }
            }
            LabeledImage { height: 28, width: 28, pixels, label }
        })
        .collect()
}

#[test]
fn real_mnist_has_expected_sizes() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST files not found; set CAPSNET_MNIST_DIR to run this check");
        return;
    };
    let train = load_mnist(&dir, Split::Train).unwrap();
    let test = load_mnist(&dir, Split::Test).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(test.len(), 10_000);
    assert!(train.iter().chain(&test).all(|im| im.height == 28 && im.width == 28 && im.label < 10));
    let classes: HashSet<u8> = test.iter().map(|im| im.label).collect();
    assert_eq!(classes.len(), 10);
}

#[test]
fn swapped_idx_files_report_wrong_magic() {
    let Some(dir) = mnist_dir() else { return };
    let labels = dir.join("t10k-labels-idx1-ubyte");
    let err = load_idx(&labels, &labels).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
}

#[test]
fn multimnist_generation_law() {
    let base = synthetic(30);
    let examples = generate_multimnist(&base, 34, 11).unwrap();
    assert_eq!(examples.len() as u64, multimnist_count(base.len() as u64, 34));
    assert!(examples.len() >= 10_000);
    let mut shifts_seen = HashSet::new();
    for (k, ex) in examples.iter().enumerate() {
        assert_eq!(ex.pixels.len(), MULTI_SIDE * MULTI_SIDE);
        assert_ne!(ex.labels.0, ex.labels.1, "example {k}");
        // The first digit walks the base set in order.
        assert_eq!(ex.sources.0 as usize, k / 34);
        for &(dx, dy) in &ex.shifts {
            assert!((-4..=4).contains(&dx) && (-4..=4).contains(&dy));
            shifts_seen.insert((dx, dy));
        }
        let (a, b) = (&base[ex.sources.0 as usize], &base[ex.sources.1 as usize]);
        assert_eq!((a.label, b.label), ex.labels);
        assert_eq!(composite(&a.pixels, &b.pixels, ex.shifts[0], ex.shifts[1]), ex.pixels);
    }
    assert_eq!(shifts_seen.len(), 81, "every shift in [-4, 4]^2 occurs");

    let stats = overlap_stats(&examples[..500], &base).unwrap();
    assert!(stats.iou > 0.0 && stats.iou <= stats.intersection_over_area && stats.intersection_over_area <= 1.0);
}

#[test]
fn multimnist_generation_is_reproducible() {
    let base = synthetic(5);
    let a = generate_multimnist(&base, 3, 99).unwrap();
    assert_eq!(a, generate_multimnist(&base, 3, 99).unwrap());
    assert_ne!(a, generate_multimnist(&base, 3, 100).unwrap());
}

#[test]
fn full_scale_count_formula() {
    assert_eq!(multimnist_count(60_000, 1000), 60_000_000);
    assert_eq!(multimnist_count(10_000, 1000), 10_000_000);
}

#[test]
fn single_class_base_is_rejected() {
    let base: Vec<_> = synthetic(3).into_iter().filter(|im| im.label == 4).collect();
    assert!(generate_multimnist(&base, 1, 0).is_err());
}

#[test]
fn multimnist_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.mmn");
    let base = synthetic(4);
    let examples = generate_multimnist(&base, 2, 5).unwrap();
    write_multimnist(&examples, &path).unwrap();
    assert_eq!(read_multimnist(&path).unwrap(), examples);

    write_multimnist(&[], &path).unwrap();
    assert!(read_multimnist(&path).unwrap().is_empty());

    write_multimnist(&examples, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.mmn");
    // Count field sits right after magic and version.
    bytes[10] ^= 0x40;
    std::fs::write(&bad, &bytes).unwrap();
    assert!(read_multimnist(&bad).is_err());
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(read_multimnist(&bad).is_err());
}

#[test]
fn augmentation_is_seeded_per_stream() {
    let img = &synthetic(1)[3];
    let key = rng::key_from_seed(7);
    let a = shift_augment(&img.pixels, 28, 2, &mut rng::stream(&key, rng::domain::AUGMENT, 5));
    let b = shift_augment(&img.pixels, 28, 2, &mut rng::stream(&key, rng::domain::AUGMENT, 5));
    assert_eq!(a, b);
    assert_eq!(shift_augment(&img.pixels, 28, 0, &mut rng::stream(&key, 3, 1)), img.pixels);
    let canvas = pad_translate_40(&img.pixels, &mut rng::stream(&key, rng::domain::TRANSLATE, 0));
    assert_eq!(canvas.len(), 1600);
    let sum = |p: &[u8]| p.iter().map(|&x| u64::from(x)).sum::<u64>();
    assert_eq!(sum(&canvas), sum(&img.pixels));
}

#[test]
fn affine_rotation_round_trip_on_smooth_digit() {
    // Smooth blob: bilinear round trips are accurate where the image is smooth.
    let mut pixels = vec![0u8; 784];
    for y in 0..28 {
        for x in 0..28 {
            let (dx, dy) = (x as f64 - 13.5, y as f64 - 13.5);
            let v = 255.0 * (-(dx * dx + dy * dy) / 60.0).exp();
            pixels[y * 28 + x] = v.round() as u8;
        }
    }
    let there = AffineParams::rotation(90.0).apply(&pixels).unwrap();
    let centre = AffineParams::IDENTITY.apply(&pixels).unwrap();
    let back = capsnet::data::warp_canvas(&there, 40, &AffineParams::rotation(-90.0)).unwrap();
    for (a, b) in back.iter().zip(&centre) {
        assert!(a.abs_diff(*b) <= 2, "{a} vs {b}");
    }
    assert!(AffineParams::rotation(17.0).determinant() > 0.0);
}
