use darn_core::attack::{fgsm, DEFAULT_EPSILON};
use darn_core::corruption::{apply, corrupt, lookup, CorruptionSpec, CATALOG, SEVERITIES};
use darn_core::rng;
use darn_core::synth::{boundary_density, generate, read_dsyn, write_dsyn, SynthConfig, Tag};
use ndtensor::{Reduction, Tensor};
use rand::Rng;

fn cfg(frac: f64) -> SynthConfig {
    SynthConfig::new(32, 3, 3, frac)
}

#[test]
fn regeneration_is_bit_identical() {
    let a = generate(&cfg(0.5), 77, 10, 8).unwrap();
    let b = generate(&cfg(0.5), 77, 10, 8).unwrap();
    assert_eq!(a.images.data(), b.images.data());
    assert_eq!(a, b);
    assert_eq!(a.seeds[0], rng::mix(77, 10));
    let other = generate(&cfg(0.5), 78, 10, 8).unwrap();
    assert_ne!(a.images.data(), other.images.data());
}

#[test]
fn zero_fraction_gives_only_simple_scenes() {
    let b = generate(&cfg(0.0), 3, 0, 64).unwrap();
    assert!(b.tags.iter().all(|t| *t == Tag::Simple));
}

#[test]
fn images_and_labels_are_valid() {
    let b = generate(&cfg(0.5), 4, 0, 64).unwrap();
    assert!(b.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(b.labels.data.iter().all(|&l| l < 3));
    assert_eq!(b.images.shape(), &[64, 3, 32, 32]);
}

#[test]
fn complex_scenes_have_denser_boundaries() {
    let b = generate(&cfg(0.5), 2024, 0, 256).unwrap();
    let hw = 32 * 32;
    let mut sums = [(0.0, 0usize); 2];
    for (i, tag) in b.tags.iter().enumerate() {
        let d = boundary_density(&b.labels.data[i * hw..(i + 1) * hw], 32, 32);
        let slot = &mut sums[(*tag == Tag::Complex) as usize];
        slot.0 += d;
        slot.1 += 1;
    }
    assert!(sums[0].1 > 0 && sums[1].1 > 0);
    let (simple, complex) = (sums[0].0 / sums[0].1 as f64, sums[1].0 / sums[1].1 as f64);
    assert!(complex > simple, "simple {simple:.4}, complex {complex:.4}");
}

#[test]
fn boundary_density_counts_adjacent_pairs() {
    assert_eq!(boundary_density(&[0, 0, 0, 0], 2, 2), 0.0);
    // Left column 0, right column 1: two of the four pairs differ.
    assert_eq!(boundary_density(&[0, 1, 0, 1], 2, 2), 0.5);
}

#[test]
fn every_class_keeps_a_fair_share() {
    for frac in [0.0, 0.5, 1.0] {
        let b = generate(&cfg(frac), 11, 0, 256).unwrap();
        let mut counts = [0usize; 3];
        for &l in &b.labels.data {
            counts[l as usize] += 1;
        }
        let total = b.labels.data.len() as f64;
        for (k, n) in counts.iter().enumerate() {
            assert!(*n as f64 / total >= 0.02, "fraction {frac}, class {k}: {}", *n as f64 / total);
        }
    }
}

#[test]
fn dsyn_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.dsyn");
    let b = generate(&cfg(0.5), 5, 0, 6).unwrap();
    write_dsyn(&path, &b, 3).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DSYN");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    let dims: Vec<u32> = (0..5)
        .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()))
        .collect();
    assert_eq!(dims, vec![6, 32, 32, 3, 3]);
    assert_eq!(bytes.len(), 26 + 6 * 3 * 32 * 32 * 4 + 6 * 32 * 32 + 6);

    let (back, k) = read_dsyn(&path).unwrap();
    assert_eq!(k, 3);
    assert_eq!(back.labels, b.labels);
    assert_eq!(back.tags, b.tags);
    for (x, y) in back.images.data().iter().zip(b.images.data()) {
        assert_eq!(*x, *y as f32 as f64);
    }
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_dsyn(&path).is_err());
}

#[test]
fn severity_grid_matches_documented_table() {
    let table = [
        ("gaussian_noise", 0.02, 0.2),
        ("impulse_noise", 0.01, 0.15),
        ("gaussian_blur", 0.5, 3.0),
        ("motion_blur", 2.0, 10.0),
        ("contrast", 0.8, 0.3),
        ("pixelate", 2.0, 8.0),
        ("fog", 0.1, 0.6),
        ("brightness", 0.05, 0.4),
    ];
    assert_eq!(CATALOG.len(), table.len());
    for (name, lo, hi) in table {
        let d = lookup(name).unwrap();
        assert_eq!(d.param(1).unwrap(), lo);
        assert_eq!(d.param(5).unwrap(), hi);
        let mid = d.param(3).unwrap();
        assert!((mid - (lo + hi) / 2.0).abs() < 1e-15);
    }
    assert!(CorruptionSpec::new("snow", 1).is_err());
    assert!(CorruptionSpec::new("fog", 6).is_err());
}

#[test]
fn corruptions_are_deterministic_and_bounded() {
    let x = generate(&cfg(0.5), 6, 0, 4).unwrap().images;
    for d in CATALOG {
        let spec = CorruptionSpec::new(d.name, 3).unwrap();
        let a = corrupt(&x, &spec, 99).unwrap();
        let b = corrupt(&x, &spec, 99).unwrap();
        assert_eq!(a.data(), b.data(), "{}", d.name);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let a = corrupt(&x, &CorruptionSpec::new("gaussian_noise", 2).unwrap(), 1).unwrap();
    let b = corrupt(&x, &CorruptionSpec::new("gaussian_noise", 2).unwrap(), 2).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn unit_pixelation_is_identity() {
    let x = generate(&cfg(0.5), 6, 0, 2).unwrap().images;
    assert_eq!(apply(&x, "pixelate", 1.0, 0).unwrap().data(), x.data());
    assert!(apply(&x, "snow", 1.0, 0).is_err());
}

#[test]
fn distortion_grows_with_severity() {
    let x = generate(&cfg(0.5), 12, 0, 64).unwrap().images;
    for d in CATALOG {
        let mut prev = 0.0;
        for s in SEVERITIES {
            let y = corrupt(&x, &CorruptionSpec::new(d.name, s).unwrap(), 5).unwrap();
            let l1 = y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.numel() as f64;
            assert!(l1 >= prev, "{} severity {s}: {l1} < {prev}", d.name);
            prev = l1;
        }
        assert!(prev > 0.0, "{}", d.name);
    }
}

#[test]
fn fgsm_follows_gradient_sign_of_linear_model() {
    let mut r = rng::stream(3, "fgsm");
    let shape = vec![2, 3, 4, 4];
    let n = 96;
    let x = Tensor::from_vec(shape.clone(), (0..n).map(|_| r.gen_range(0.1..0.9)).collect());
    let mut w: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    w[5] = 0.0;
    let wt = Tensor::from_vec(shape, w.clone());
    let eps = DEFAULT_EPSILON;
    assert_eq!(eps, 8.0 / 255.0);
    let adv = fgsm(&x, eps, |tape, xv| {
        let wv = tape.constant(wt.clone());
        let p = tape.mul(xv, wv)?;
        Ok(tape.reduce_all(p, Reduction::Sum)?)
    })
    .unwrap();
    for i in 0..n {
        let step = if w[i] > 0.0 { eps } else if w[i] < 0.0 { -eps } else { 0.0 };
        assert_eq!(adv.data()[i], (x.data()[i] + step).clamp(0.0, 1.0));
    }

    let same = fgsm(&x, 0.0, |tape, xv| Ok(tape.reduce_all(xv, Reduction::Sum)?)).unwrap();
    assert_eq!(same.data(), x.data());
    assert!(fgsm(&x, -1.0, |tape, xv| Ok(tape.reduce_all(xv, Reduction::Sum)?)).is_err());
}

#[test]
fn fgsm_respects_linf_ball_and_unit_range() {
    let x = generate(&cfg(0.5), 8, 0, 4).unwrap().images;
    for eps in [0.0, 0.01, DEFAULT_EPSILON, 0.3] {
        let adv = fgsm(&x, eps, |tape, xv| {
            let s = tape.sigmoid(xv)?;
            let sq = tape.mul(s, xv)?;
            Ok(tape.reduce_all(sq, Reduction::Mean)?)
        })
        .unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps + 1e-12);
            assert!((0.0..=1.0).contains(a));
        }
    }
}
