use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specnet::spectral::*;
use specnet::{Error, MultiBandImage};

#[test]
fn cosine_rows_give_two_vertical_spikes() {
    let (h, w, u0) = (16, 16, 3);
    let plane = Array2::from_shape_fn((h, w), |(i, _)| (2.0 * PI * (u0 * i) as f64 / h as f64).cos());
    let p = power_spectrum(plane.view()).unwrap();
    let peak = ((h * w) as f64 / 2.0).powi(2);
    for ((i, j), &v) in p.indexed_iter() {
        let spike = j == w / 2 && (i == h / 2 + u0 || i == h / 2 - u0);
        if spike {
            assert!((v - peak).abs() < 1e-8 * peak, "({i},{j}) = {v}");
        } else {
            assert!(v < 1e-12 * peak, "({i},{j}) = {v}");
        }
    }
}

#[test]
fn odd_sizes_center_at_floor_half() {
    let plane = Array2::from_elem((5, 7), 0.5);
    let p = power_spectrum(plane.view()).unwrap();
    assert_eq!(p[[2, 3]], (0.5 * 35.0f64).powi(2));
}

#[test]
fn ring_means_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let power = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>());
    let prof = azimuthal_profile(power.view());
    assert_eq!(prof.len(), 8);
    for (r, &got) in prof.iter().enumerate() {
        let mut vals = Vec::new();
        for i in 0..16 {
            for j in 0..16 {
                let d = ((i as f64 - 8.0).powi(2) + (j as f64 - 8.0).powi(2)).sqrt();
                if d.round() as usize == r {
                    vals.push(power[[i, j]]);
                }
            }
        }
        let want = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn cumulative_is_channel_mean_and_rows_start_at_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = MultiBandImage::from_fn(12, 10, 4, |_, _, _| rng.random::<f32>()).unwrap();
    let p = spectral_profile(&img, true).unwrap();
    assert_eq!(p.bins(), 5);
    for c in 0..4 {
        assert_eq!(p.per_channel[[c, 0]], 1.0);
    }
    for r in 0..p.bins() {
        let mean = p.per_channel.column(r).sum() / 4.0;
        assert!((p.cumulative[r] - mean).abs() < 1e-15);
    }
}

#[test]
fn mse_is_zero_symmetric_and_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut prof = || {
        let img = MultiBandImage::from_fn(8, 8, 2, |_, _, _| rng.random::<f32>()).unwrap();
        spectral_profile(&img, true).unwrap()
    };
    let (a, b) = (prof(), prof());
    assert_eq!(spectral_mse_loss(&a, &a).unwrap(), 0.0);
    let ab = spectral_mse_loss(&a, &b).unwrap();
    assert!(ab > 0.0);
    assert_eq!(ab, spectral_mse_loss(&b, &a).unwrap());
}

#[test]
fn mse_requires_normalized_profiles_and_two_bins() {
    let img = MultiBandImage::filled(8, 8, 1, 0.3).unwrap();
    let raw = spectral_profile(&img, false).unwrap();
    assert!(matches!(spectral_mse_loss(&raw, &raw), Err(Error::Contract(_))));
    let short = SpectralProfile {
        per_channel: Array2::from_elem((1, 1), 1.0),
        cumulative: vec![1.0],
        normalized: true,
    };
    assert!(matches!(spectral_mse_loss(&short, &short), Err(Error::Contract(_))));
    let tiny = MultiBandImage::filled(3, 8, 1, 0.3).unwrap();
    assert!(matches!(spectral_profile(&tiny, true), Err(Error::Contract(_))));
}
