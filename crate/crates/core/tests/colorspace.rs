use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specnet::colorspace::*;
use specnet::MultiBandImage;

fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
}

// Reference values below come from a separate implementation (Python
// colorsys for HSV; BT.601 and CIELAB evaluated step by step).

#[test]
fn hsv_reference_value() {
    let got = rgb_to_hsv_px([0.2, 0.4, 0.6]);
    assert!(close(got, [0.5833333333333334, 0.6666666666666666, 0.6], 1e-12), "{got:?}");
}

#[test]
fn ycrcb_reference_value() {
    let got = rgb_to_ycrcb_px([0.5, 0.25, 0.75]);
    assert!(close(got, [0.38175, 0.5843437945791726, 0.707816027088036], 1e-12), "{got:?}");
}

#[test]
fn lab_reference_value() {
    let got = rgb_to_lab_px([0.25, 0.5, 0.75]);
    assert!(close(got, [0.5201818501057002, 0.5023270903556326, 0.34759580233033666], 1e-9), "{got:?}");
    let black = rgb_to_lab_px([0.0; 3]);
    assert!(close(black, [0.0, 128.0 / 255.0, 128.0 / 255.0], 1e-12));
    assert!((rgb_to_lab_px([1.0; 3])[0] - 1.0).abs() < 1e-12);
}

#[test]
fn stack_sub_triples_match_standalone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = MultiBandImage::from_fn(6, 5, 3, |_, _, _| rng.random::<f32>()).unwrap();
    let stack = build_color_stack(&img).unwrap();
    let parts = [
        img.clone(),
        rgb_to_hsv(&img).unwrap(),
        rgb_to_ycrcb(&img).unwrap(),
        rgb_to_lab(&img).unwrap(),
    ];
    for (k, part) in parts.iter().enumerate() {
        assert_eq!(&stack.image().select_bands(3 * k..3 * k + 3).unwrap(), part);
    }
    assert!(stack.image().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn transforms_commute_with_pixel_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = MultiBandImage::from_fn(4, 4, 3, |_, _, _| rng.random::<f32>()).unwrap();
    // transpose is a permutation of positions for a square image
    let t = |m: &MultiBandImage| MultiBandImage::from_fn(4, 4, m.bands(), |b, i, j| m.get(b, j, i)).unwrap();
    let stack = build_color_stack(&img).unwrap().into_image();
    assert_eq!(t(&stack), build_color_stack(&t(&img)).unwrap().into_image());
}

#[test]
fn span_examples() {
    let blue = MultiBandImage::from_fn(2, 2, 3, |b, _, _| if b == 2 { 1.0 } else { 0.0 }).unwrap();
    let s = span_rgb_to_31(&blue, SpanScheme::WavelengthBlocks).unwrap();
    for k in 0..31 {
        let want = if k <= 10 { 1.0 } else { 0.0 };
        assert!(s.band(k).iter().all(|&v| v == want), "band {k}");
    }

    let gray = MultiBandImage::filled(3, 3, 3, 0.5).unwrap();
    let s = span_rgb_to_31(&gray, SpanScheme::WavelengthBlocks).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.5));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = MultiBandImage::from_fn(3, 4, 3, |_, _, _| rng.random::<f32>()).unwrap();
    let s = span_rgb_to_31(&img, SpanScheme::WavelengthBlocks).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mean: f64 = (0..31).map(|k| s.get(k, i, j) as f64).sum::<f64>() / 31.0;
            let [r, g, b] = [0, 1, 2].map(|c| img.get(c, i, j) as f64);
            assert!((mean - (11.0 * b + 10.0 * g + 10.0 * r) / 31.0).abs() < 1e-12);
        }
    }
}

#[test]
fn span_bands_are_bit_copies_under_both_schemes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = MultiBandImage::from_fn(3, 3, 3, |_, _, _| rng.random::<f32>()).unwrap();
    for scheme in [SpanScheme::WavelengthBlocks, SpanScheme::Cyclic] {
        let s = span_rgb_to_31(&img, scheme).unwrap();
        for k in 0..31 {
            assert_eq!(s.band(k), img.band(scheme.source_channel(k)));
        }
        assert_eq!(collapse_31_to_rgb(&s, scheme).unwrap(), img);
    }
}
