use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specnet::autograd::{Graph, Tensor, Var};
use specnet::colorspace::SpanScheme;
use specnet::losses::*;
use specnet::networks::{build, NetworkSpec, NetworkState};

const SCHEME: SpanScheme = SpanScheme::WavelengthBlocks;

/// Adds a constant to every sample.
struct Offset(usize, f64);

impl ImageMap for Offset {
    fn in_bands(&self) -> usize {
        self.0
    }

    fn out_bands(&self) -> usize {
        self.0
    }

    fn apply(&self, g: &mut Graph, x: Var) -> specnet::Result<Var> {
        Ok(g.add_scalar(x, self.1))
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_fn(shape, |_| rng.random_range(0.2..0.8))
}

fn spanned(t: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.leaf(t.clone());
    let y = BandMatrixMap::span(SCHEME).apply(&mut g, x).unwrap();
    g.value(y).clone()
}

#[test]
fn cycle_with_zero_residuals_is_zero_for_both_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let h = spanned(&rand_tensor(&mut rng, &[2, 3, 8, 8]));
    for norm in [CycleNorm::L1, CycleNorm::L2] {
        let mut g = Graph::new();
        let (xv, yv, hv) = (g.leaf(x.clone()), g.leaf(x.clone()), g.leaf(h.clone()));
        let loss = cycle_loss(&mut g, xv, yv, hv, &IdentityMap(31), &BandMatrixMap::collapse(SCHEME), norm, SCHEME)
            .unwrap();
        assert!(g.scalar(loss).abs() < 1e-14, "{norm}: {}", g.scalar(loss));
    }
}

#[test]
fn cycle_constant_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 3, 8, 8]);
    let y = x.mapv(|v| v + 0.1);
    let h = spanned(&rand_tensor(&mut rng, &[1, 3, 8, 8]));
    for (norm, want) in [(CycleNorm::L2, 0.01), (CycleNorm::L1, 0.1)] {
        let mut g = Graph::new();
        let (xv, yv, hv) = (g.leaf(x.clone()), g.leaf(y.clone()), g.leaf(h.clone()));
        let loss = cycle_loss(&mut g, xv, yv, hv, &IdentityMap(31), &BandMatrixMap::collapse(SCHEME), norm, SCHEME)
            .unwrap();
        assert!((g.scalar(loss) - want).abs() < 1e-12, "{norm}: {}", g.scalar(loss));
    }
}

#[test]
fn identity_constant_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let h = g.leaf(rand_tensor(&mut rng, &[1, 31, 8, 8]));
    let x31 = g.leaf(spanned(&rand_tensor(&mut rng, &[1, 3, 8, 8])));
    let loss = identity_loss(&mut g, h, x31, &Offset(31, 0.2), &BandMatrixMap::collapse(SCHEME), SCHEME).unwrap();
    assert!((g.scalar(loss) - 0.2).abs() < 1e-12);
}

#[test]
fn stage2_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = rand_tensor(&mut rng, &[1, 3, 8, 8]);
    let mut g = Graph::new();
    let (p, y) = (g.leaf(t.clone()), g.leaf(t));
    let scores = g.leaf(Tensor::zeros(vec![1, 1, 3, 3]));
    let loss = stage2_loss(&mut g, p, y, scores, &LossWeights::default()).unwrap();
    assert!((g.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);

    let mut g = Graph::new();
    let p = g.leaf(rand_tensor(&mut rng, &[1, 3, 8, 8]));
    let y = g.leaf(rand_tensor(&mut rng, &[1, 3, 8, 8]));
    let scores = g.leaf(rand_tensor(&mut rng, &[1, 1, 3, 3]));
    let weights = LossWeights {
        lambda_rec: 0.0,
        ..LossWeights::default()
    };
    let loss = stage2_loss(&mut g, p, y, scores, &weights).unwrap();
    let adv = generator_adversarial_loss(&mut g, scores);
    assert_eq!(g.scalar(loss), g.scalar(adv));
}

struct Nets {
    gx: NetworkState,
    gh: NetworkState,
    dx: NetworkState,
    dy: NetworkState,
}

fn nets() -> Nets {
    Nets {
        gx: build(NetworkSpec::unet(31, 31, 1, 2, 1)).unwrap(),
        gh: build(NetworkSpec::unet(31, 3, 1, 2, 2)).unwrap(),
        dx: build(NetworkSpec::patchgan(31, 1, 2, 3)).unwrap(),
        dy: build(NetworkSpec::patchgan(3, 1, 2, 4)).unwrap(),
    }
}

fn stage1(n: &Nets, weights: &LossWeights) -> (LossBreakdown, [f64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let (gx, gh, dx, dy) = (n.gx.bind(&mut g), n.gh.bind(&mut g), n.dx.bind(&mut g), n.dy.bind(&mut g));
    let reference = vec![1.0, 0.3, 0.2, 0.1];
    let inputs = Stage1Inputs {
        dark: g.leaf(rand_tensor(&mut rng, &[1, 3, 8, 8])),
        normal: g.leaf(rand_tensor(&mut rng, &[1, 3, 8, 8])),
        hsi: g.leaf(rand_tensor(&mut rng, &[1, 31, 8, 8])),
        reference_profile: reference.clone(),
    };
    let models = Stage1Models {
        gx: &gx,
        gh: &gh,
        dx: &dx,
        dy: &dy,
        scheme: SCHEME,
    };
    let terms = total_stage1_loss(&mut g, &inputs, &models, weights).unwrap();
    // standalone evaluations of the same terms
    let cyc = cycle_loss(&mut g, inputs.dark, inputs.normal, inputs.hsi, &gx, &gh, weights.cycle_norm, SCHEME).unwrap();
    let n31 = BandMatrixMap::span(SCHEME).apply(&mut g, inputs.normal).unwrap();
    let idt = identity_loss(&mut g, inputs.hsi, n31, &gx, &gh, SCHEME).unwrap();
    let spec = g.spectral_mse(terms.fake_hsi, &reference).unwrap();
    (terms.values(&g), [g.scalar(cyc), g.scalar(idt), g.scalar(spec)])
}

#[test]
fn stage1_terms_match_standalone_losses() {
    let n = nets();
    let w = LossWeights::default();
    let (b, [cyc, idt, spec]) = stage1(&n, &w);
    assert_eq!((b.cyc, b.idt, b.spec), (cyc, idt, spec));
    let want = b.g_adv + w.lambda_cyc * cyc + w.lambda_idt * idt + w.lambda_spec * spec;
    assert!((b.total - want).abs() < 1e-12);
}

#[test]
fn stage1_with_zero_weights_is_adversarial_only() {
    let n = nets();
    let w = LossWeights {
        lambda_cyc: 0.0,
        lambda_idt: 0.0,
        lambda_spec: 0.0,
        ..LossWeights::default()
    };
    let (b, _) = stage1(&n, &w);
    assert_eq!(b.total, b.g_adv);
}

#[test]
fn stage1_total_grows_with_spectral_weight() {
    let n = nets();
    let lo = stage1(&n, &LossWeights::default()).0;
    let hi = stage1(
        &n,
        &LossWeights {
            lambda_spec: 5.0,
            ..LossWeights::default()
        },
    )
    .0;
    assert!(lo.spec > 0.0);
    assert!(hi.total > lo.total);
    assert!((hi.total - lo.total - 4.0 * lo.spec).abs() < 1e-12);
}
