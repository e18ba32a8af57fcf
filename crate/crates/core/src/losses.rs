//! Training objectives for both stages.
//!
//! Conventions:
//!
//! * `G_x` maps a 31-band spanned RGB stack to a 31-band HSI estimate and
//!   `G_h` maps a 31-band HSI to RGB. Whenever an RGB image feeds `G_x` it
//!   is spanned first.
//! * The cycle loss targets the normal-light image:
//!   `‖y − G_h(G_x(span x))‖ + ‖h − G_x(span G_h(h))‖`, each term a mean
//!   over elements under the configured norm.
//! * Identity loss: `G_x` fed a real HSI should return it unchanged, and
//!   `G_h` fed a spanned RGB stack should return the RGB it was spanned
//!   from, `|G_x(h) − h|₁ + |G_h(x31) − collapse(x31)|₁` (element means).
//! * Adversarial terms use clamped logits and binary cross-entropy; the
//!   generator side is the non-saturating `−log D(fake)`.

use crate::autograd::{Graph, Var};
use crate::colorspace::{SpanScheme, HSI_BANDS};
use crate::error::{Error, Result};
use crate::networks::BoundNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CycleNorm {
    L1,
    #[default]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_idt: f64,
    pub lambda_spec: f64,
    pub lambda_rec: f64,
    pub cycle_norm: CycleNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_idt: 5.0,
            lambda_spec: 1.0,
            lambda_rec: 100.0,
            cycle_norm: CycleNorm::L2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_idt", self.lambda_idt),
            ("lambda_spec", self.lambda_spec),
            ("lambda_rec", self.lambda_rec),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Anything that maps one band layout to another inside a graph.
pub trait ImageMap {
    fn in_bands(&self) -> usize;
    fn out_bands(&self) -> usize;
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

impl ImageMap for BoundNetwork<'_> {
    fn in_bands(&self) -> usize {
        self.state().spec().in_bands
    }

    fn out_bands(&self) -> usize {
        self.state().spec().out_bands
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward(g, x)
    }
}

/// Returns its input.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMap(pub usize);

impl ImageMap for IdentityMap {
    fn in_bands(&self) -> usize {
        self.0
    }

    fn out_bands(&self) -> usize {
        self.0
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_bands(g, x, self.0, "identity map input")?;
        Ok(x)
    }
}

/// Fixed per-pixel linear band mixing.
#[derive(Debug, Clone)]
pub struct BandMatrixMap(pub Vec<Vec<f64>>);

impl BandMatrixMap {
    pub fn span(scheme: SpanScheme) -> Self {
        Self(scheme.span_matrix().into_iter().map(|r| r.to_vec()).collect())
    }

    pub fn collapse(scheme: SpanScheme) -> Self {
        Self(scheme.collapse_matrix().to_vec())
    }
}

impl ImageMap for BandMatrixMap {
    fn in_bands(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }

    fn out_bands(&self) -> usize {
        self.0.len()
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.band_linear(x, self.0.clone())
    }
}

fn check_bands(g: &Graph, x: Var, expected: usize, what: &str) -> Result<()> {
    let shape = g.value(x).shape();
    if shape.len() != 4 || shape[1] != expected {
        return Err(Error::contract(format!(
            "{what} must have {expected} bands, got shape {shape:?}"
        )));
    }
    Ok(())
}

fn check_map(m: &dyn ImageMap, input: usize, output: usize, name: &str) -> Result<()> {
    if m.in_bands() != input || m.out_bands() != output {
        return Err(Error::contract(format!(
            "{name} must map {input} → {output} bands, got {} → {}",
            m.in_bands(),
            m.out_bands()
        )));
    }
    Ok(())
}

fn residual_norm(g: &mut Graph, pred: Var, target: Var, norm: CycleNorm) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    Ok(match norm {
        CycleNorm::L1 => g.mean_abs(diff),
        CycleNorm::L2 => g.mean_square(diff),
    })
}

/// Discriminator and generator losses from real and fake logit maps.
///
/// `d = −mean log σ(real) − mean log(1 − σ(fake))`, `g = −mean log σ(fake)`.
pub fn adversarial_losses(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Result<(Var, Var)> {
    if g.value(real_scores).shape() != g.value(fake_scores).shape() {
        return Err(Error::contract(format!(
            "score maps differ in shape: {:?} vs {:?}",
            g.value(real_scores).shape(),
            g.value(fake_scores).shape()
        )));
    }
    let d_loss = discriminator_loss(g, real_scores, fake_scores);
    let g_loss = generator_adversarial_loss(g, fake_scores);
    Ok((d_loss, g_loss))
}

pub fn discriminator_loss(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Var {
    let real = g.bce_with_logits(real_scores, 1.0);
    let fake = g.bce_with_logits(fake_scores, 0.0);
    g.weighted_sum(&[(real, 1.0), (fake, 1.0)])
}

pub fn generator_adversarial_loss(g: &mut Graph, fake_scores: Var) -> Var {
    g.bce_with_logits(fake_scores, 1.0)
}

/// Both cycle terms given the forward translations already in the graph:
/// `fake_hsi = G_x(span x)` and `fake_rgb = G_h(h)`.
#[allow(clippy::too_many_arguments)]
fn cycle_from_fakes(
    g: &mut Graph,
    fake_hsi: Var,
    fake_rgb: Var,
    y: Var,
    h: Var,
    gx: &dyn ImageMap,
    gh: &dyn ImageMap,
    norm: CycleNorm,
    scheme: SpanScheme,
) -> Result<Var> {
    let back_rgb = gh.apply(g, fake_hsi)?;
    let forward_term = residual_norm(g, back_rgb, y, norm)?;
    let spanned = BandMatrixMap::span(scheme).apply(g, fake_rgb)?;
    let back_hsi = gx.apply(g, spanned)?;
    let backward_term = residual_norm(g, back_hsi, h, norm)?;
    Ok(g.weighted_sum(&[(forward_term, 1.0), (backward_term, 1.0)]))
}

fn check_cycle_inputs(g: &Graph, x: Var, y: Var, h: Var, gx: &dyn ImageMap, gh: &dyn ImageMap) -> Result<()> {
    check_bands(g, x, 3, "dark image")?;
    check_bands(g, y, 3, "normal-light image")?;
    check_bands(g, h, HSI_BANDS, "hyperspectral image")?;
    if g.value(x).shape() != g.value(y).shape() {
        return Err(Error::contract("dark and normal-light images differ in shape"));
    }
    check_map(gx, HSI_BANDS, HSI_BANDS, "G_x")?;
    check_map(gh, HSI_BANDS, 3, "G_h")
}

/// Aided-supervision cycle loss.
#[allow(clippy::too_many_arguments)]
pub fn cycle_loss(
    g: &mut Graph,
    x: Var,
    y: Var,
    h: Var,
    gx: &dyn ImageMap,
    gh: &dyn ImageMap,
    norm: CycleNorm,
    scheme: SpanScheme,
) -> Result<Var> {
    check_cycle_inputs(g, x, y, h, gx, gh)?;
    let x31 = BandMatrixMap::span(scheme).apply(g, x)?;
    let fake_hsi = gx.apply(g, x31)?;
    let fake_rgb = gh.apply(g, h)?;
    cycle_from_fakes(g, fake_hsi, fake_rgb, y, h, gx, gh, norm, scheme)
}

pub fn identity_loss(
    g: &mut Graph,
    h: Var,
    x31: Var,
    gx: &dyn ImageMap,
    gh: &dyn ImageMap,
    scheme: SpanScheme,
) -> Result<Var> {
    check_bands(g, h, HSI_BANDS, "hyperspectral image")?;
    check_bands(g, x31, HSI_BANDS, "spanned RGB stack")?;
    check_map(gx, HSI_BANDS, HSI_BANDS, "G_x")?;
    check_map(gh, HSI_BANDS, 3, "G_h")?;
    let same_h = gx.apply(g, h)?;
    let hsi_term = residual_norm(g, same_h, h, CycleNorm::L1)?;
    let rgb = BandMatrixMap::collapse(scheme).apply(g, x31)?;
    let same_rgb = gh.apply(g, x31)?;
    let rgb_term = residual_norm(g, same_rgb, rgb, CycleNorm::L1)?;
    Ok(g.weighted_sum(&[(hsi_term, 1.0), (rgb_term, 1.0)]))
}

/// Enhancement objective: non-saturating adversarial term plus weighted L1
/// reconstruction.
pub fn stage2_loss(g: &mut Graph, pred: Var, target: Var, fake_scores: Var, weights: &LossWeights) -> Result<Var> {
    let rec = residual_norm(g, pred, target, CycleNorm::L1)?;
    let adv = generator_adversarial_loss(g, fake_scores);
    Ok(g.weighted_sum(&[(adv, 1.0), (rec, weights.lambda_rec)]))
}

/// Graph inputs for one stage-1 generator update.
pub struct Stage1Inputs {
    /// Dark RGB, `[N, 3, H, W]`.
    pub dark: Var,
    /// Normal-light RGB, `[N, 3, H, W]`.
    pub normal: Var,
    /// Real HSI, `[N, 31, H, W]`.
    pub hsi: Var,
    /// Cumulative normalized profile of real images, the spectral target.
    pub reference_profile: Vec<f64>,
}

pub struct Stage1Models<'a> {
    pub gx: &'a dyn ImageMap,
    pub gh: &'a dyn ImageMap,
    /// HSI-domain discriminator.
    pub dx: &'a dyn ImageMap,
    /// RGB-domain discriminator.
    pub dy: &'a dyn ImageMap,
    pub scheme: SpanScheme,
}

/// Scalar nodes of the stage-1 generator objective.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Terms {
    pub g_adv: Var,
    pub cyc: Var,
    pub idt: Var,
    pub spec: Var,
    pub total: Var,
    /// `G_x(span dark)`, reusable for the discriminator update.
    pub fake_hsi: Var,
    /// `G_h(hsi)`.
    pub fake_rgb: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub g_adv: f64,
    pub cyc: f64,
    pub idt: f64,
    pub spec: f64,
    pub total: f64,
}

impl Stage1Terms {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            g_adv: g.scalar(self.g_adv),
            cyc: g.scalar(self.cyc),
            idt: g.scalar(self.idt),
            spec: g.scalar(self.spec),
            total: g.scalar(self.total),
        }
    }
}

/// `g_adv + λ_cyc·cycle + λ_idt·identity + λ_spec·spectral`.
pub fn total_stage1_loss(
    g: &mut Graph,
    inputs: &Stage1Inputs,
    models: &Stage1Models,
    weights: &LossWeights,
) -> Result<Stage1Terms> {
    let Stage1Models { gx, gh, dx, dy, scheme } = *models;
    check_cycle_inputs(g, inputs.dark, inputs.normal, inputs.hsi, gx, gh)?;
    let x31 = BandMatrixMap::span(scheme).apply(g, inputs.dark)?;
    let fake_hsi = gx.apply(g, x31)?;
    let fake_rgb = gh.apply(g, inputs.hsi)?;

    let score_x = dx.apply(g, fake_hsi)?;
    let adv_x = generator_adversarial_loss(g, score_x);
    let score_y = dy.apply(g, fake_rgb)?;
    let adv_y = generator_adversarial_loss(g, score_y);
    let g_adv = g.weighted_sum(&[(adv_x, 1.0), (adv_y, 1.0)]);

    let cyc = cycle_from_fakes(
        g,
        fake_hsi,
        fake_rgb,
        inputs.normal,
        inputs.hsi,
        gx,
        gh,
        weights.cycle_norm,
        scheme,
    )?;
    let normal31 = BandMatrixMap::span(scheme).apply(g, inputs.normal)?;
    let idt = identity_loss(g, inputs.hsi, normal31, gx, gh, scheme)?;
    let spec = g.spectral_mse(fake_hsi, &inputs.reference_profile)?;
    let total = g.weighted_sum(&[
        (g_adv, 1.0),
        (cyc, weights.lambda_cyc),
        (idt, weights.lambda_idt),
        (spec, weights.lambda_spec),
    ]);
    Ok(Stage1Terms {
        g_adv,
        cyc,
        idt,
        spec,
        total,
        fake_hsi,
        fake_rgb,
    })
}
