//! Inference through the full cascade and metric reports.

use crate::colorspace::{span_rgb_to_31, SpanScheme};
use crate::error::{Error, Result};
use crate::image::{ImagePair, MultiBandImage};
use crate::networks::{forward_unet, Checkpoint, NetworkState};

use super::config::Ablation;
use super::metrics::MetricsReport;
use super::train::{config_from_checkpoint, stage2_in_bands, stage2_stack, Models};

/// The inference half of a trained cascade.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub gx: NetworkState,
    pub gz: NetworkState,
    pub scheme: SpanScheme,
    pub ablation: Ablation,
}

impl Cascade {
    pub fn from_models(models: &Models, scheme: SpanScheme, ablation: Ablation) -> Result<Self> {
        if models.gz.spec().in_bands != stage2_in_bands(ablation) {
            return Err(Error::Config(format!(
                "g_z takes {} bands but ablation {ablation} needs {}",
                models.gz.spec().in_bands,
                stage2_in_bands(ablation)
            )));
        }
        Ok(Self {
            gx: models.gx.clone(),
            gz: models.gz.clone(),
            scheme,
            ablation,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = config_from_checkpoint(ckpt)?;
        Self::from_models(&Models::from_checkpoint(ckpt)?, cfg.span_scheme, cfg.ablation)
    }

    /// Span to 31 bands and reconstruct the HSI estimate.
    pub fn reconstruct_hsi(&self, dark: &MultiBandImage) -> Result<MultiBandImage> {
        forward_unet(&self.gx, &span_rgb_to_31(dark, self.scheme)?)
    }

    pub fn enhance(&self, dark: &MultiBandImage) -> Result<MultiBandImage> {
        if dark.bands() != 3 {
            return Err(Error::contract(format!("enhance needs RGB input, got {} bands", dark.bands())));
        }
        let hsi = self.reconstruct_hsi(dark)?;
        let stack = stage2_stack(self.ablation, dark)?;
        forward_unet(&self.gz, &MultiBandImage::stack(&[&hsi, &stack])?)
    }
}

/// Scores the cascade output of each pair against its normal-light image.
/// With `bypass` the normal image is scored against itself, which checks
/// the harness rather than the model.
pub fn evaluate(cascade: &Cascade, pairs: &[ImagePair], bypass: bool) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for p in pairs {
        let out = if bypass { p.normal.clone() } else { cascade.enhance(&p.low)? };
        report.push(p.id.clone(), &out, &p.normal)?;
    }
    Ok(report)
}

/// Scores the dark input itself, the no-enhancement baseline.
pub fn baseline(pairs: &[ImagePair]) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for p in pairs {
        report.push(p.id.clone(), &p.low, &p.normal)?;
    }
    Ok(report)
}
