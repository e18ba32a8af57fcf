//! Component ablation: identical training runs that differ only in the
//! spectral regularizer and the color stack.

use crate::error::{Error, Result};
use crate::image::ImagePair;

use super::config::{Ablation, TrainConfig};
use super::data::Sample;
use super::evaluate::{evaluate, Cascade};
use super::train::train;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    /// Benchmark SSIM reported for the full-scale model. Not comparable to
    /// desk-scale runs and never asserted.
    pub reference_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,ssim,psnr_db,reference_ssim\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.4}\n",
                r.ablation, r.mean_ssim, r.mean_psnr, r.reference_ssim
            ));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| model | spectral profile | color stack | SSIM | PSNR (dB) | reference SSIM* |\n\
             |---|---|---|---|---|---|\n",
        );
        let mark = |b: bool| if b { "yes" } else { "no" };
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.4} | {:.3} | {:.4} |\n",
                r.ablation,
                mark(r.ablation.spectral_enabled()),
                mark(r.ablation.color_stack_enabled()),
                r.mean_ssim,
                r.mean_psnr,
                r.reference_ssim
            ));
        }
        s.push_str("\n*full-scale benchmark values, not reproducible at this scale\n");
        s
    }
}

/// Trains one copy of `base` per ablation setting and evaluates each on
/// `eval`.
pub fn ablate(base: &TrainConfig, variants: &[Ablation], data: &[Sample], eval: &[ImagePair]) -> Result<AblationTable> {
    if variants.len() < 2 {
        return Err(Error::Config("ablation needs at least two configurations".into()));
    }
    let mut table = AblationTable::default();
    for &ablation in variants {
        let cfg = TrainConfig {
            ablation,
            ..base.clone()
        };
        log::info!("ablation {ablation}: training {} steps", cfg.steps);
        let out = train(&cfg, data)?;
        let cascade = Cascade::from_models(&out.models, cfg.span_scheme, ablation)?;
        let report = evaluate(&cascade, eval, false)?;
        table.rows.push(AblationRow {
            ablation,
            mean_ssim: report.mean_ssim(),
            mean_psnr: report.mean_psnr(),
            reference_ssim: ablation.reference_ssim(),
        });
    }
    Ok(table)
}
