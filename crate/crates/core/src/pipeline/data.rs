//! Dataset ingestion, the synthetic scene generator and paired augmentation.
//!
//! On-disk layout: `<root>/low/*.png`, `<root>/high/*.png` matched by file
//! name, and optionally `<root>/hsi/*.mbt` holding 31-band scenes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::{band_wavelength, HSI_BANDS};
use crate::error::{Error, Result};
use crate::image::{load_mbt, load_png_rgb, save_mbt, save_png_rgb, ImagePair, MultiBandImage};

/// One training example: a dark/normal pair and, when available, a
/// hyperspectral scene from the HSI domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub dark: MultiBandImage,
    pub normal: MultiBandImage,
    pub hsi: Option<MultiBandImage>,
}

impl Sample {
    pub fn pair(&self) -> ImagePair {
        ImagePair {
            id: self.id.clone(),
            low: self.dark.clone(),
            normal: self.normal.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedPair {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub pairs: Vec<ImagePair>,
    pub skipped: Vec<SkippedPair>,
}

fn list_stems(dir: &Path, ext: &str) -> Result<BTreeMap<String, std::path::PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Ingestion(format!("missing dataset directory {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pairs `low/<id>.png` with `high/<id>.png` in lexicographic id order.
/// Unmatched files and size mismatches are skipped and recorded.
pub fn ingest_pairs(root: impl AsRef<Path>) -> Result<Ingested> {
    let root = root.as_ref();
    let low = list_stems(&root.join("low"), "png")?;
    let high = list_stems(&root.join("high"), "png")?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (id, low_path) in &low {
        let Some(high_path) = high.get(id) else {
            log::warn!("pair {id}: no high/{id}.png, skipped");
            skipped.push(SkippedPair {
                id: id.clone(),
                reason: "missing normal-light image".into(),
            });
            continue;
        };
        let a = load_png_rgb(low_path)?;
        let b = load_png_rgb(high_path)?;
        match ImagePair::new(id.clone(), a, b) {
            Ok(p) => pairs.push(p),
            Err(e) => {
                log::warn!("pair {id}: {e}, skipped");
                skipped.push(SkippedPair {
                    id: id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    for id in high.keys().filter(|k| !low.contains_key(*k)) {
        log::warn!("pair {id}: no low/{id}.png, skipped");
        skipped.push(SkippedPair {
            id: id.clone(),
            reason: "missing low-light image".into(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Ingestion(format!(
            "no matching low/high pairs under {}",
            root.display()
        )));
    }
    Ok(Ingested { pairs, skipped })
}

/// Pairs plus HSI scenes. A pair uses `hsi/<id>.mbt` when present and
/// otherwise the scenes in name order, cycling; the HSI domain does not
/// need to be paired.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<(Vec<Sample>, Vec<SkippedPair>)> {
    let root = root.as_ref();
    let ingested = ingest_pairs(root)?;
    let hsi_dir = root.join("hsi");
    let scenes = if hsi_dir.is_dir() {
        list_stems(&hsi_dir, "mbt")?
    } else {
        BTreeMap::new()
    };
    let ordered: Vec<&std::path::PathBuf> = scenes.values().collect();
    let mut samples = Vec::with_capacity(ingested.pairs.len());
    for (i, pair) in ingested.pairs.into_iter().enumerate() {
        let hsi = match scenes.get(&pair.id) {
            Some(p) => Some(load_mbt(p)?),
            None if !ordered.is_empty() => Some(load_mbt(ordered[i % ordered.len()])?),
            None => None,
        };
        if let Some(h) = &hsi {
            if h.bands() != HSI_BANDS {
                return Err(Error::Ingestion(format!(
                    "hsi scene for {} has {} bands, expected {HSI_BANDS}",
                    pair.id,
                    h.bands()
                )));
            }
        }
        samples.push(Sample {
            id: pair.id,
            dark: pair.low,
            normal: pair.normal,
            hsi,
        });
    }
    Ok((samples, ingested.skipped))
}

/// Writes samples in the dataset layout.
pub fn write_dataset(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    for sub in ["low", "high", "hsi"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        save_png_rgb(&s.dark, root.join("low").join(format!("{}.png", s.id)))?;
        save_png_rgb(&s.normal, root.join("high").join(format!("{}.png", s.id)))?;
        if let Some(h) = &s.hsi {
            save_mbt(h, root.join("hsi").join(format!("{}.mbt", s.id)))?;
        }
    }
    Ok(())
}

/// Camera response used to render synthetic scenes: one Gaussian
/// sensitivity curve per channel over 400–700 nm, each row summing to 1.
///
/// | channel | peak (nm) | σ (nm) |
/// |---------|-----------|--------|
/// | R       | 610       | 40     |
/// | G       | 540       | 40     |
/// | B       | 460       | 30     |
pub fn response_matrix() -> [[f64; HSI_BANDS]; 3] {
    let curves = [(610.0, 40.0), (540.0, 40.0), (460.0, 30.0)];
    curves.map(|(peak, sigma): (f64, f64)| {
        let mut row = [0.0; HSI_BANDS];
        for (k, r) in row.iter_mut().enumerate() {
            let d = (band_wavelength(k) - peak) / sigma;
            *r = (-0.5 * d * d).exp();
        }
        let sum: f64 = row.iter().sum();
        row.map(|v| v / sum)
    })
}

/// Renders a 31-band scene to RGB through [`response_matrix`].
pub fn render_rgb(hsi: &MultiBandImage) -> Result<MultiBandImage> {
    if hsi.bands() != HSI_BANDS {
        return Err(Error::contract(format!(
            "rendering needs {HSI_BANDS} bands, got {}",
            hsi.bands()
        )));
    }
    let m = response_matrix();
    let n = hsi.plane_len();
    let mut out = vec![0.0; 3 * n];
    for (c, row) in m.iter().enumerate() {
        for (k, &wgt) in row.iter().enumerate() {
            for (o, &v) in out[c * n..(c + 1) * n].iter_mut().zip(hsi.band(k)) {
                *o += wgt * v as f64;
            }
        }
    }
    MultiBandImage::from_f64_clamped(hsi.height(), hsi.width(), 3, &out)
}

/// Synthetic scene generator parameters (documented defaults).
pub const SYNTH_BUMPS: usize = 5;

/// `n` synthetic scenes of `size`×`size`.
///
/// Each HSI is a base level in [0.05, 0.2] plus [`SYNTH_BUMPS`] Gaussian
/// bumps over (row, column, band) with amplitude in [0.3, 0.8], spatial σ in
/// [size/8, size/3] and spectral σ in [3, 10] bands, clipped to [0,1]. The
/// normal image is its rendering; the dark image is
/// `clip(gain·normal)^gamma` with gain in [0.1, 0.4] and gamma in [1.5, 3]
/// drawn per scene.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 || size < 4 {
        return Err(Error::contract(format!(
            "synthetic dataset needs n >= 1 and size >= 4, got n={n}, size={size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (n - 1).to_string().len();
    (0..n)
        .map(|i| {
            let base: f64 = rng.random_range(0.05..0.2);
            let bumps: Vec<[f64; 6]> = (0..SYNTH_BUMPS)
                .map(|_| {
                    [
                        rng.random_range(0.3..0.8),
                        rng.random_range(0.0..size as f64),
                        rng.random_range(0.0..size as f64),
                        rng.random_range(0.0..HSI_BANDS as f64),
                        rng.random_range(size as f64 / 8.0..size as f64 / 3.0),
                        rng.random_range(3.0..10.0),
                    ]
                })
                .collect();
            let gain: f64 = rng.random_range(0.1..0.4);
            let gamma: f64 = rng.random_range(1.5..3.0);
            let hsi = MultiBandImage::from_fn(size, size, HSI_BANDS, |b, r, c| {
                let mut v = base;
                for [amp, cr, cc, cb, sxy, sb] in &bumps {
                    let d2 = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)) / (sxy * sxy)
                        + (b as f64 - cb).powi(2) / (sb * sb);
                    v += amp * (-0.5 * d2).exp();
                }
                v.clamp(0.0, 1.0) as f32
            })?;
            let normal = render_rgb(&hsi)?;
            let dark_data: Vec<f64> = normal
                .data()
                .iter()
                .map(|&v| (gain * v as f64).clamp(0.0, 1.0).powf(gamma))
                .collect();
            let dark = MultiBandImage::from_f64(size, size, 3, &dark_data)?;
            Ok(Sample {
                id: format!("synth_{i:0width$}"),
                dark,
                normal,
                hsi: Some(hsi),
            })
        })
        .collect()
}

/// Crop window and flip decision shared by every member of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPlan {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl AugmentPlan {
    pub fn draw(img_h: usize, img_w: usize, crop_h: usize, crop_w: usize, rng: &mut impl Rng) -> Result<Self> {
        if crop_h == 0 || crop_w == 0 || crop_h > img_h || crop_w > img_w {
            return Err(Error::contract(format!(
                "crop {crop_h}x{crop_w} does not fit a {img_h}x{img_w} image"
            )));
        }
        Ok(Self {
            top: rng.random_range(0..=img_h - crop_h),
            left: rng.random_range(0..=img_w - crop_w),
            height: crop_h,
            width: crop_w,
            flip: rng.random_bool(0.5),
        })
    }

    pub fn apply(&self, img: &MultiBandImage) -> Result<MultiBandImage> {
        let cropped = img.crop(self.top, self.left, self.height, self.width)?;
        Ok(if self.flip { cropped.flip_horizontal() } else { cropped })
    }

    /// Source (row, col) of output pixel (i, j).
    pub fn source_coords(&self, i: usize, j: usize) -> (usize, usize) {
        let jj = if self.flip { self.width - 1 - j } else { j };
        (self.top + i, self.left + jj)
    }
}

/// Random crop and horizontal flip, applied identically to both images.
pub fn augment(pair: &ImagePair, crop: (usize, usize), seed: u64) -> Result<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = AugmentPlan::draw(pair.low.height(), pair.low.width(), crop.0, crop.1, &mut rng)?;
    Ok(ImagePair {
        id: pair.id.clone(),
        low: plan.apply(&pair.low)?,
        normal: plan.apply(&pair.normal)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_rows_sum_to_one() {
        for row in response_matrix() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_hsi_renders_black() {
        let hsi = MultiBandImage::filled(4, 4, 31, 0.0).unwrap();
        assert!(render_rgb(&hsi).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(3, 16, 9).unwrap();
        let b = synth_dataset(3, 16, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(3, 16, 10).unwrap());
        assert_eq!(a[2].id, "synth_2");
    }

    #[test]
    fn crop_larger_than_image_fails() {
        let img = MultiBandImage::filled(8, 8, 3, 0.5).unwrap();
        let pair = ImagePair::new("a", img.clone(), img).unwrap();
        assert!(matches!(augment(&pair, (9, 8), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn same_seed_gives_same_flip() {
        let img = MultiBandImage::from_fn(6, 6, 3, |b, i, j| ((b + 2 * i + 3 * j) % 11) as f32 / 10.0).unwrap();
        let pair = ImagePair::new("a", img.clone(), img).unwrap();
        assert_eq!(augment(&pair, (4, 4), 3).unwrap(), augment(&pair, (4, 4), 3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = AugmentPlan {
            flip: true,
            ..AugmentPlan::draw(6, 6, 6, 6, &mut rng).unwrap()
        };
        let once = plan.apply(&pair.low).unwrap();
        assert_eq!(plan.apply(&once).unwrap(), pair.low);
    }
}
