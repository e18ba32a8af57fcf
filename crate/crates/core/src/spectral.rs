//! Fourier power-spectrum profiles.
//!
//! A channel's profile is its centered 2D power spectrum (squared magnitude
//! of the unnormalized DFT, DC moved to `(H/2, W/2)`) averaged over rings of
//! equal rounded radius. Bins run `0..R` with `R = min(H, W) / 2`; pixels
//! farther out are ignored. The cumulative profile is the mean of the
//! per-channel rows.

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::MultiBandImage;

/// Unshifted 2D DFT of a real plane (rows first, then columns).
pub fn fft2(plane: ArrayView2<f64>) -> Array2<Complex64> {
    fft2_complex(plane.mapv(|v| Complex64::new(v, 0.0)), false)
}

fn fft2_complex(mut data: Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let buf = data.as_slice_mut().expect("standard layout");
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = buf[i * w + j];
        }
        col_fft.process(&mut column);
        for i in 0..h {
            buf[i * w + j] = column[i];
        }
    }
    data
}

/// Centered power spectrum.
pub fn power_spectrum(plane: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (h, w) = plane.dim();
    if h < 2 || w < 2 {
        return Err(Error::contract(format!(
            "power spectrum needs at least 2x2, got {h}x{w}"
        )));
    }
    let spec = fft2(plane);
    let mut out = Array2::zeros((h, w));
    for ((u, v), z) in spec.indexed_iter() {
        out[[(u + h / 2) % h, (v + w / 2) % w]] = z.norm_sqr();
    }
    Ok(out)
}

/// Ring membership of every centered-spectrum position.
#[derive(Debug, Clone)]
pub struct RadialBins {
    /// Bin of each position (row-major, centered layout); `None` beyond the last bin.
    index: Vec<Option<usize>>,
    counts: Vec<usize>,
}

impl RadialBins {
    pub fn new(height: usize, width: usize) -> Self {
        let bins = height.min(width) / 2;
        let (ci, cj) = ((height / 2) as f64, (width / 2) as f64);
        let mut counts = vec![0; bins];
        let mut index = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                let r = ((i as f64 - ci).hypot(j as f64 - cj)).round() as usize;
                if r < bins {
                    counts[r] += 1;
                    index.push(Some(r));
                } else {
                    index.push(None);
                }
            }
        }
        Self { index, counts }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    fn average(&self, power: ArrayView2<f64>) -> Vec<f64> {
        let mut sums = vec![0.0; self.len()];
        for (bin, &p) in self.index.iter().zip(power.iter()) {
            if let Some(r) = bin {
                sums[*r] += p;
            }
        }
        sums.iter()
            .zip(&self.counts)
            .map(|(s, &c)| s / c as f64)
            .collect()
    }
}

/// Ring-averaged profile of a centered power plane.
pub fn azimuthal_profile(power: ArrayView2<f64>) -> Vec<f64> {
    let (h, w) = power.dim();
    RadialBins::new(h, w).average(power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    /// C × R, one row per channel.
    pub per_channel: Array2<f64>,
    pub cumulative: Vec<f64>,
    pub normalized: bool,
}

impl SpectralProfile {
    pub fn bins(&self) -> usize {
        self.cumulative.len()
    }

    pub fn channels(&self) -> usize {
        self.per_channel.nrows()
    }

    /// CSV with header `bin,channel_0,...,channel_{C-1},cumulative`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin");
        for c in 0..self.channels() {
            out.push_str(&format!(",channel_{c}"));
        }
        out.push_str(",cumulative\n");
        for r in 0..self.bins() {
            out.push_str(&r.to_string());
            for c in 0..self.channels() {
                out.push_str(&format!(",{}", self.per_channel[[c, r]]));
            }
            out.push_str(&format!(",{}\n", self.cumulative[r]));
        }
        out
    }
}

/// Profile of band-sequential f64 planes.
pub fn profile_of_planes(
    planes: &[f64],
    bands: usize,
    height: usize,
    width: usize,
    normalize: bool,
) -> Result<SpectralProfile> {
    if height.min(width) < 4 {
        return Err(Error::contract(format!(
            "spectral profile needs min(H,W) >= 4, got {height}x{width}"
        )));
    }
    if planes.len() != bands * height * width || bands == 0 {
        return Err(Error::contract("plane buffer does not match dimensions"));
    }
    let bins = RadialBins::new(height, width);
    let n = height * width;
    let mut per_channel = Array2::zeros((bands, bins.len()));
    for c in 0..bands {
        let plane = ArrayView2::from_shape((height, width), &planes[c * n..(c + 1) * n]).unwrap();
        let power = power_spectrum(plane)?;
        let mut row = bins.average(power.view());
        if normalize && row[0] != 0.0 {
            let dc = row[0];
            row.iter_mut().for_each(|v| *v /= dc);
        }
        per_channel.row_mut(c).assign(&ndarray::Array1::from(row));
    }
    let cumulative = per_channel.mean_axis(ndarray::Axis(0)).unwrap().to_vec();
    Ok(SpectralProfile {
        per_channel,
        cumulative,
        normalized: normalize,
    })
}

pub fn spectral_profile(img: &MultiBandImage, normalize: bool) -> Result<SpectralProfile> {
    profile_of_planes(&img.to_f64(), img.bands(), img.height(), img.width(), normalize)
}

fn mse_common(a: &[f64], b: &[f64]) -> Result<(usize, f64)> {
    let len = a.len().min(b.len());
    if len < 2 {
        return Err(Error::contract(format!(
            "spectral MSE needs at least 2 common bins, got {len}"
        )));
    }
    let sum: f64 = (1..len).map(|r| (a[r] - b[r]).powi(2)).sum();
    Ok((len, sum / (len - 1) as f64))
}

/// Mean squared difference of cumulative profiles over bins `1..L`, where
/// `L` is the shorter length. Bin 0 is skipped since normalized profiles
/// pin it to 1.
pub fn spectral_mse_loss(a: &SpectralProfile, b: &SpectralProfile) -> Result<f64> {
    if !a.normalized || !b.normalized {
        return Err(Error::contract("spectral MSE expects normalized profiles"));
    }
    mse_common(&a.cumulative, &b.cumulative).map(|(_, v)| v)
}

/// Loss of the normalized cumulative profile of `planes` against a
/// reference cumulative profile, together with its gradient with respect to
/// every input sample.
pub fn spectral_mse_with_grad(
    planes: &[f64],
    bands: usize,
    height: usize,
    width: usize,
    reference: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let raw = profile_of_planes(planes, bands, height, width, false)?;
    let bins = RadialBins::new(height, width);
    let normalized: Vec<Vec<f64>> = raw
        .per_channel
        .rows()
        .into_iter()
        .map(|row| {
            let dc = row[0];
            row.iter().map(|v| if dc != 0.0 { v / dc } else { *v }).collect()
        })
        .collect();
    let cumulative: Vec<f64> = (0..bins.len())
        .map(|r| normalized.iter().map(|row| row[r]).sum::<f64>() / bands as f64)
        .collect();
    let (len, loss) = mse_common(&cumulative, reference)?;

    // d loss / d cumulative[r]
    let mut d_cum = vec![0.0; bins.len()];
    for r in 1..len {
        d_cum[r] = 2.0 * (cumulative[r] - reference[r]) / (len - 1) as f64;
    }

    let n = height * width;
    let mut grad = vec![0.0; planes.len()];
    let (h2, w2) = (height / 2, width / 2);
    for c in 0..bands {
        let row = raw.per_channel.row(c);
        let dc = row[0];
        // d loss / d ring-mean of channel c
        let mut d_ring = vec![0.0; bins.len()];
        if dc != 0.0 {
            let mut d_dc = 0.0;
            for r in 1..bins.len() {
                d_ring[r] = d_cum[r] / (bands as f64 * dc);
                d_dc -= d_cum[r] * row[r] / (bands as f64 * dc * dc);
            }
            d_ring[0] = d_dc;
        } else {
            for r in 0..bins.len() {
                d_ring[r] = d_cum[r] / bands as f64;
            }
        }
        // d loss / d power in unshifted frequency layout
        let plane = ArrayView2::from_shape((height, width), &planes[c * n..(c + 1) * n]).unwrap();
        let mut spec = fft2(plane);
        for u in 0..height {
            for v in 0..width {
                let centered = ((u + h2) % height) * width + (v + w2) % width;
                let g = match bins.index[centered] {
                    Some(r) => d_ring[r] / bins.counts[r] as f64,
                    None => 0.0,
                };
                spec[[u, v]] *= g;
            }
        }
        // d|X_k|^2/dx_n summed against g_k is 2 Re(sum_k g_k X_k e^{+i theta_kn}),
        // i.e. twice the unnormalized inverse DFT.
        let back = fft2_complex(spec, true);
        for (dst, z) in grad[c * n..(c + 1) * n].iter_mut().zip(back.iter()) {
            *dst = 2.0 * z.re;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn constant_plane_has_only_dc() {
        let c = 0.3;
        let plane = Array2::from_elem((6, 8), c);
        let p = power_spectrum(plane.view()).unwrap();
        let dc = (c * 48.0) * (c * 48.0);
        assert!((p[[3, 4]] - dc).abs() < 1e-9 * dc);
        let rest: f64 = p.iter().sum::<f64>() - p[[3, 4]];
        assert!(rest.abs() < 1e-9);
    }

    #[test]
    fn power_spectrum_rejects_tiny_planes() {
        assert!(power_spectrum(Array2::<f64>::zeros((1, 5)).view()).is_err());
    }

    #[test]
    fn zero_and_center_impulse_profiles() {
        let zero = Array2::<f64>::zeros((8, 8));
        assert!(azimuthal_profile(zero.view()).iter().all(|&v| v == 0.0));
        let mut imp = Array2::<f64>::zeros((8, 8));
        imp[[4, 4]] = 2.0;
        let prof = azimuthal_profile(imp.view());
        assert_eq!(prof.len(), 4);
        assert!(prof[0] > 0.0);
        assert!(prof[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_normalized_profile() {
        let img = MultiBandImage::filled(8, 8, 31, 0.7).unwrap();
        let prof = spectral_profile(&img, true).unwrap();
        for row in prof.per_channel.rows() {
            assert_eq!(row[0], 1.0);
            assert!(row.iter().skip(1).all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn zero_channel_stays_zero_when_normalized() {
        let img = MultiBandImage::filled(8, 8, 2, 0.0).unwrap();
        let prof = spectral_profile(&img, true).unwrap();
        assert!(prof.per_channel.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_matches_hand_value() {
        let mk = |v: Vec<f64>| SpectralProfile {
            per_channel: Array2::from_shape_vec((1, v.len()), v.clone()).unwrap(),
            cumulative: v,
            normalized: true,
        };
        let a = mk(vec![1.0, 0.5, 0.3]);
        let b = mk(vec![1.0, 0.3, 0.3]);
        assert!((spectral_mse_loss(&a, &b).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(spectral_mse_loss(&a, &a).unwrap(), 0.0);
        let short = mk(vec![1.0]);
        assert!(spectral_mse_loss(&a, &short).is_err());
        let raw = SpectralProfile {
            normalized: false,
            ..a.clone()
        };
        assert!(spectral_mse_loss(&raw, &b).is_err());
    }

    #[test]
    fn csv_layout() {
        let img = MultiBandImage::filled(8, 8, 2, 0.5).unwrap();
        let csv = spectral_profile(&img, true).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("bin,channel_0,channel_1,cumulative"));
        assert_eq!(lines.next(), Some("0,1,1,1"));
        assert_eq!(csv.lines().count(), 5);
    }
}
