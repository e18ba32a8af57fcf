//! Per-pixel color transforms, the 12-band colorization stack and the
//! 3 → 31 band spanning operator.
//!
//! Every transform maps [0,1] RGB to three channels in [0,1]:
//!
//! * HSV: hexcone model, hue in degrees / 360, achromatic hue = 0.
//! * YCrCb: BT.601 full range, chroma offset by +0.5.
//! * LAB: sRGB → linear → XYZ (D65) → CIELAB, rescaled as L/100,
//!   (a+128)/255, (b+128)/255.

use crate::error::{Error, Result};
use crate::image::MultiBandImage;

pub const HSI_BANDS: usize = 31;
pub const STACK_BANDS: usize = 12;
/// Wavelength of band 0 in nm; bands are 10 nm apart.
pub const FIRST_WAVELENGTH_NM: f64 = 400.0;
pub const BAND_STEP_NM: f64 = 10.0;

pub fn band_wavelength(k: usize) -> f64 {
    FIRST_WAVELENGTH_NM + BAND_STEP_NM * k as f64
}

pub fn rgb_to_hsv_px([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h_deg = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = h_deg / 360.0;
    // rem_euclid can return exactly 6 for tiny negative inputs
    [if h >= 1.0 { 0.0 } else { h }, s, v]
}

pub fn hsv_to_rgb_px([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = (h * 6.0).rem_euclid(6.0);
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r1 + m, g1 + m, b1 + m]
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;
const CR_SCALE: f64 = 2.0 * (1.0 - KR);
const CB_SCALE: f64 = 2.0 * (1.0 - KB);

pub fn rgb_to_ycrcb_px([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    [y, (r - y) / CR_SCALE + 0.5, (b - y) / CB_SCALE + 0.5]
}

pub fn ycrcb_to_rgb_px([y, cr, cb]: [f64; 3]) -> [f64; 3] {
    let r = y + CR_SCALE * (cr - 0.5);
    let b = y + CB_SCALE * (cb - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

/// D65 white as the image of sRGB white under the forward matrix, so that
/// (1,1,1) lands exactly on L = 100, a = b = 0.
fn white_point() -> [f64; 3] {
    SRGB_TO_XYZ.map(|row| row.iter().sum())
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const LAB_EPS: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPS {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > LAB_EPS {
        t
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

/// Unscaled CIELAB (L in [0,100]).
pub fn rgb_to_lab_raw(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let white = white_point();
    let xyz: Vec<f64> = SRGB_TO_XYZ
        .iter()
        .zip(white)
        .map(|(row, w)| (row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]) / w)
        .collect();
    let (fx, fy, fz) = (lab_f(xyz[0]), lab_f(xyz[1]), lab_f(xyz[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn rgb_to_lab_px(rgb: [f64; 3]) -> [f64; 3] {
    let [l, a, b] = rgb_to_lab_raw(rgb);
    [
        (l / 100.0).clamp(0.0, 1.0),
        ((a + 128.0) / 255.0).clamp(0.0, 1.0),
        ((b + 128.0) / 255.0).clamp(0.0, 1.0),
    ]
}

pub fn lab_to_rgb_px([ls, as_, bs]: [f64; 3]) -> [f64; 3] {
    let l = ls * 100.0;
    let a = as_ * 255.0 - 128.0;
    let b = bs * 255.0 - 128.0;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let white = white_point();
    let xyz = [
        lab_f_inv(fx) * white[0],
        lab_f_inv(fy) * white[1],
        lab_f_inv(fz) * white[2],
    ];
    XYZ_TO_SRGB.map(|row| {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        linear_to_srgb(lin.max(0.0)).clamp(0.0, 1.0)
    })
}

fn require_rgb(img: &MultiBandImage) -> Result<()> {
    if img.bands() != 3 {
        return Err(Error::contract(format!(
            "expected a 3-band image, got {}",
            img.bands()
        )));
    }
    Ok(())
}

/// Applies a per-pixel 3 → 3 map. Outputs are clamped to [0,1] to absorb
/// rounding at the range ends.
pub fn map_pixels<F>(img: &MultiBandImage, f: F) -> Result<MultiBandImage>
where
    F: Fn([f64; 3]) -> [f64; 3],
{
    require_rgb(img)?;
    let n = img.plane_len();
    let src = img.data();
    let mut out = vec![0f64; 3 * n];
    for p in 0..n {
        let px = f([src[p] as f64, src[n + p] as f64, src[2 * n + p] as f64]);
        for c in 0..3 {
            out[c * n + p] = px[c];
        }
    }
    MultiBandImage::from_f64_clamped(img.height(), img.width(), 3, &out)
}

pub fn rgb_to_hsv(img: &MultiBandImage) -> Result<MultiBandImage> {
    map_pixels(img, rgb_to_hsv_px)
}

pub fn hsv_to_rgb(img: &MultiBandImage) -> Result<MultiBandImage> {
    map_pixels(img, hsv_to_rgb_px)
}

pub fn rgb_to_ycrcb(img: &MultiBandImage) -> Result<MultiBandImage> {
    map_pixels(img, rgb_to_ycrcb_px)
}

pub fn ycrcb_to_rgb(img: &MultiBandImage) -> Result<MultiBandImage> {
    map_pixels(img, ycrcb_to_rgb_px)
}

pub fn rgb_to_lab(img: &MultiBandImage) -> Result<MultiBandImage> {
    map_pixels(img, rgb_to_lab_px)
}

pub fn lab_to_rgb(img: &MultiBandImage) -> Result<MultiBandImage> {
    map_pixels(img, lab_to_rgb_px)
}

/// Twelve bands ordered [R,G,B, H,S,V, Y,Cr,Cb, L,A,B].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorStack12(MultiBandImage);

impl ColorStack12 {
    pub fn image(&self) -> &MultiBandImage {
        &self.0
    }

    pub fn into_image(self) -> MultiBandImage {
        self.0
    }
}

pub fn build_color_stack(rgb: &MultiBandImage) -> Result<ColorStack12> {
    let hsv = rgb_to_hsv(rgb)?;
    let ycrcb = rgb_to_ycrcb(rgb)?;
    let lab = rgb_to_lab(rgb)?;
    Ok(ColorStack12(MultiBandImage::stack(&[rgb, &hsv, &ycrcb, &lab])?))
}

/// How the three RGB planes are distributed over 31 pseudo-bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpanScheme {
    /// Bands 0–10 copy B, 11–20 copy G, 21–30 copy R (ascending wavelength).
    #[default]
    WavelengthBlocks,
    /// Band k copies [B,G,R][k mod 3].
    Cyclic,
}

impl SpanScheme {
    /// RGB channel index (0 = R, 1 = G, 2 = B) feeding pseudo-band `k`.
    pub fn source_channel(self, k: usize) -> usize {
        match self {
            SpanScheme::WavelengthBlocks => match k {
                0..=10 => 2,
                11..=20 => 1,
                _ => 0,
            },
            SpanScheme::Cyclic => [2, 1, 0][k % 3],
        }
    }

    /// 31×3 selection matrix, row k one-hot on `source_channel(k)`.
    pub fn span_matrix(self) -> Vec<[f64; 3]> {
        (0..HSI_BANDS)
            .map(|k| {
                let mut row = [0.0; 3];
                row[self.source_channel(k)] = 1.0;
                row
            })
            .collect()
    }

    /// 3×31 matrix averaging every pseudo-band that came from each channel;
    /// the left inverse of `span_matrix`.
    pub fn collapse_matrix(self) -> [Vec<f64>; 3] {
        let mut m = [vec![0.0; HSI_BANDS], vec![0.0; HSI_BANDS], vec![0.0; HSI_BANDS]];
        for (c, row) in m.iter_mut().enumerate() {
            let members: Vec<usize> = (0..HSI_BANDS).filter(|&k| self.source_channel(k) == c).collect();
            for &k in &members {
                row[k] = 1.0 / members.len() as f64;
            }
        }
        m
    }
}

pub fn span_rgb_to_31(rgb: &MultiBandImage, scheme: SpanScheme) -> Result<MultiBandImage> {
    require_rgb(rgb)?;
    let n = rgb.plane_len();
    let mut data = Vec::with_capacity(HSI_BANDS * n);
    for k in 0..HSI_BANDS {
        data.extend_from_slice(rgb.band(scheme.source_channel(k)));
    }
    MultiBandImage::new(rgb.height(), rgb.width(), HSI_BANDS, data)
}

/// Inverse of spanning: each RGB channel is the mean of its pseudo-bands.
pub fn collapse_31_to_rgb(img: &MultiBandImage, scheme: SpanScheme) -> Result<MultiBandImage> {
    if img.bands() != HSI_BANDS {
        return Err(Error::contract(format!(
            "collapse expects {HSI_BANDS} bands, got {}",
            img.bands()
        )));
    }
    let n = img.plane_len();
    let m = scheme.collapse_matrix();
    let mut out = vec![0f64; 3 * n];
    for (c, row) in m.iter().enumerate() {
        for (k, &wgt) in row.iter().enumerate() {
            if wgt != 0.0 {
                for (o, &v) in out[c * n..(c + 1) * n].iter_mut().zip(img.band(k)) {
                    *o += wgt * v as f64;
                }
            }
        }
    }
    MultiBandImage::from_f64_clamped(img.height(), img.width(), 3, &out)
}
