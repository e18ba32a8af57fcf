//! Multi-band raster type and its on-disk formats.
//!
//! Samples are stored band-sequential (all of band 0, then band 1, ...), each
//! plane row-major. The MBT container is:
//!
//! ```text
//! "MBT1" | H: u32 LE | W: u32 LE | C: u32 LE | H*W*C f32 LE samples
//! ```

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MBT_MAGIC: &[u8; 4] = b"MBT1";

/// An H×W×C raster of samples in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBandImage {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

fn check_samples<I: IntoIterator<Item = f64>>(samples: I) -> Result<()> {
    for (index, value) in samples.into_iter().enumerate() {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::Validation { index, value });
        }
    }
    Ok(())
}

impl MultiBandImage {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::contract(format!(
                "image dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if data.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} samples for {height}x{width}x{bands}, got {}",
                data.len()
            )));
        }
        check_samples(data.iter().map(|&v| v as f64))?;
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    /// Builds from f64 samples; values are narrowed to f32 after validation.
    pub fn from_f64(height: usize, width: usize, bands: usize, data: &[f64]) -> Result<Self> {
        check_samples(data.iter().copied())?;
        Self::new(height, width, bands, data.iter().map(|&v| v as f32).collect())
    }

    /// Clamps every sample into [0,1] first. NaN becomes 0.
    pub fn from_f64_clamped(height: usize, width: usize, bands: usize, data: &[f64]) -> Result<Self> {
        let clamped: Vec<f32> = data
            .iter()
            .map(|&v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 })
            .collect();
        Self::new(height, width, bands, clamped)
    }

    pub fn filled(height: usize, width: usize, bands: usize, value: f32) -> Result<Self> {
        Self::new(height, width, bands, vec![value; height * width * bands])
    }

    pub fn from_fn<F>(height: usize, width: usize, bands: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> f32,
    {
        let mut data = Vec::with_capacity(height * width * bands);
        for b in 0..bands {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(b, i, j));
                }
            }
        }
        Self::new(height, width, bands, data)
    }

    /// Concatenates bands of equally sized images.
    pub fn stack(parts: &[&MultiBandImage]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("cannot stack zero images"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut bands = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::contract(format!(
                    "stack size mismatch: {}x{} vs {h}x{w}",
                    p.height, p.width
                )));
            }
            data.extend_from_slice(&p.data);
            bands += p.bands;
        }
        Ok(Self {
            height: h,
            width: w,
            bands,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    /// Bands `range` as a new image.
    pub fn select_bands(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.bands {
            return Err(Error::contract(format!(
                "band range {range:?} invalid for {} bands",
                self.bands
            )));
        }
        let n = self.plane_len();
        Ok(Self {
            height: self.height,
            width: self.width,
            bands: range.len(),
            data: self.data[range.start * n..range.end * n].to_vec(),
        })
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.bands == other.bands
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::contract(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Self::from_fn(height, width, self.bands, |b, i, j| {
            self.get(b, top + i, left + j)
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }
}

/// A low-light image and its normal-light counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub low: MultiBandImage,
    pub normal: MultiBandImage,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, low: MultiBandImage, normal: MultiBandImage) -> Result<Self> {
        let id = id.into();
        if low.bands() != 3 || normal.bands() != 3 {
            return Err(Error::contract(format!(
                "pair {id}: both members must be RGB, got {} and {} bands",
                low.bands(),
                normal.bands()
            )));
        }
        if low.height() != normal.height() || low.width() != normal.width() {
            return Err(Error::contract(format!(
                "pair {id}: size mismatch {}x{} vs {}x{}",
                low.height(),
                low.width(),
                normal.height(),
                normal.width()
            )));
        }
        Ok(Self { id, low, normal })
    }
}

pub fn encode_mbt(img: &MultiBandImage, w: &mut dyn Write) -> std::io::Result<()> {
    w.write_all(MBT_MAGIC)?;
    for dim in [img.height, img.width, img.bands] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in &img.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn decode_mbt(bytes: &[u8]) -> Result<MultiBandImage> {
    if bytes.len() < 16 || &bytes[..4] != MBT_MAGIC {
        return Err(Error::Format("missing MBT1 header".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!("zero dimension in header {h}x{w}x{c}")));
    }
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "header declares {count} samples ({} bytes) but payload has {} bytes",
            count * 4,
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    MultiBandImage::new(h, w, c, data)
}

pub fn load_mbt(path: impl AsRef<Path>) -> Result<MultiBandImage> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_mbt(&bytes)
}

pub fn save_mbt(img: &MultiBandImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| encode_mbt(img, w))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8-bit PNG as RGB in [0,1]. Gray and alpha variants are expanded
/// or dropped so the result always has three bands.
pub fn load_png_rgb(path: impl AsRef<Path>) -> Result<MultiBandImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let mut data = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        let px = &bytes[p * channels..(p + 1) * channels];
        for c in 0..3 {
            let code = match channels {
                1 | 2 => px[0],
                _ => px[c],
            };
            data[c * h * w + p] = code as f32 / 255.0;
        }
    }
    MultiBandImage::new(h, w, 3, data)
}

/// 8-bit quantization: code = round(255·v).
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png_rgb(img: &MultiBandImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.bands() != 3 {
        return Err(Error::contract(format!(
            "PNG export needs 3 bands, got {}",
            img.bands()
        )));
    }
    let n = img.plane_len();
    let mut interleaved = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            interleaved.push(quantize(img.data[c * n + p]));
        }
    }
    write_atomic(path, |w| {
        let mut enc = png::Encoder::new(w, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(std::io::Error::other)?;
        writer
            .write_image_data(&interleaved)
            .map_err(std::io::Error::other)?;
        writer.finish().map_err(std::io::Error::other)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mbt_bytes(h: u32, w: u32, c: u32, samples: &[f32]) -> Vec<u8> {
        let mut out = MBT_MAGIC.to_vec();
        for d in [h, w, c] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn decodes_small_file() {
        let img = decode_mbt(&mbt_bytes(2, 2, 1, &[0.0, 0.25, 0.5, 1.0])).unwrap();
        assert_eq!((img.height(), img.width(), img.bands()), (2, 2, 1));
        assert_eq!(img.data(), &[0.0, 0.25, 0.5, 1.0]);
        assert_eq!(img.get(0, 1, 0), 0.5);
    }

    #[test]
    fn decodes_constant_hsi() {
        let img = decode_mbt(&mbt_bytes(8, 8, 31, &vec![0.5; 8 * 8 * 31])).unwrap();
        assert_eq!(img.bands(), 31);
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_length_mismatch() {
        let err = decode_mbt(&mbt_bytes(2, 2, 1, &[0.0, 0.1, 0.2])).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = mbt_bytes(1, 1, 1, &[0.0]);
        bytes[3] = b'2';
        assert!(matches!(decode_mbt(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_out_of_range_with_index() {
        let err = decode_mbt(&mbt_bytes(1, 3, 1, &[0.0, 1.5, 0.2])).unwrap_err();
        assert!(matches!(err, Error::Validation { index: 1, .. }));
        let err = decode_mbt(&mbt_bytes(1, 2, 1, &[0.1, f32::NAN])).unwrap_err();
        assert!(matches!(err, Error::Validation { index: 1, .. }));
    }

    #[test]
    fn constructors_reject_invalid_samples() {
        assert!(MultiBandImage::new(1, 1, 1, vec![-0.1]).is_err());
        assert!(MultiBandImage::new(1, 1, 1, vec![f32::INFINITY]).is_err());
        assert!(MultiBandImage::from_f64(1, 1, 1, &[1.0 + 1e-9]).is_err());
        assert!(MultiBandImage::new(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn save_to_unwritable_path_is_io_error() {
        let img = MultiBandImage::filled(2, 2, 1, 0.5).unwrap();
        let err = save_mbt(&img, "/nonexistent-dir/x/y.mbt").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn png_codes_map_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let img = MultiBandImage::new(1, 2, 3, vec![1.0, 128.0 / 255.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        save_png_rgb(&img, &path).unwrap();
        let back = load_png_rgb(&path).unwrap();
        assert_eq!(back.get(0, 0, 0), 1.0);
        assert!((back.get(0, 0, 1) as f64 - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn png_save_rejects_non_rgb() {
        let img = MultiBandImage::filled(2, 2, 31, 0.5).unwrap();
        assert!(matches!(
            save_png_rgb(&img, "/tmp/never.png"),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn flip_is_involution_and_crop_of_constant_is_constant() {
        let img = MultiBandImage::from_fn(4, 5, 2, |b, i, j| ((b * 20 + i * 5 + j) as f32) / 40.0).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        let c = MultiBandImage::filled(6, 6, 3, 0.3).unwrap();
        assert!(c.crop(1, 2, 3, 3).unwrap().data().iter().all(|&v| v == 0.3));
        assert!(c.crop(4, 0, 3, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn png_round_trip_preserves_codes(codes in proptest::collection::vec(any::<u8>(), 3 * 4 * 3)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("q.png");
            let data: Vec<f32> = codes.iter().map(|&c| c as f32 / 255.0).collect();
            let img = MultiBandImage::new(4, 3, 3, data).unwrap();
            save_png_rgb(&img, &path).unwrap();
            let back = load_png_rgb(&path).unwrap();
            let back_codes: Vec<u8> = back.data().iter().map(|&v| quantize(v)).collect();
            prop_assert_eq!(back_codes, codes);
        }
    }
}
