//! Image containers plus PNG and PFM input/output.
//!
//! [`FeatureImage`] stores an arbitrary channel count in f64 for use as
//! render targets and gradient buffers. [`MaskImage`] is a binary mask.
//! PFM files hold float radiance; PNG is used for 8-bit previews and masks.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Row-major multi-channel float image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        FeatureImage { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(
        width: usize,
        height: usize,
        channels: usize,
        mut f: F,
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.idx(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.idx(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    /// Keep the first `n` channels.
    pub fn truncated(&self, n: usize) -> FeatureImage {
        assert!(n <= self.channels);
        FeatureImage::from_fn(self.width, self.height, n, |x, y, c| self.get(x, y, c))
    }

    /// Bilinear sample with clamped borders, continuous pixel coordinates.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        for c in 0..self.channels {
            let a = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
            let b = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
            out[c] = a * (1.0 - ty) + b * ty;
        }
    }

    /// 2x2 box-filter downsample; odd trailing rows/columns average what exists.
    pub fn downsample_half(&self) -> FeatureImage {
        let w = (self.width + 1) / 2;
        let h = (self.height + 1) / 2;
        let mut out = FeatureImage::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let sx = 2 * x + dx;
                            let sy = 2 * y + dy;
                            if sx < self.width && sy < self.height {
                                sum += self.get(sx, sy, c);
                                n += 1.0;
                            }
                        }
                    }
                    out.set(x, y, c, sum / n);
                }
            }
        }
        out
    }

    /// Copy a rectangular window. The window must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> FeatureImage {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        FeatureImage::from_fn(width, height, self.channels, |x, y, c| {
            self.get(x0 + x, y0 + y, c)
        })
    }

    /// Mean of |a - b| over all entries.
    pub fn mean_abs_diff(&self, other: &FeatureImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let n = self.data.len().max(1) as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }
}

/// Binary mask; nonzero = inside.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize) -> Self {
        MaskImage { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, inside: bool) {
        self.data[y * self.width + x] = if inside { 255 } else { 0 };
    }

    pub fn count_inside(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction_inside(&self) -> f64 {
        self.count_inside() as f64 / (self.width * self.height).max(1) as f64
    }

    /// Float view (1 inside, 0 outside) for loss computation.
    pub fn to_float(&self) -> FeatureImage {
        FeatureImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Copy a rectangular window. The window must lie inside the mask.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> MaskImage {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        let mut out = MaskImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                out.set(x, y, self.get(x0 + x, y0 + y));
            }
        }
        out
    }

    /// Majority-free downsample: a low-res pixel is inside when any source is.
    pub fn downsample_half(&self) -> MaskImage {
        let w = (self.width + 1) / 2;
        let h = (self.height + 1) / 2;
        let mut out = MaskImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut inside = false;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let sx = 2 * x + dx;
                        let sy = 2 * y + dy;
                        if sx < self.width && sy < self.height && self.get(sx, sy) {
                            inside = true;
                        }
                    }
                }
                out.set(x, y, inside);
            }
        }
        out
    }
}

/// Write the first three channels as 8-bit RGB PNG, values clamped to [0,1].
pub fn save_png(path: &Path, img: &FeatureImage) -> Result<()> {
    if img.channels < 3 {
        return save_png_gray(path, img);
    }
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([q(p[0]), q(p[1]), q(p[2])]));
        }
    }
    buf.save(path).map_err(Error::from)
}

fn save_png_gray(path: &Path, img: &FeatureImage) -> Result<()> {
    let mut buf = image::GrayImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = (img.get(x, y, 0).clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(Error::from)
}

/// Load a PNG as a 3-channel float image in [0,1].
pub fn load_png(path: &Path) -> Result<FeatureImage> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = FeatureImage::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.set(x, y, c, p[c] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Write a binary mask as an 8-bit grayscale PNG (255 inside, 0 outside).
pub fn save_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask.get(x, y) { 255 } else { 0 }]));
        }
    }
    buf.save(path).map_err(Error::from)
}

/// Load an 8-bit PNG as a mask; values >= 128 count as inside.
pub fn load_mask(path: &Path) -> Result<MaskImage> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = MaskImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get_pixel(x as u32, y as u32)[0] >= 128);
        }
    }
    Ok(out)
}

/// Write a 3-channel (PF) or 1-channel (Pf) little-endian PFM file.
///
/// PFM stores scanlines bottom to top; a negative scale marks little endian.
pub fn save_pfm(path: &Path, img: &FeatureImage) -> Result<()> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::InvalidInput(format!(
            "pfm supports 1 or 3 channels, got {}",
            img.channels
        )));
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let tag = if img.channels == 3 { "PF" } else { "Pf" };
    write!(w, "{tag}\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in 0..img.channels {
                w.write_f32::<LittleEndian>(img.get(x, y, c) as f32)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_pfm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::InvalidInput("truncated pfm header".into()));
            }
            return Ok(tok);
        }
        let ch = byte[0] as char;
        if ch.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(ch);
        }
    }
}

/// Read a PFM file into a float image.
pub fn load_pfm(path: &Path) -> Result<FeatureImage> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let tag = read_pfm_token(&mut r)?;
    let channels = match tag.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::InvalidInput(format!("not a pfm file (tag {other:?})"))),
    };
    let width: usize = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| Error::InvalidInput("bad pfm width".into()))?;
    let height: usize = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| Error::InvalidInput("bad pfm height".into()))?;
    let scale: f64 = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| Error::InvalidInput("bad pfm scale".into()))?;
    let little = scale < 0.0;
    let mut img = FeatureImage::new(width, height, channels);
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let v = if little {
                    r.read_f32::<LittleEndian>()?
                } else {
                    r.read_f32::<byteorder::BigEndian>()?
                };
                img.set(x, y, c, v as f64);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_color() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        let img = FeatureImage::from_fn(7, 5, 3, |x, y, c| {
            (x as f64 * 0.13 + y as f64 * 0.07 + c as f64 * 0.41).sin()
        });
        save_pfm(&path, &img).unwrap();
        let back = load_pfm(&path).unwrap();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        assert_eq!(back.channels, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn pfm_round_trip_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pfm");
        let img = FeatureImage::from_fn(4, 4, 1, |x, y, _| x as f64 + 10.0 * y as f64);
        save_pfm(&path, &img).unwrap();
        let back = load_pfm(&path).unwrap();
        assert_eq!(img.data.len(), back.data.len());
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = FeatureImage::from_fn(6, 4, 3, |x, y, c| {
            ((x + 2 * y + 3 * c) as f64 * 0.05).fract()
        });
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut mask = MaskImage::new(9, 6);
        for y in 0..6 {
            for x in 0..9 {
                mask.set(x, y, (x + y) % 3 == 0);
            }
        }
        save_mask(&path, &mask).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn downsample_half_averages() {
        let img = FeatureImage::from_fn(4, 2, 1, |x, _, _| x as f64);
        let half = img.downsample_half();
        assert_eq!(half.width, 2);
        assert_eq!(half.height, 1);
        assert!((half.get(0, 0, 0) - 0.5).abs() < 1e-12);
        assert!((half.get(1, 0, 0) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_at_pixel_centers() {
        let img = FeatureImage::from_fn(3, 3, 1, |x, y, _| (x + 3 * y) as f64);
        let mut out = [0.0];
        img.sample_bilinear(1.5, 1.5, &mut out);
        assert!((out[0] - 4.0).abs() < 1e-12);
        img.sample_bilinear(2.0, 1.5, &mut out);
        assert!((out[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn mask_downsample_keeps_coverage() {
        let mut mask = MaskImage::new(4, 4);
        mask.set(3, 3, true);
        let half = mask.downsample_half();
        assert!(half.get(1, 1));
        assert!(!half.get(0, 0));
    }
}
