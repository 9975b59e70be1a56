//! Training loss terms and image quality metrics.
//!
//! Five weighted terms: photometric l1 and DSSIM against ground truth, a
//! transmittance penalty keeping reflection splats inside the projected
//! reflection volume, an l1 mask term tying the rasterized rho channel to
//! that projection, and a total-variation smoother on rho. All pixel sums
//! use mean normalization so the weights transfer across resolutions.

use crate::error::{Error, Result};
use crate::img::{FeatureImage, MaskImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub dssim: f64,
    pub volume: f64,
    pub mask: f64,
    pub mask_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 0.05, dssim: 0.2, volume: 0.01, mask: 0.01, mask_tv: 1e-5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l1: f64,
    pub dssim: f64,
    pub volume: f64,
    pub mask: f64,
    pub mask_tv: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(w: &LossWeights, l1: f64, dssim: f64, volume: f64, mask: f64, mask_tv: f64) -> Self {
        let total =
            w.l1 * l1 + w.dssim * dssim + w.volume * volume + w.mask * mask + w.mask_tv * mask_tv;
        LossReport { l1, dssim, volume, mask, mask_tv, total }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

fn check_same_shape(a: &FeatureImage, b: &FeatureImage) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean absolute difference; gradient is sign/N into `pred`.
pub fn l1_loss(pred: &FeatureImage, gt: &FeatureImage) -> Result<(f64, FeatureImage)> {
    check_same_shape(pred, gt)?;
    let n = pred.data.len().max(1) as f64;
    let mut grad = FeatureImage::new(pred.width, pred.height, pred.channels);
    let mut loss = 0.0;
    for i in 0..pred.data.len() {
        let d = pred.data[i] - gt.data[i];
        loss += d.abs();
        grad.data[i] = d.signum() / n;
        if d == 0.0 {
            grad.data[i] = 0.0;
        }
    }
    Ok((loss / n, grad))
}

fn gauss_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter of one channel plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            horiz[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatter a valid-size map back to full size.
fn scatter_full(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut vert = vec![0.0; vw * h];
    for y in 0..vh {
        for x in 0..vw {
            let g = src[y * vw + x];
            for (i, kv) in k.iter().enumerate() {
                vert[(y + i) * vw + x] += kv * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..vw {
            let g = vert[y * vw + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * g;
            }
        }
    }
    out
}

struct SsimPlanes {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    sxy: Vec<f64>,
    vw: usize,
    vh: usize,
}

fn ssim_planes(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> SsimPlanes {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SsimPlanes {
        mu_x: filter_valid(x, w, h, k),
        mu_y: filter_valid(y, w, h, k),
        sxx: filter_valid(&xx, w, h, k),
        syy: filter_valid(&yy, w, h, k),
        sxy: filter_valid(&xy, w, h, k),
        vw: w - SSIM_WINDOW + 1,
        vh: h - SSIM_WINDOW + 1,
    }
}

fn ssim_value_at(p: &SsimPlanes, i: usize) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (mx, my) = (p.mu_x[i], p.mu_y[i]);
    let vx = p.sxx[i] - mx * mx;
    let vy = p.syy[i] - my * my;
    let cxy = p.sxy[i] - mx * my;
    let a1 = 2.0 * mx * my + c1;
    let a2 = 2.0 * cxy + c2;
    let b1 = mx * mx + my * my + c1;
    let b2 = vx + vy + c2;
    (a1 * a2) / (b1 * b2)
}

fn extract_plane(img: &FeatureImage, c: usize) -> Vec<f64> {
    (0..img.width * img.height).map(|i| img.data[i * img.channels + c]).collect()
}

/// `(1 - mean SSIM) / 2` with an exact analytic gradient into `pred`.
///
/// Gaussian window 11, sigma 1.5, K1 = 0.01, K2 = 0.03 on [0,1] range;
/// the SSIM map uses valid windows only, so inputs must be at least the
/// window size.
pub fn dssim_loss(pred: &FeatureImage, gt: &FeatureImage) -> Result<(f64, FeatureImage)> {
    check_same_shape(pred, gt)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {}x{} smaller than the SSIM window",
            pred.width, pred.height
        )));
    }
    let k = gauss_kernel();
    let (w, h) = (pred.width, pred.height);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut grad = FeatureImage::new(w, h, pred.channels);
    let mut ssim_sum = 0.0;
    let mut count = 0usize;
    for ch in 0..pred.channels {
        let x = extract_plane(pred, ch);
        let y = extract_plane(gt, ch);
        let p = ssim_planes(&x, &y, w, h, &k);
        let nv = p.vw * p.vh;
        count += nv;
        // adjoints of the five filtered planes; dL/dS = -1/(2 * total count)
        let mut g_mu = vec![0.0; nv];
        let mut g_sxx = vec![0.0; nv];
        let mut g_sxy = vec![0.0; nv];
        for i in 0..nv {
            let (mx, my) = (p.mu_x[i], p.mu_y[i]);
            let vx = p.sxx[i] - mx * mx;
            let vy = p.syy[i] - my * my;
            let cxy = p.sxy[i] - mx * my;
            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * cxy + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = vx + vy + c2;
            ssim_sum += (a1 * a2) / (b1 * b2);
            let d_a1 = a2 / (b1 * b2);
            let d_a2 = a1 / (b1 * b2);
            let d_b1 = -(a1 * a2) / (b1 * b1 * b2);
            let d_b2 = -(a1 * a2) / (b1 * b2 * b2);
            let d_cxy = 2.0 * d_a2;
            let d_vx = d_b2;
            // mu_x appears in a1, b1 and inside vx = sxx - mu_x^2, cxy = sxy - mu_x mu_y
            g_mu[i] = d_a1 * 2.0 * my + d_b1 * 2.0 * mx + d_vx * (-2.0 * mx) + d_cxy * (-my);
            g_sxx[i] = d_vx;
            g_sxy[i] = d_cxy;
        }
        let back_mu = scatter_full(&g_mu, w, h, &k);
        let back_sxx = scatter_full(&g_sxx, w, h, &k);
        let back_sxy = scatter_full(&g_sxy, w, h, &k);
        for i in 0..w * h {
            let d_ssim_sum = back_mu[i] + 2.0 * x[i] * back_sxx[i] + y[i] * back_sxy[i];
            grad.data[i * pred.channels + ch] = d_ssim_sum;
        }
    }
    let n = count.max(1) as f64;
    let loss = (1.0 - ssim_sum / n) / 2.0;
    for g in grad.data.iter_mut() {
        *g *= -0.5 / n;
    }
    Ok((loss, grad))
}

/// `mean |obar - m| * m`: pulls transmittance down to zero inside the
/// projected reflection volume and does nothing outside it.
pub fn reflection_volume_loss(obar: &FeatureImage, mask: &MaskImage) -> Result<(f64, FeatureImage)> {
    if obar.width != mask.width || obar.height != mask.height || obar.channels != 1 {
        return Err(Error::ShapeMismatch("transmittance vs mask size".into()));
    }
    let n = obar.data.len().max(1) as f64;
    let mut grad = FeatureImage::new(obar.width, obar.height, 1);
    let mut loss = 0.0;
    for i in 0..obar.data.len() {
        if mask.data[i] != 0 {
            let d = obar.data[i] - 1.0;
            loss += d.abs();
            grad.data[i] = if d == 0.0 { 0.0 } else { d.signum() / n };
        }
    }
    Ok((loss / n, grad))
}

/// `mean |rho - m|` against the projected reflection-volume mask.
pub fn mask_loss(rho: &FeatureImage, mask: &MaskImage) -> Result<(f64, FeatureImage)> {
    if rho.width != mask.width || rho.height != mask.height || rho.channels != 1 {
        return Err(Error::ShapeMismatch("rho vs mask size".into()));
    }
    let n = rho.data.len().max(1) as f64;
    let mut grad = FeatureImage::new(rho.width, rho.height, 1);
    let mut loss = 0.0;
    for i in 0..rho.data.len() {
        let m = if mask.data[i] != 0 { 1.0 } else { 0.0 };
        let d = rho.data[i] - m;
        loss += d.abs();
        grad.data[i] = if d == 0.0 { 0.0 } else { d.signum() / n };
    }
    Ok((loss / n, grad))
}

/// Mean total variation of rho with forward differences; differences that
/// would cross the border are taken as zero.
pub fn mask_tv_loss(rho: &FeatureImage) -> (f64, FeatureImage) {
    assert_eq!(rho.channels, 1);
    let (w, h) = (rho.width, rho.height);
    let n = (w * h).max(1) as f64;
    let mut grad = FeatureImage::new(w, h, 1);
    let mut loss = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = rho.get(x, y, 0);
            if x + 1 < w {
                let d = rho.get(x + 1, y, 0) - v;
                loss += d.abs();
                if d != 0.0 {
                    let s = d.signum() / n;
                    grad.data[y * w + x + 1] += s;
                    grad.data[y * w + x] -= s;
                }
            }
            if y + 1 < h {
                let d = rho.get(x, y + 1, 0) - v;
                loss += d.abs();
                if d != 0.0 {
                    let s = d.signum() / n;
                    grad.data[(y + 1) * w + x] += s;
                    grad.data[y * w + x] -= s;
                }
            }
        }
    }
    (loss / n, grad)
}

/// Peak signal-to-noise ratio in dB against a peak of 1, optionally
/// restricted to mask pixels; identical inputs cap at 99 dB.
pub fn psnr(pred: &FeatureImage, gt: &FeatureImage, region: Option<&MaskImage>) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let mut se = 0.0;
    let mut n = 0usize;
    for i in 0..pred.width * pred.height {
        if let Some(m) = region {
            if m.data[i] == 0 {
                continue;
            }
        }
        for c in 0..pred.channels {
            let d = pred.data[i * pred.channels + c] - gt.data[i * pred.channels + c];
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty metric region".into()));
    }
    let mse = se / n as f64;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// Mean SSIM over valid windows, optionally keeping only windows whose
/// center pixel is inside the mask.
pub fn ssim(pred: &FeatureImage, gt: &FeatureImage, region: Option<&MaskImage>) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::InvalidInput("image smaller than the SSIM window".into()));
    }
    let k = gauss_kernel();
    let half = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ch in 0..pred.channels {
        let x = extract_plane(pred, ch);
        let y = extract_plane(gt, ch);
        let p = ssim_planes(&x, &y, pred.width, pred.height, &k);
        for vy in 0..p.vh {
            for vx in 0..p.vw {
                if let Some(m) = region {
                    if !m.get(vx + half, vy + half) {
                        continue;
                    }
                }
                sum += ssim_value_at(&p, vy * p.vw + vx);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty metric region".into()));
    }
    Ok(sum / n as f64)
}

pub fn dssim_metric(pred: &FeatureImage, gt: &FeatureImage, region: Option<&MaskImage>) -> Result<f64> {
    Ok((1.0 - ssim(pred, gt, region)?) / 2.0)
}
