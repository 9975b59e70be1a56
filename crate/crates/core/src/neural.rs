//! Dense networks with hand-rolled reverse-mode gradients: the
//! camera-conditioned warp field, the two-headed neural renderer, the
//! polar environment map, and the Adam optimizer.
//!
//! Batches are row-major `DMatrix<f64>` (one sample per row). Every
//! forward returns a cache sufficient for an exact backward.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::img::FeatureImage;
use crate::raster::sigmoid;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// Stored input-major (in x out) so a row batch multiplies directly.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Affine + ReLU stack with optional residual connections.
///
/// The final layer is linear. With `residual_period = r > 0`, the
/// activation `r` layers back is added after every `r`-th layer whenever
/// the widths agree.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub residual_period: usize,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    /// activations[0] is the input; activations[l+1] the output of layer l.
    activations: Vec<DMatrix<f64>>,
    preacts: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub d_w: Vec<DMatrix<f64>>,
    pub d_b: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            d_w: mlp.layers.iter().map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols())).collect(),
            d_b: mlp.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.d_w.iter_mut().zip(&other.d_w) {
            *a += b;
        }
        for (a, b) in self.d_b.iter_mut().zip(&other.d_b) {
            *a += b;
        }
    }
}

impl Mlp {
    /// Zero-initialized network with the given activation widths
    /// (`widths[0]` = input, `widths.last()` = output).
    pub fn new(widths: &[usize], residual_period: usize) -> Self {
        assert!(widths.len() >= 2, "need at least one layer");
        let layers = widths
            .windows(2)
            .map(|w| Linear { w: DMatrix::zeros(w[0], w[1]), b: DVector::zeros(w[1]) })
            .collect();
        Mlp { layers, residual_period }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.w.nrows()).collect();
        w.push(self.layers.last().unwrap().w.ncols());
        w
    }

    fn residual_source(&self, activation_index: usize) -> Option<usize> {
        let r = self.residual_period;
        if r == 0 || activation_index < r || activation_index % r != 0 {
            return None;
        }
        let src = activation_index - r;
        let widths = self.widths();
        (widths[src] == widths[activation_index]).then_some(src)
    }

    fn residual_blocks(&self) -> usize {
        (1..=self.layers.len()).filter(|&a| self.residual_source(a).is_some()).count()
    }

    /// He-style initialization with residual branches scaled by
    /// `blocks^(-1/4)`; the final layer starts at zero so a fresh network
    /// is the constant map.
    pub fn fixup_init<R: Rng>(&mut self, rng: &mut R) {
        let scale = (self.residual_blocks().max(1) as f64).powf(-0.25);
        let n = self.layers.len();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.b.fill(0.0);
            if l + 1 == n {
                layer.w.fill(0.0);
                continue;
            }
            let std = (2.0 / layer.w.nrows() as f64).sqrt() * scale;
            for v in layer.w.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * std;
            }
        }
    }

    /// He-style initialization on every layer, output included. Unlike
    /// [`Mlp::fixup_init`] a fresh network is not the constant map, so
    /// gradients reach the inputs from the first step.
    pub fn he_init<R: Rng>(&mut self, rng: &mut R) {
        for layer in self.layers.iter_mut() {
            layer.b.fill(0.0);
            let std = (2.0 / layer.w.nrows() as f64).sqrt();
            for v in layer.w.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * std;
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn copy_params_to(&self, out: &mut [f64]) {
        let mut at = 0;
        for l in &self.layers {
            out[at..at + l.w.len()].copy_from_slice(l.w.as_slice());
            at += l.w.len();
            out[at..at + l.b.len()].copy_from_slice(l.b.as_slice());
            at += l.b.len();
        }
        assert_eq!(at, out.len());
    }

    pub fn set_params_from(&mut self, src: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&src[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&src[at..at + nb]);
            at += nb;
        }
        assert_eq!(at, src.len());
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }
}

impl MlpGrads {
    pub fn copy_to(&self, out: &mut [f64]) {
        let mut at = 0;
        for (w, b) in self.d_w.iter().zip(&self.d_b) {
            out[at..at + w.len()].copy_from_slice(w.as_slice());
            at += w.len();
            out[at..at + b.len()].copy_from_slice(b.as_slice());
            at += b.len();
        }
        assert_eq!(at, out.len());
    }
}

pub fn mlp_forward(mlp: &Mlp, input: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache)> {
    if input.ncols() != mlp.layers[0].w.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "mlp input width {} expected {}",
            input.ncols(),
            mlp.layers[0].w.nrows()
        )));
    }
    let n_layers = mlp.layers.len();
    let mut activations = Vec::with_capacity(n_layers + 1);
    let mut preacts = Vec::with_capacity(n_layers);
    activations.push(input.clone());
    for (l, layer) in mlp.layers.iter().enumerate() {
        let mut z = &activations[l] * &layer.w;
        for mut row in z.row_iter_mut() {
            row += layer.b.transpose();
        }
        preacts.push(z.clone());
        let mut a = if l + 1 == n_layers { z } else { z.map(|v| v.max(0.0)) };
        if let Some(src) = mlp.residual_source(l + 1) {
            a += &activations[src];
        }
        activations.push(a);
    }
    let out = activations.last().unwrap().clone();
    Ok((out, MlpCache { activations, preacts }))
}

pub fn mlp_backward(
    mlp: &Mlp,
    cache: &MlpCache,
    d_out: &DMatrix<f64>,
) -> (DMatrix<f64>, MlpGrads) {
    let n_layers = mlp.layers.len();
    assert_eq!(cache.activations.len(), n_layers + 1, "stale cache");
    let mut grads = MlpGrads::zeros_like(mlp);
    let mut d_acts: Vec<Option<DMatrix<f64>>> = vec![None; n_layers + 1];
    d_acts[n_layers] = Some(d_out.clone());
    for l in (0..n_layers).rev() {
        let g = d_acts[l + 1].take().expect("gradient present");
        if let Some(src) = mlp.residual_source(l + 1) {
            match &mut d_acts[src] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g.clone()),
            }
        }
        let dz = if l + 1 == n_layers {
            g
        } else {
            let mut dz = g;
            dz.zip_apply(&cache.preacts[l], |gv, z| {
                if z <= 0.0 {
                    *gv = 0.0
                }
            });
            dz
        };
        grads.d_w[l] = cache.activations[l].transpose() * &dz;
        grads.d_b[l] = dz.row_sum().transpose();
        let d_in = &dz * mlp.layers[l].w.transpose();
        match &mut d_acts[l] {
            Some(existing) => *existing += d_in,
            slot => *slot = Some(d_in),
        }
    }
    (d_acts[0].take().unwrap(), grads)
}

fn normalize_in(aabb: &Aabb, v: &Vector3<f64>) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for k in 0..3 {
        let extent = aabb.max[k] - aabb.min[k];
        if extent > 1e-9 {
            out[k] = 2.0 * (v[k] - aabb.min[k]) / extent - 1.0;
        }
    }
    out
}

/// Camera-conditioned displacement field `p' = p + s * mlp(norm(p), norm(c))`.
///
/// Base positions are fixed inputs: gradients flow to the network
/// parameters only, never back into `p`.
#[derive(Clone, Debug)]
pub struct WarpField {
    pub mlp: Mlp,
    pub scale: f64,
    pub point_box: Aabb,
    pub camera_box: Aabb,
}

pub struct WarpCache {
    mlp: MlpCache,
}

impl WarpField {
    pub fn new<R: Rng>(point_box: Aabb, camera_box: Aabb, rng: &mut R) -> Self {
        let mut mlp = Mlp::new(&[6, 256, 256, 256, 3], 0);
        mlp.fixup_init(rng);
        WarpField { mlp, scale: 0.01, point_box, camera_box }
    }

    pub fn warp(
        &self,
        points: &[Vector3<f64>],
        camera_pos: &Vector3<f64>,
    ) -> Result<(Vec<Vector3<f64>>, WarpCache)> {
        let c = normalize_in(&self.camera_box, camera_pos);
        let mut input = DMatrix::zeros(points.len(), 6);
        for (i, p) in points.iter().enumerate() {
            let np = normalize_in(&self.point_box, p);
            for k in 0..3 {
                input[(i, k)] = np[k];
                input[(i, 3 + k)] = c[k];
            }
        }
        let (out, mlp) = mlp_forward(&self.mlp, &input)?;
        let warped = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p + self.scale * Vector3::new(out[(i, 0)], out[(i, 1)], out[(i, 2)])
            })
            .collect();
        Ok((warped, WarpCache { mlp }))
    }

    /// Cotangents on the warped positions to network parameter gradients.
    pub fn warp_backward(&self, cache: &WarpCache, d_warped: &[Vector3<f64>]) -> MlpGrads {
        let mut d_out = DMatrix::zeros(d_warped.len(), 3);
        for (i, g) in d_warped.iter().enumerate() {
            for k in 0..3 {
                d_out[(i, k)] = self.scale * g[k];
            }
        }
        let (_, grads) = mlp_backward(&self.mlp, &cache.mlp, &d_out);
        grads
    }
}

const HEAD_WIDTH: usize = 32;
const HEAD_LAYERS: usize = 9;

fn head_widths(input: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(std::iter::repeat(HEAD_WIDTH).take(HEAD_LAYERS - 1));
    w.push(output);
    w
}

/// Two-headed renderer: a primary head over rasterized primary features
/// plus the per-pixel view direction, a reflection head over reflection
/// features; head outputs modulated by rho and 1 - rho, decoded to RGB
/// through a final sigmoid.
#[derive(Clone, Debug)]
pub struct NeuralRenderer {
    pub head_primary: Mlp,
    pub head_reflection: Mlp,
    pub decoder: Mlp,
}

impl NeuralRenderer {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut head_primary = Mlp::new(&head_widths(9, HEAD_WIDTH), 2);
        let mut head_reflection = Mlp::new(&head_widths(6, HEAD_WIDTH), 2);
        let mut decoder = Mlp::new(&head_widths(2 * HEAD_WIDTH, 3), 2);
        head_primary.he_init(rng);
        head_reflection.he_init(rng);
        decoder.he_init(rng);
        NeuralRenderer { head_primary, head_reflection, decoder }
    }

    pub fn num_params(&self) -> usize {
        self.head_primary.num_params()
            + self.head_reflection.num_params()
            + self.decoder.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct RendererGrads {
    pub head_primary: MlpGrads,
    pub head_reflection: MlpGrads,
    pub decoder: MlpGrads,
}

impl RendererGrads {
    pub fn zeros_like(r: &NeuralRenderer) -> Self {
        RendererGrads {
            head_primary: MlpGrads::zeros_like(&r.head_primary),
            head_reflection: MlpGrads::zeros_like(&r.head_reflection),
            decoder: MlpGrads::zeros_like(&r.decoder),
        }
    }

    pub fn accumulate(&mut self, other: &RendererGrads) {
        self.head_primary.accumulate(&other.head_primary);
        self.head_reflection.accumulate(&other.head_reflection);
        self.decoder.accumulate(&other.decoder);
    }
}

pub struct ShadeInputs<'a> {
    pub primary: &'a FeatureImage,
    pub rho: &'a FeatureImage,
    pub reflection: &'a FeatureImage,
    /// Unit world-space ray direction per pixel, 3 channels.
    pub view_dirs: &'a FeatureImage,
}

pub struct ShadeCache {
    head_primary: MlpCache,
    head_reflection: MlpCache,
    decoder: MlpCache,
    e1_raw: DMatrix<f64>,
    e2_raw: DMatrix<f64>,
    rho: Vec<f64>,
    rgb: DMatrix<f64>,
}

fn image_to_rows(img: &FeatureImage) -> DMatrix<f64> {
    let n = img.width * img.height;
    let mut m = DMatrix::zeros(n, img.channels);
    for i in 0..n {
        for c in 0..img.channels {
            m[(i, c)] = img.data[i * img.channels + c];
        }
    }
    m
}

/// Per pixel: `rgb = sigmoid(decoder(head1(primary, dir) * rho  ++  head2(reflection) * (1 - rho)))`.
pub fn shade(r: &NeuralRenderer, inp: &ShadeInputs) -> Result<(FeatureImage, ShadeCache)> {
    let (w, h) = (inp.primary.width, inp.primary.height);
    for (img, ch) in [
        (inp.primary, 6),
        (inp.rho, 1),
        (inp.reflection, 6),
        (inp.view_dirs, 3),
    ] {
        if img.width != w || img.height != h || img.channels != ch {
            return Err(Error::ShapeMismatch("shade buffer sizes differ".into()));
        }
    }
    let n = w * h;
    let mut x1 = DMatrix::zeros(n, 9);
    for i in 0..n {
        for c in 0..6 {
            x1[(i, c)] = inp.primary.data[i * 6 + c];
        }
        for c in 0..3 {
            x1[(i, 6 + c)] = inp.view_dirs.data[i * 3 + c];
        }
    }
    let x2 = image_to_rows(inp.reflection);
    let rho: Vec<f64> = inp.rho.data.clone();

    let (e1_raw, c1) = mlp_forward(&r.head_primary, &x1)?;
    let (e2_raw, c2) = mlp_forward(&r.head_reflection, &x2)?;
    let mut d = DMatrix::zeros(n, 2 * HEAD_WIDTH);
    for i in 0..n {
        for c in 0..HEAD_WIDTH {
            d[(i, c)] = e1_raw[(i, c)] * rho[i];
            d[(i, HEAD_WIDTH + c)] = e2_raw[(i, c)] * (1.0 - rho[i]);
        }
    }
    let (raw_rgb, cd) = mlp_forward(&r.decoder, &d)?;
    let rgb = raw_rgb.map(sigmoid);
    let mut out = FeatureImage::new(w, h, 3);
    for i in 0..n {
        for c in 0..3 {
            out.data[i * 3 + c] = rgb[(i, c)];
        }
    }
    Ok((
        out,
        ShadeCache {
            head_primary: c1,
            head_reflection: c2,
            decoder: cd,
            e1_raw,
            e2_raw,
            rho,
            rgb,
        },
    ))
}

pub struct ShadeGrads {
    pub d_primary: FeatureImage,
    pub d_rho: FeatureImage,
    pub d_reflection: FeatureImage,
    pub params: RendererGrads,
}

pub fn shade_backward(
    r: &NeuralRenderer,
    cache: &ShadeCache,
    d_rgb_img: &FeatureImage,
) -> ShadeGrads {
    let n = cache.rho.len();
    let (w, h) = (d_rgb_img.width, d_rgb_img.height);
    let mut d_raw = DMatrix::zeros(n, 3);
    for i in 0..n {
        for c in 0..3 {
            let s = cache.rgb[(i, c)];
            d_raw[(i, c)] = d_rgb_img.data[i * 3 + c] * s * (1.0 - s);
        }
    }
    let (d_d, g_dec) = mlp_backward(&r.decoder, &cache.decoder, &d_raw);
    let mut d_e1_raw = DMatrix::zeros(n, HEAD_WIDTH);
    let mut d_e2_raw = DMatrix::zeros(n, HEAD_WIDTH);
    let mut d_rho = FeatureImage::new(w, h, 1);
    for i in 0..n {
        let rho = cache.rho[i];
        let mut g_rho = 0.0;
        for c in 0..HEAD_WIDTH {
            let g1 = d_d[(i, c)];
            let g2 = d_d[(i, HEAD_WIDTH + c)];
            d_e1_raw[(i, c)] = g1 * rho;
            d_e2_raw[(i, c)] = g2 * (1.0 - rho);
            g_rho += g1 * cache.e1_raw[(i, c)] - g2 * cache.e2_raw[(i, c)];
        }
        d_rho.data[i] = g_rho;
    }
    let (d_x1, g1) = mlp_backward(&r.head_primary, &cache.head_primary, &d_e1_raw);
    let (d_x2, g2) = mlp_backward(&r.head_reflection, &cache.head_reflection, &d_e2_raw);
    let mut d_primary = FeatureImage::new(w, h, 6);
    for i in 0..n {
        for c in 0..6 {
            d_primary.data[i * 6 + c] = d_x1[(i, c)];
        }
    }
    let mut d_reflection = FeatureImage::new(w, h, 6);
    for i in 0..n {
        for c in 0..6 {
            d_reflection.data[i * 6 + c] = d_x2[(i, c)];
        }
    }
    ShadeGrads {
        d_primary,
        d_rho,
        d_reflection,
        params: RendererGrads { head_primary: g1, head_reflection: g2, decoder: g_dec },
    }
}

/// Equirectangular feature map over ray directions, bilinear, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub texels: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EnvironmentMapGrads {
    pub d_texels: Vec<f64>,
}

impl EnvironmentMapGrads {
    pub fn zeros_like(env: &EnvironmentMap) -> Self {
        EnvironmentMapGrads { d_texels: vec![0.0; env.texels.len()] }
    }
}

impl EnvironmentMap {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        EnvironmentMap { width, height, channels, texels: vec![0.0; width * height * channels] }
    }

    /// Four (texel base index, weight) taps of the bilinear lookup;
    /// azimuth wraps, the polar coordinate clamps.
    fn taps(&self, dir: &Vector3<f64>) -> [(usize, f64); 4] {
        let d = dir.normalize();
        let theta = d.z.atan2(d.x);
        let phi = d.y.clamp(-1.0, 1.0).acos();
        let u = (theta + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
        let v = phi / std::f64::consts::PI;
        let x = u * self.width as f64 - 0.5;
        let y = (v * self.height as f64 - 0.5).clamp(0.0, self.height as f64 - 1.0);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let wrap = |i: i64| -> usize {
            let w = self.width as i64;
            (((i % w) + w) % w) as usize
        };
        let i0 = wrap(x0 as i64);
        let i1 = wrap(x0 as i64 + 1);
        let j0 = (y0 as i64).clamp(0, self.height as i64 - 1) as usize;
        let j1 = (y0 as i64 + 1).clamp(0, self.height as i64 - 1) as usize;
        let base = |i: usize, j: usize| (j * self.width + i) * self.channels;
        [
            (base(i0, j0), (1.0 - fx) * (1.0 - fy)),
            (base(i1, j0), fx * (1.0 - fy)),
            (base(i0, j1), (1.0 - fx) * fy),
            (base(i1, j1), fx * fy),
        ]
    }

    pub fn lookup(&self, dir: &Vector3<f64>, out: &mut [f64]) {
        assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        for (base, w) in self.taps(dir) {
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.texels[base + c];
            }
        }
    }

    pub fn lookup_backward(
        &self,
        dir: &Vector3<f64>,
        d_out: &[f64],
        grads: &mut EnvironmentMapGrads,
    ) {
        for (base, w) in self.taps(dir) {
            for (c, g) in d_out.iter().enumerate() {
                grads.d_texels[base + c] += w * g;
            }
        }
    }
}

/// Decoupled-weight-decay Adam over one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update; `weight_decay > 0` applies decoupled
/// decay against the pre-update parameters. Non-finite gradients leave
/// the state untouched and report a numerical failure.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch("adam buffers differ in length".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient in adam_step".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let update = lr * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr * weight_decay * params[i];
        params[i] -= update;
    }
    Ok(())
}
