//! Eccentricity-dependent retinal blur.
//!
//! Each pixel gets a target low-pass cutoff derived from its angular distance
//! to the fixation point. The image is filtered in the Fourier domain by a bank
//! of Gaussian low-pass filters `exp(-|G|^2 / f^2)`, and every output pixel is a
//! linear interpolation between the two bank images whose cutoffs bracket the
//! pixel's target. The result is center-cropped to 90% of its width.
//!
//! The whole map is linear in the image, so [`RetinaLayer::adjoint`] is exact and
//! gradients flow through it unchanged.
//!
//! All frequencies are angular, in radians per pixel (Nyquist = pi).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cutoffs at or above this many multiples of Nyquist are exact passthrough.
pub const PASSTHROUGH_FACTOR: f64 = 10.0;

/// Fraction of the width kept by the final center crop.
pub const CROP_FRACTION: f64 = 0.9;

pub fn passthrough_cutoff() -> f64 {
    PASSTHROUGH_FACTOR * PI
}

pub fn is_passthrough(cutoff: f64) -> bool {
    cutoff >= passthrough_cutoff()
}

/// Cropped edge length for an `n`-pixel square input.
pub fn cropped_size(n: usize) -> usize {
    (CROP_FRACTION * n as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "GeometryFile")]
pub struct ViewingGeometry {
    /// Viewer to screen distance in meters.
    pub viewer_distance_m: f64,
    /// Edge length of the (square) displayed image in meters.
    pub image_size_m: f64,
    pub pixels_per_meter: f64,
    /// Edge length of the image in pixels.
    pub image_pixels: usize,
}

impl ViewingGeometry {
    /// Geometry of an `image_pixels`-wide image displayed `image_size_m` wide.
    pub fn new(viewer_distance_m: f64, image_size_m: f64, image_pixels: usize) -> Self {
        Self {
            viewer_distance_m,
            image_size_m,
            pixels_per_meter: image_pixels as f64 / image_size_m,
            image_pixels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.viewer_distance_m > 0.0
            && self.image_size_m > 0.0
            && self.pixels_per_meter > 0.0
            && self.image_pixels > 0
            && self.viewer_distance_m.is_finite()
            && self.image_size_m.is_finite()
            && self.pixels_per_meter.is_finite();
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "viewing geometry must be finite and strictly positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Eccentricity in radians of a screen position (meters from image center).
    pub fn eccentricity(&self, x_m: f64, y_m: f64) -> f64 {
        (x_m.hypot(y_m) / self.viewer_distance_m).atan()
    }

    /// Full visual angle subtended by the image edge, in degrees.
    pub fn visual_angle_deg(&self) -> f64 {
        2.0 * self.eccentricity(self.image_size_m / 2.0, 0.0).to_degrees()
    }
}

/// On-disk form; `pixels_per_meter` defaults to `image_pixels / image_size_m`.
#[derive(Deserialize)]
struct GeometryFile {
    viewer_distance_m: f64,
    image_size_m: f64,
    #[serde(default)]
    pixels_per_meter: Option<f64>,
    image_pixels: usize,
}

impl From<GeometryFile> for ViewingGeometry {
    fn from(g: GeometryFile) -> Self {
        let mut out = Self::new(g.viewer_distance_m, g.image_size_m, g.image_pixels);
        if let Some(ppm) = g.pixels_per_meter {
            out.pixels_per_meter = ppm;
        }
        out
    }
}

impl Default for ViewingGeometry {
    /// 15.24 cm image viewed from 61 cm, rendered at 64 pixels.
    fn default() -> Self {
        Self::new(0.61, 0.1524, 64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetinaParams {
    /// Resolution slope: radians of resolution per radian of eccentricity.
    pub alpha_slope: f64,
    /// Resolution cap in radians.
    pub beta_cap: f64,
    /// Strictly ascending low-pass cutoffs in radians/pixel. The last entry is
    /// the passthrough sentinel (unfiltered image).
    pub cutoff_freqs: Vec<f64>,
}

impl RetinaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_slope > 0.0 && self.alpha_slope.is_finite()) {
            return Err(Error::InvalidConfig("alpha_slope must be > 0".into()));
        }
        if !(self.beta_cap > 0.0 && self.beta_cap.is_finite()) {
            return Err(Error::InvalidConfig("beta_cap must be > 0".into()));
        }
        let c = &self.cutoff_freqs;
        if c.len() < 2 {
            return Err(Error::InvalidConfig(
                "cutoff_freqs needs at least two entries".into(),
            ));
        }
        if c[0] <= 0.0 || !c.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(
                "cutoff_freqs must be finite and positive".into(),
            ));
        }
        if c.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "cutoff_freqs must be strictly ascending".into(),
            ));
        }
        Ok(())
    }

    pub fn min_cutoff(&self) -> f64 {
        self.cutoff_freqs[0]
    }

    pub fn top_cutoff(&self) -> f64 {
        *self.cutoff_freqs.last().expect("validated non-empty")
    }
}

impl Default for RetinaParams {
    fn default() -> Self {
        Self {
            alpha_slope: 0.05,
            beta_cap: 0.1,
            cutoff_freqs: default_cutoffs(),
        }
    }
}

/// Eight log-spaced cutoffs from pi/64 to pi, followed by the passthrough sentinel.
pub fn default_cutoffs() -> Vec<f64> {
    let lo = (PI / 64.0).ln();
    let hi = PI.ln();
    let mut v: Vec<f64> = (0..8)
        .map(|i| (lo + (hi - lo) * i as f64 / 7.0).exp())
        .collect();
    v[7] = PI;
    v.push(passthrough_cutoff());
    v
}

/// Geometry plus parameters: everything needed to build a [`RetinaLayer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RetinaSpec {
    pub geometry: ViewingGeometry,
    pub params: RetinaParams,
}

/// Unclamped target cutoff `pi / r_pixel` at a screen position in meters.
/// Infinite at the exact fixation point.
pub fn raw_cutoff_at(geom: &ViewingGeometry, params: &RetinaParams, x_m: f64, y_m: f64) -> f64 {
    let theta = geom.eccentricity(x_m, y_m);
    let r_rad = (params.alpha_slope * theta).min(params.beta_cap);
    let tan = theta.tan();
    let r_m = r_rad * (1.0 + tan * tan);
    let r_pixel = r_m * geom.pixels_per_meter;
    if r_pixel <= 0.0 {
        f64::INFINITY
    } else {
        PI / r_pixel
    }
}

/// Per-pixel target cutoff, clamped into `[min cutoff, passthrough sentinel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffMap {
    pub size: usize,
    pub values: Vec<f64>,
}

impl CutoffMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }
}

/// Position of pixel `i` along an `n`-pixel axis, in meters from the image center.
fn pixel_center_m(i: usize, n: usize, pixels_per_meter: f64) -> f64 {
    (i as f64 + 0.5 - n as f64 / 2.0) / pixels_per_meter
}

pub fn eccentricity_cutoff_map(geom: &ViewingGeometry, params: &RetinaParams) -> Result<CutoffMap> {
    geom.validate()?;
    params.validate()?;
    let n = geom.image_pixels;
    let (lo, hi) = (params.min_cutoff(), params.top_cutoff());
    let mut values = Vec::with_capacity(n * n);
    for row in 0..n {
        let y = pixel_center_m(row, n, geom.pixels_per_meter);
        for col in 0..n {
            let x = pixel_center_m(col, n, geom.pixels_per_meter);
            values.push(raw_cutoff_at(geom, params, x, y).clamp(lo, hi));
        }
    }
    Ok(CutoffMap { size: n, values })
}

/// Linear interpolation weights of `f` into the ascending `cutoffs`, clamped at
/// both ends. Returns `(lower index, lower weight)`; the upper index carries
/// `1 - lower weight`.
pub fn interpolation_weights(f: f64, cutoffs: &[f64]) -> (usize, f64) {
    let last = cutoffs.len() - 1;
    if f <= cutoffs[0] {
        return (0, 1.0);
    }
    if f >= cutoffs[last] {
        return (last - 1, 0.0);
    }
    let i = cutoffs.partition_point(|&c| c <= f) - 1;
    let (a, b) = (cutoffs[i], cutoffs[i + 1]);
    (i, (b - f) / (b - a))
}

/// 2-D complex FFT over a row-major `h x w` grid.
#[derive(Clone)]
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2")
            .field("h", &self.h)
            .field("w", &self.w)
            .finish()
    }
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn transpose(src: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); src.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        out
    }

    fn run(&self, buf: &mut Vec<Complex64>, rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        rows.process(buf);
        let mut t = Self::transpose(buf, self.h, self.w);
        cols.process(&mut t);
        *buf = Self::transpose(&t, self.w, self.h);
    }

    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut buf, &self.row_fwd, &self.col_fwd);
        buf
    }

    /// Inverse transform (normalized); returns the real part and the largest
    /// absolute imaginary residue.
    pub fn inverse_real(&self, mut spec: Vec<Complex64>) -> (Vec<f64>, f64) {
        self.run(&mut spec, &self.row_inv, &self.col_inv);
        let norm = 1.0 / (self.h * self.w) as f64;
        let mut residue = 0.0f64;
        let re = spec
            .iter()
            .map(|c| {
                residue = residue.max((c.im * norm).abs());
                c.re * norm
            })
            .collect();
        (re, residue)
    }
}

/// Angular frequency (radians/pixel) of DFT bin `k` on an `n`-point axis.
fn angular_freq(k: usize, n: usize) -> f64 {
    let signed = if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    };
    2.0 * PI * signed / n as f64
}

/// Squared spatial-frequency norm `|G|^2` for every bin of an `h x w` grid.
pub fn frequency_norm_sq(h: usize, w: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(h * w);
    for ky in 0..h {
        let fy = angular_freq(ky, h);
        for kx in 0..w {
            let fx = angular_freq(kx, w);
            g.push(fx * fx + fy * fy);
        }
    }
    g
}

fn gaussian_transfer(g2: &[f64], cutoff: f64) -> Vec<f64> {
    g2.iter().map(|&g| (-g / (cutoff * cutoff)).exp()).collect()
}

/// Filters a real `h x w` plane with each cutoff in turn. Passthrough cutoffs
/// return the input unchanged.
pub fn lowpass_bank(plane: &[f64], h: usize, w: usize, cutoffs: &[f64]) -> Result<Vec<Vec<f64>>> {
    if plane.len() != h * w {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![plane.len()],
        });
    }
    if let Some(c) = cutoffs.iter().find(|&&c| !(c > 0.0)) {
        return Err(Error::InvalidConfig(format!("cutoff {c} is not positive")));
    }
    let fft = Fft2::new(h, w);
    let g2 = frequency_norm_sq(h, w);
    let spectrum = fft.forward_real(plane);
    Ok(cutoffs
        .iter()
        .map(|&c| {
            if is_passthrough(c) {
                return plane.to_vec();
            }
            let gain = gaussian_transfer(&g2, c);
            let filtered = spectrum.iter().zip(&gain).map(|(s, g)| s * g).collect();
            let (re, residue) = fft.inverse_real(filtered);
            debug_assert!(residue < 1e-9 * (1.0 + re.iter().fold(0.0f64, |m, v| m.max(v.abs()))));
            re
        })
        .collect())
}

/// Precomputed retinal blur for one geometry: filter transfer functions,
/// per-pixel interpolation weights over the crop window, FFT plans.
///
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct RetinaLayer {
    spec: RetinaSpec,
    size: usize,
    crop: usize,
    offset: usize,
    fft: Fft2,
    /// `None` marks the passthrough filter.
    transfers: Vec<Option<Vec<f64>>>,
    /// `weights[f][p]` for crop pixel `p`.
    weights: Vec<Vec<f64>>,
    /// Filters with a nonzero weight somewhere in the crop window.
    active: Vec<usize>,
}

impl RetinaLayer {
    pub fn new(spec: &RetinaSpec) -> Result<Self> {
        let map = eccentricity_cutoff_map(&spec.geometry, &spec.params)?;
        let n = spec.geometry.image_pixels;
        let crop = cropped_size(n);
        if crop == 0 {
            return Err(Error::InvalidConfig(format!("image of {n} pixels crops to nothing")));
        }
        let offset = (n - crop) / 2;
        let cutoffs = &spec.params.cutoff_freqs;
        let g2 = frequency_norm_sq(n, n);
        let transfers = cutoffs
            .iter()
            .map(|&c| (!is_passthrough(c)).then(|| gaussian_transfer(&g2, c)))
            .collect();
        let mut weights = vec![vec![0.0; crop * crop]; cutoffs.len()];
        for r in 0..crop {
            for c in 0..crop {
                let (i, wl) = interpolation_weights(map.at(r + offset, c + offset), cutoffs);
                let p = r * crop + c;
                weights[i][p] += wl;
                weights[i + 1][p] += 1.0 - wl;
            }
        }
        let active = (0..cutoffs.len())
            .filter(|&f| weights[f].iter().any(|&w| w != 0.0))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            size: n,
            crop,
            offset,
            fft: Fft2::new(n, n),
            transfers,
            weights,
            active,
        })
    }

    pub fn spec(&self) -> &RetinaSpec {
        &self.spec
    }

    pub fn input_size(&self) -> usize {
        self.size
    }

    pub fn output_size(&self) -> usize {
        self.crop
    }

    /// Interpolation weight of filter `f` at crop pixel `(row, col)`.
    pub fn weight(&self, f: usize, row: usize, col: usize) -> f64 {
        self.weights[f][row * self.crop + col]
    }

    fn full_index(&self, p: usize) -> usize {
        let (r, c) = (p / self.crop, p % self.crop);
        (r + self.offset) * self.size + c + self.offset
    }

    /// Blurs and crops one `n x n` plane.
    pub fn forward_plane(&self, plane: &[f64]) -> Vec<f64> {
        debug_assert_eq!(plane.len(), self.size * self.size);
        let spectrum = self.fft.forward_real(plane);
        let mut out = vec![0.0; self.crop * self.crop];
        for &f in &self.active {
            let filtered;
            let y: &[f64] = match &self.transfers[f] {
                None => plane,
                Some(h) => {
                    let s = spectrum.iter().zip(h).map(|(s, g)| s * g).collect();
                    filtered = self.fft.inverse_real(s).0;
                    &filtered
                }
            };
            for (p, o) in out.iter_mut().enumerate() {
                *o += self.weights[f][p] * y[self.full_index(p)];
            }
        }
        out
    }

    /// Adjoint of [`forward_plane`](Self::forward_plane): maps a crop-sized
    /// cotangent back to an `n x n` plane.
    pub fn adjoint_plane(&self, grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.crop * self.crop);
        let nn = self.size * self.size;
        let mut spatial = vec![0.0; nn];
        let mut spectral = vec![Complex64::default(); nn];
        let mut any_spectral = false;
        for &f in &self.active {
            let mut u = vec![0.0; nn];
            for (p, &g) in grad.iter().enumerate() {
                u[self.full_index(p)] = self.weights[f][p] * g;
            }
            match &self.transfers[f] {
                None => spatial.iter_mut().zip(&u).for_each(|(s, v)| *s += v),
                Some(h) => {
                    any_spectral = true;
                    let su = self.fft.forward_real(&u);
                    for ((acc, s), g) in spectral.iter_mut().zip(&su).zip(h) {
                        *acc += s * g;
                    }
                }
            }
        }
        if any_spectral {
            let (re, _) = self.fft.inverse_real(spectral);
            spatial.iter_mut().zip(&re).for_each(|(s, v)| *s += v);
        }
        spatial
    }

    /// Blurs an `[n, n, c]` image into a `[crop, crop, c]` image.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let planes: Vec<Vec<f64>> = image
            .to_planes()?
            .iter()
            .map(|p| self.forward_plane(p))
            .collect();
        Tensor::from_planes(self.crop, self.crop, &planes)
    }

    pub fn adjoint(&self, grad: &Tensor) -> Result<Tensor> {
        let (h, w, _) = grad.hwc()?;
        if h != self.crop || w != self.crop {
            return Err(Error::ShapeMismatch {
                expected: vec![self.crop, self.crop],
                actual: grad.shape().to_vec(),
            });
        }
        let planes: Vec<Vec<f64>> = grad
            .to_planes()?
            .iter()
            .map(|p| self.adjoint_plane(p))
            .collect();
        Tensor::from_planes(self.size, self.size, &planes)
    }

    pub(crate) fn check_input(&self, image: &Tensor) -> Result<()> {
        let (h, w, _) = image.hwc()?;
        if h != self.size || w != self.size {
            return Err(Error::ShapeMismatch {
                expected: vec![self.size, self.size],
                actual: image.shape().to_vec(),
            });
        }
        Ok(())
    }
}

pub fn retinal_blur(image: &Tensor, geom: &ViewingGeometry, params: &RetinaParams) -> Result<Tensor> {
    RetinaLayer::new(&RetinaSpec {
        geometry: geom.clone(),
        params: params.clone(),
    })?
    .apply(image)
}

pub fn retinal_blur_adjoint(
    out_gradient: &Tensor,
    geom: &ViewingGeometry,
    params: &RetinaParams,
) -> Result<Tensor> {
    RetinaLayer::new(&RetinaSpec {
        geometry: geom.clone(),
        params: params.clone(),
    })?
    .adjoint(out_gradient)
}
