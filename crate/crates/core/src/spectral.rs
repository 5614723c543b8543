//! 2D Fourier analysis of real maps: spectra, centered views, radial
//! signatures, power/frequency slopes and ideal circular low-pass filtering.
//!
//! Transforms are unnormalized in the forward direction; the inverse carries
//! the `1 / (H W)` factor.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum2D {
    pub width: usize,
    pub height: usize,
    /// Row-major coefficients.
    pub coeffs: Vec<Complex64>,
    /// DC sits at `(height / 2, width / 2)` when set, at `(0, 0)` otherwise.
    pub centered: bool,
}

impl Spectrum2D {
    pub fn at(&self, row: usize, col: usize) -> Complex64 {
        self.coeffs[row * self.width + col]
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.norm()).collect()
    }

    /// Moves DC to the center.
    pub fn fftshift(&self) -> Result<Spectrum2D> {
        if self.centered {
            return Err(Error::AlreadyCentered);
        }
        Ok(self.rolled(self.height / 2, self.width / 2, true))
    }

    /// Inverse of [`Spectrum2D::fftshift`], also for odd sizes.
    pub fn ifftshift(&self) -> Result<Spectrum2D> {
        if !self.centered {
            return Err(Error::NotCentered);
        }
        Ok(self.rolled(self.height - self.height / 2, self.width - self.width / 2, false))
    }

    fn rolled(&self, dy: usize, dx: usize, centered: bool) -> Spectrum2D {
        let (h, w) = (self.height, self.width);
        let mut coeffs = vec![Complex64::default(); h * w];
        for r in 0..h {
            for c in 0..w {
                coeffs[((r + dy) % h) * w + (c + dx) % w] = self.coeffs[r * w + c];
            }
        }
        Spectrum2D {
            width: w,
            height: h,
            coeffs,
            centered,
        }
    }
}

fn plane_dims(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        other => Err(Error::Validation(format!(
            "expected an HxW map, got shape {other:?}"
        ))),
    }
}

fn fft2_in_place(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    let row_fft = plan(w, direction);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = plan(h, direction);
    let mut col = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
}

fn dft2_plane(values: &[f64], h: usize, w: usize) -> Spectrum2D {
    let mut coeffs: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut coeffs, h, w, FftDirection::Forward);
    Spectrum2D {
        width: w,
        height: h,
        coeffs,
        centered: false,
    }
}

/// Unnormalized forward 2D DFT of a real `H x W` map (or `1 x H x W`).
pub fn dft2(map: &Tensor) -> Result<Spectrum2D> {
    let (h, w) = plane_dims(map)?;
    Ok(dft2_plane(map.data(), h, w))
}

/// Inverse 2D DFT (scaled by `1 / (H W)`) of an uncentered spectrum.
pub fn idft2(spec: &Spectrum2D) -> Result<Vec<Complex64>> {
    if spec.centered {
        return Err(Error::AlreadyCentered);
    }
    let mut buf = spec.coeffs.clone();
    fft2_in_place(&mut buf, spec.height, spec.width, FftDirection::Inverse);
    let norm = 1.0 / (spec.height * spec.width) as f64;
    buf.iter_mut().for_each(|c| *c *= norm);
    Ok(buf)
}

/// Signed frequency of DFT index `k` on an axis of length `n`, in
/// `[-n/2, n/2)`; this is the offset from the center after a shift.
#[inline]
fn signed_freq(k: usize, n: usize) -> f64 {
    if k < n - n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Radius of frequency bin `(row, col)` of an uncentered spectrum.
#[inline]
fn bin_radius(row: usize, col: usize, h: usize, w: usize) -> f64 {
    signed_freq(row, h).hypot(signed_freq(col, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSignature {
    pub radii: Vec<usize>,
    pub amplitude: Vec<f64>,
    pub n_images: usize,
}

impl FourierSignature {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("radius,amplitude,n_images\n");
        for (r, a) in self.radii.iter().zip(&self.amplitude) {
            writeln!(out, "{r},{a:e},{}", self.n_images).expect("string write");
        }
        out
    }
}

/// Streaming radial average over many same-shaped maps.
#[derive(Debug, Clone)]
pub struct SignatureAccumulator {
    height: usize,
    width: usize,
    /// Radius bin per coefficient; `None` beyond `R_max`.
    bins: Vec<Option<usize>>,
    counts: Vec<usize>,
    sums: Vec<f64>,
    n: usize,
}

impl SignatureAccumulator {
    pub fn new(height: usize, width: usize) -> Self {
        let r_max = height.min(width) / 2;
        let mut counts = vec![0; r_max + 1];
        let bins = (0..height * width)
            .map(|i| {
                let r = bin_radius(i / width, i % width, height, width).round() as usize;
                (r <= r_max).then(|| {
                    counts[r] += 1;
                    r
                })
            })
            .collect();
        SignatureAccumulator {
            height,
            width,
            bins,
            counts,
            sums: vec![0.0; r_max + 1],
            n: 0,
        }
    }

    /// Adds one `H x W` plane given as raw values.
    pub fn add_plane(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.height * self.width);
        let spec = dft2_plane(values, self.height, self.width);
        let mut per_image = vec![0.0; self.sums.len()];
        for (c, bin) in spec.coeffs.iter().zip(&self.bins) {
            if let Some(r) = bin {
                per_image[*r] += c.norm();
            }
        }
        for (s, (v, &n)) in self.sums.iter_mut().zip(per_image.iter().zip(&self.counts)) {
            *s += v / n as f64;
        }
        self.n += 1;
    }

    pub fn add(&mut self, map: &Tensor) -> Result<()> {
        let (h, w) = map.spatial().ok_or(Error::EmptyInput)?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(&[self.height, self.width], &[h, w]));
        }
        for plane in map.data().chunks_exact(h * w) {
            self.add_plane(plane);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SignatureAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        self.n += other.n;
    }

    pub fn finish(&self) -> Result<FourierSignature> {
        if self.n == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(FourierSignature {
            radii: (0..self.sums.len()).collect(),
            amplitude: self.sums.iter().map(|s| s / self.n as f64).collect(),
            n_images: self.n,
        })
    }
}

/// Mean amplitude per integer radius of the centered spectrum, averaged over
/// maps. Radii beyond `min(H, W) / 2` are discarded. Multi-channel maps
/// contribute one plane per channel.
pub fn radial_signature(maps: &[Tensor]) -> Result<FourierSignature> {
    let first = maps.first().ok_or(Error::EmptyInput)?;
    let (h, w) = first.spatial().ok_or(Error::EmptyInput)?;
    let mut acc = SignatureAccumulator::new(h, w);
    for m in maps {
        acc.add(m)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSlope {
    /// Decades of amplitude per cycle/image.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `log10(amplitude)` against radius, skipping DC and
/// empty bins.
pub fn power_slope(sig: &FourierSignature) -> Result<PowerSlope> {
    let points: Vec<(f64, f64)> = sig
        .radii
        .iter()
        .zip(&sig.amplitude)
        .filter(|(&r, &a)| r >= 1 && a > 0.0)
        .map(|(&r, &a)| (r as f64, a.log10()))
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientBins(points.len()));
    }
    if points.iter().all(|p| p.1 == points[0].1) {
        return Ok(PowerSlope {
            slope: 0.0,
            intercept: points[0].1,
            r_squared: 1.0,
        });
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(PowerSlope {
        slope,
        intercept,
        r_squared,
    })
}

/// Ideal circular low-pass: keeps frequencies within radius `sigma / 2` of
/// DC. For `sigma >= min(H, W)` the input is returned unchanged. Multi-channel
/// maps are filtered per channel.
pub fn lowpass(map: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    let (h, w) = map
        .spatial()
        .ok_or_else(|| Error::Validation(format!("cannot filter shape {:?}", map.shape())))?;
    if sigma >= h.min(w) as f64 {
        return Ok(map.clone());
    }
    let cutoff = sigma / 2.0;
    let keep: Vec<bool> = (0..h * w)
        .map(|i| bin_radius(i / w, i % w, h, w) <= cutoff)
        .collect();
    let norm = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(map.len());
    for plane in map.data().chunks_exact(h * w) {
        let mut spec = dft2_plane(plane, h, w).coeffs;
        for (c, &k) in spec.iter_mut().zip(&keep) {
            if !k {
                *c = Complex64::default();
            }
        }
        fft2_in_place(&mut spec, h, w, FftDirection::Inverse);
        let mut residual: f64 = 0.0;
        for c in &spec {
            residual = residual.max((c.im * norm).abs());
            out.push(c.re * norm);
        }
        if residual >= 1e-9 {
            return Err(Error::ImaginaryResidual(residual));
        }
    }
    Tensor::new(map.shape().to_vec(), out)
}
