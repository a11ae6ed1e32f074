//! Centered 1D convolution with zero padding, cropped to the signal length.
//!
//! A filter `h` of odd width `w` has its center at `c = w / 2`. The "same"
//! convolution of a length-`n` signal is `y[i] = sum_j h[i - j + c] x[j]`
//! over the taps that fall inside the filter. Small problems use the direct
//! sum; long rows go through a cached FFT plan.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Odd-width filter centered at `len / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    taps: Vec<f64>,
}

impl Filter {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        ensure!(taps.len() % 2 == 1, InvalidParameter, "filter width must be odd, got {}", taps.len());
        ensure!(taps.iter().all(|t| t.is_finite()), Numerical, "filter taps must be finite");
        Ok(Self { taps })
    }

    /// Unit impulse of width 1.
    pub fn delta() -> Self {
        Self { taps: vec![1.0] }
    }

    pub fn zeros(width: usize) -> Result<Self> {
        Self::new(vec![0.0; width])
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [f64] {
        &mut self.taps
    }

    pub fn width(&self) -> usize {
        self.taps.len()
    }

    pub fn center(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.taps.len();
        (0..n / 2).all(|i| self.taps[i] == self.taps[n - 1 - i])
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { taps: self.taps.iter().map(|t| t * factor).collect() }
    }

    pub fn flipped(&self) -> Self {
        let mut taps = self.taps.clone();
        taps.reverse();
        Self { taps }
    }

    /// Full linear convolution of two filters; the result is again centered.
    pub fn compose(&self, other: &Filter) -> Filter {
        let mut taps = vec![0.0; self.width() + other.width() - 1];
        for (i, a) in self.taps.iter().enumerate() {
            for (j, b) in other.taps.iter().enumerate() {
                taps[i + j] += a * b;
            }
        }
        Filter { taps }
    }

    /// Keeps the central `width` taps (odd). Wider requests return a clone.
    pub fn cropped(&self, width: usize) -> Filter {
        if width >= self.width() {
            return self.clone();
        }
        let drop = (self.width() - width) / 2;
        Filter { taps: self.taps[drop..drop + width].to_vec() }
    }

    /// Pads with zeros on both sides to `width` (odd, at least the current width).
    pub fn padded(&self, width: usize) -> Filter {
        if width <= self.width() {
            return self.clone();
        }
        let pad = (width - self.width()) / 2;
        let mut taps = vec![0.0; width];
        taps[pad..pad + self.width()].copy_from_slice(&self.taps);
        Filter { taps }
    }

    /// `delta - self`, with the delta at the center.
    pub fn identity_minus(&self) -> Filter {
        let mut taps: Vec<f64> = self.taps.iter().map(|t| -t).collect();
        let c = self.center();
        taps[c] += 1.0;
        Filter { taps }
    }
}

/// Direct "same" convolution of one row.
pub fn convolve_same(h: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let w = h.len();
    let c = w / 2;
    debug_assert_eq!(out.len(), n);
    for (i, o) in out.iter_mut().enumerate() {
        // j such that 0 <= i + c - j < w
        let lo = (i + c + 1).saturating_sub(w);
        let hi = (i + c + 1).min(n);
        let mut acc = 0.0;
        for j in lo..hi {
            acc += h[i + c - j] * x[j];
        }
        *o = acc;
    }
}

/// Adjoint of [`convolve_same`]: `g[j] = sum_i h[i - j + c] y[i]`.
pub fn correlate_same(h: &[f64], y: &[f64], out: &mut [f64]) {
    let n = y.len();
    let w = h.len();
    let c = w / 2;
    debug_assert_eq!(out.len(), n);
    for (j, o) in out.iter_mut().enumerate() {
        // i such that 0 <= i - j + c < w
        let lo = j.saturating_sub(c);
        let hi = (j + w - c).min(n);
        let mut acc = 0.0;
        for i in lo..hi {
            acc += h[i + c - j] * y[i];
        }
        *o = acc;
    }
}

/// Accumulates the gradient of `<g, h * x>` with respect to the taps of `h`:
/// `dh[d] += sum_j g[j + d - c] x[j]`.
pub fn accumulate_filter_grad(g: &[f64], x: &[f64], dh: &mut [f64]) {
    let n = x.len();
    let w = dh.len();
    let c = w / 2;
    for (d, slot) in dh.iter_mut().enumerate() {
        // i = j + d - c in [0, n)
        let lo = c.saturating_sub(d);
        let hi = (n + c).saturating_sub(d).min(n);
        let mut acc = 0.0;
        for j in lo..hi {
            acc += g[j + d - c] * x[j];
        }
        *slot += acc;
    }
}

/// Full (uncropped) linear convolution, length `n + w - 1`.
pub fn convolve_full(h: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len() + h.len() - 1];
    for (j, xv) in x.iter().enumerate() {
        if *xv == 0.0 {
            continue;
        }
        for (k, hv) in h.iter().enumerate() {
            out[j + k] += hv * xv;
        }
    }
    out
}

/// Adjoint of [`convolve_full`] restricted to a length-`n` signal: `g[j] = sum_k h[k] r[j + k]`.
pub fn correlate_full(h: &[f64], r: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(r.len(), n + h.len() - 1);
    (0..n).map(|j| h.iter().enumerate().map(|(k, hv)| hv * r[j + k]).sum()).collect()
}

/// Convolution strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Direct,
    Fft,
    /// Direct for short filters or rows, FFT otherwise.
    Auto,
}

/// A filter bound to a row length, with the FFT spectrum cached when used.
#[derive(Clone)]
pub struct Convolver {
    filter: Filter,
    n: usize,
    fft: Option<FftPlan>,
}

#[derive(Clone)]
struct FftPlan {
    size: usize,
    spectrum: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Convolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Convolver")
            .field("width", &self.filter.width())
            .field("n", &self.n)
            .field("fft_size", &self.fft.as_ref().map(|p| p.size))
            .finish()
    }
}

/// Smallest 2^a 3^b 5^c that is at least `n`.
fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

impl Convolver {
    pub fn new(filter: &Filter, n: usize, engine: Engine) -> Self {
        // Taps further than n - 1 from the center never reach the output.
        let filter = filter.cropped(2 * n.max(1) - 1);
        let w = filter.width();
        let use_fft = match engine {
            Engine::Direct => false,
            Engine::Fft => true,
            Engine::Auto => {
                let direct_cost = (n * w.min(n)) as f64;
                let size = smooth_size(n + w / 2) as f64;
                direct_cost > 6.0 * size * size.log2()
            }
        };
        let fft = use_fft.then(|| FftPlan::new(&filter, n));
        Self { filter, n, fft }
    }

    pub fn filter(&self) -> &Filter {
        &self.filter
    }

    pub fn uses_fft(&self) -> bool {
        self.fft.is_some()
    }

    /// Applies the "same" convolution to every row of `x` (rows are independent signals).
    pub fn apply(&self, x: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
        assert_eq!(x.ncols(), self.n, "row length does not match the convolver");
        assert_eq!(x.dim(), out.dim());
        match &self.fft {
            None => {
                let h = self.filter.taps();
                let mut buf = vec![0.0; self.n];
                for (xr, mut or) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
                    let xs = xr.to_vec();
                    convolve_same(h, &xs, &mut buf);
                    or.assign(&ndarray::ArrayView1::from(&buf[..]));
                }
            }
            Some(plan) => plan.apply(x, out, self.n, self.filter.center()),
        }
    }

    pub fn apply_owned(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        self.apply(x, out.view_mut());
        out
    }
}

impl FftPlan {
    fn new(filter: &Filter, n: usize) -> Self {
        let c = filter.center();
        let size = smooth_size(n + c).max(filter.width());
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(size);
        let inverse = planner.plan_fft_inverse(size);
        let mut spectrum = vec![Complex64::new(0.0, 0.0); size];
        for (s, t) in spectrum.iter_mut().zip(filter.taps()) {
            s.re = *t;
        }
        forward.process(&mut spectrum);
        let scale = 1.0 / size as f64;
        spectrum.iter_mut().for_each(|s| *s *= scale);
        Self { size, spectrum, forward, inverse }
    }

    // Two real rows share one complex transform: x1 + i x2.
    fn apply(&self, x: ArrayView2<f64>, mut out: ArrayViewMut2<f64>, n: usize, c: usize) {
        let rows = x.nrows();
        let mut buf = vec![Complex64::new(0.0, 0.0); self.size];
        let mut scratch =
            vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len().max(self.inverse.get_inplace_scratch_len())];
        let mut r = 0;
        while r < rows {
            let pair = r + 1 < rows;
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for j in 0..n {
                buf[j].re = x[[r, j]];
                if pair {
                    buf[j].im = x[[r + 1, j]];
                }
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for (b, s) in buf.iter_mut().zip(&self.spectrum) {
                *b *= s;
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            for i in 0..n {
                out[[r, i]] = buf[i + c].re;
                if pair {
                    out[[r + 1, i]] = buf[i + c].im;
                }
            }
            r += 2;
        }
    }
}
