//! Thermal point spread function of a plate heated at its surface.
//!
//! The kernel is sampled from the Green's function of the heat equation with a
//! truncated series of wall reflections. Time samples start at `dt`, never at
//! zero, because the Green's function only exists for `t > 0`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::Filter;
use crate::error::{ensure, Error, Result};

/// Material and geometry of the specimen. All lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialParams {
    /// kg/m³
    pub mass_density: f64,
    /// J/(kg·K)
    pub specific_heat: f64,
    /// m²/s
    pub diffusivity: f64,
    pub reflectance: f64,
    pub thickness: f64,
    pub observation_depth: f64,
    pub reflection_count: u32,
}

impl Default for MaterialParams {
    /// Structural steel plate, 3 mm, observed in transmission.
    fn default() -> Self {
        Self {
            mass_density: 7800.0,
            specific_heat: 440.0,
            diffusivity: 1.6e-5,
            reflectance: 1.0,
            thickness: 3e-3,
            observation_depth: 3e-3,
            reflection_count: 5,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.mass_density > 0.0, InvalidParameter, "mass density must be > 0");
        ensure!(self.specific_heat > 0.0, InvalidParameter, "specific heat must be > 0");
        ensure!(self.diffusivity > 0.0, InvalidParameter, "diffusivity must be > 0");
        ensure!(
            (0.0..=1.0).contains(&self.reflectance),
            InvalidParameter,
            "reflectance must lie in [0, 1], got {}",
            self.reflectance
        );
        ensure!(self.thickness > 0.0, InvalidParameter, "thickness must be > 0");
        ensure!(
            self.observation_depth == 0.0 || self.observation_depth == self.thickness,
            InvalidParameter,
            "observation depth must be 0 (reflection) or the thickness (transmission)"
        );
        ensure!(self.reflection_count >= 1, InvalidParameter, "reflection count must be >= 1");
        Ok(())
    }
}

/// Sampling grid. Spacings in meters and seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_x: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
}

impl Grid {
    pub fn new(n_x: usize, n_y: usize, n_t: usize, dx: f64, dy: f64, dt: f64) -> Result<Self> {
        let grid = Self { n_x, n_y, n_t, dx, dy, dt };
        grid.validate()?;
        Ok(grid)
    }

    /// A grid with a single row in y (the x-t training form).
    pub fn line(n_x: usize, n_t: usize, dx: f64, dt: f64) -> Result<Self> {
        Self::new(n_x, 1, n_t, dx, dx, dt)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_x >= 1 && self.n_y >= 1 && self.n_t >= 1,
            InvalidParameter,
            "grid counts must be >= 1, got {}x{}x{}",
            self.n_x,
            self.n_y,
            self.n_t
        );
        ensure!(
            self.dx > 0.0 && self.dy > 0.0 && self.dt > 0.0,
            InvalidParameter,
            "grid spacings must be > 0"
        );
        Ok(())
    }

    pub fn center_x(&self) -> usize {
        self.n_x / 2
    }

    pub fn center_y(&self) -> usize {
        self.n_y / 2
    }

    pub fn len(&self) -> usize {
        self.n_x * self.n_y * self.n_t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rectangular laser pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseProfile {
    /// Seconds.
    pub duration: f64,
    /// W/m², constant while the laser is on.
    pub amplitude: f64,
}

impl PulseProfile {
    pub fn new(duration: f64, amplitude: f64) -> Result<Self> {
        ensure!(duration > 0.0, InvalidParameter, "pulse duration must be > 0");
        ensure!(amplitude > 0.0, InvalidParameter, "pulse amplitude must be > 0");
        Ok(Self { duration, amplitude })
    }

    /// Number of frames the laser is on. Errors if the pulse is shorter than one frame.
    pub fn frames(&self, dt: f64) -> Result<usize> {
        let frames = (self.duration / dt * (1.0 + 1e-12)).floor();
        ensure!(
            frames >= 1.0,
            InvalidParameter,
            "pulse duration {} s is shorter than one frame ({} s)",
            self.duration,
            dt
        );
        Ok(frames as usize)
    }
}

/// Discretized point spread function, stored x-fastest: `(i, j, k) -> i + n_x (j + n_y k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    values: Vec<f64>,
    grid: Grid,
    pulse_convolved: bool,
}

/// How the time axis is reduced to a single spatial profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "frame")]
pub enum TimeCollapse {
    /// Frame where the central value peaks.
    #[default]
    PeakFrame,
    /// A fixed frame index.
    Frame(usize),
    /// Sum over all frames, scaled by `dt`.
    Integrate,
}

impl PsfKernel {
    pub fn from_values(values: Vec<f64>, grid: Grid, pulse_convolved: bool) -> Result<Self> {
        grid.validate()?;
        ensure!(
            values.len() == grid.len(),
            Shape,
            "kernel has {} values, grid needs {}",
            values.len(),
            grid.len()
        );
        ensure!(values.iter().all(|v| v.is_finite()), Numerical, "kernel contains non-finite values");
        Ok(Self { values, grid, pulse_convolved })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pulse_convolved(&self) -> bool {
        self.pulse_convolved
    }

    pub fn is_1d(&self) -> bool {
        self.grid.n_y == 1
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid.n_x * (j + self.grid.n_y * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// Time series at one spatial position.
    pub fn time_series(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.grid.n_t).map(|k| self.get(i, j, k)).collect()
    }

    /// Spatial x-profile of the central y row at frame `k`.
    pub fn x_profile(&self, k: usize) -> Vec<f64> {
        let j = self.grid.center_y();
        (0..self.grid.n_x).map(|i| self.get(i, j, k)).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            grid: self.grid,
            pulse_convolved: self.pulse_convolved,
        }
    }

    /// Divides by the largest value so the peak is 1.
    pub fn peak_normalized(&self) -> Result<Self> {
        let peak = self.values.iter().copied().fold(0.0, f64::max);
        ensure!(peak > 0.0, Numerical, "cannot peak-normalize an all-zero kernel");
        Ok(self.scaled(1.0 / peak))
    }

    /// Frame index selected by `collapse`, or `None` for integration.
    pub fn collapse_frame(&self, collapse: TimeCollapse) -> Result<Option<usize>> {
        let (ci, cj) = (self.grid.center_x(), self.grid.center_y());
        match collapse {
            TimeCollapse::Frame(k) => {
                ensure!(k < self.grid.n_t, InvalidParameter, "frame {k} outside 0..{}", self.grid.n_t);
                Ok(Some(k))
            }
            TimeCollapse::PeakFrame => {
                let mut best = 0;
                for k in 1..self.grid.n_t {
                    if self.get(ci, cj, k) > self.get(ci, cj, best) {
                        best = k;
                    }
                }
                Ok(Some(best))
            }
            TimeCollapse::Integrate => Ok(None),
        }
    }

    /// Reduces the central x-t slice to a centered 1D spatial filter.
    pub fn spatial_filter(&self, collapse: TimeCollapse) -> Result<Filter> {
        ensure!(
            self.grid.n_x % 2 == 1,
            InvalidParameter,
            "spatial filters need an odd kernel width, got n_x = {}",
            self.grid.n_x
        );
        let taps = match self.collapse_frame(collapse)? {
            Some(k) => self.x_profile(k),
            None => {
                let mut acc = vec![0.0; self.grid.n_x];
                for k in 0..self.grid.n_t {
                    for (a, v) in acc.iter_mut().zip(self.x_profile(k)) {
                        *a += v;
                    }
                }
                acc.iter().map(|a| a * self.grid.dt).collect()
            }
        };
        Filter::new(taps)
    }
}

/// Green's function of the plate, with the reflection series truncated to
/// `p = 1..=reflection_count`.
pub fn eval_green(x: f64, y: f64, t: f64, params: &MaterialParams) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("Green's function is only defined for t > 0, got t = {t}")));
    }
    params.validate()?;
    Ok(green_unchecked(x, y, t, params))
}

#[inline]
fn green_unchecked(x: f64, y: f64, t: f64, p: &MaterialParams) -> f64 {
    let four_alpha_t = 4.0 * p.diffusivity * t;
    let prefactor = 2.0 / (4.0 * PI * p.diffusivity * p.mass_density * p.specific_heat);
    let lateral = (-(x * x + y * y) / four_alpha_t).exp();
    let r2 = p.reflectance * p.reflectance;
    let mut weight = 1.0;
    let mut series = 0.0;
    for refl in 1..=p.reflection_count {
        let depth = 2.0 * refl as f64 * p.thickness + p.observation_depth;
        series += weight * (-(depth * depth) / four_alpha_t).exp();
        weight *= r2;
    }
    prefactor * lateral * series
}

/// Samples the Green's function on `grid`, centered in x and y, at `t = (k + 1) dt`.
pub fn build_psf(grid: &Grid, params: &MaterialParams) -> Result<PsfKernel> {
    grid.validate()?;
    params.validate()?;
    let (cx, cy) = (grid.center_x() as f64, grid.center_y() as f64);
    let plane = grid.n_x * grid.n_y;
    // Slices are independent, so the parallel build matches the sequential one bit for bit.
    let values: Vec<f64> = (0..grid.n_t)
        .into_par_iter()
        .flat_map_iter(|k| {
            let t = (k + 1) as f64 * grid.dt;
            (0..plane).map(move |idx| {
                let (i, j) = (idx % grid.n_x, idx / grid.n_x);
                let x = (i as f64 - cx) * grid.dx;
                let y = (j as f64 - cy) * grid.dy;
                green_unchecked(x, y, t, params)
            })
        })
        .collect();
    PsfKernel::from_values(values, *grid, false)
}

/// Causal convolution of the kernel with the rectangular pulse along t,
/// truncated to the input length.
pub fn convolve_pulse(psf: &PsfKernel, pulse: &PulseProfile) -> Result<PsfKernel> {
    let grid = *psf.grid();
    let frames = pulse.frames(grid.dt)?;
    let tap = pulse.amplitude * grid.dt;
    let plane = grid.n_x * grid.n_y;
    let src = psf.values();
    let mut out = vec![0.0; src.len()];
    for k in 0..grid.n_t {
        let lo = k.saturating_sub(frames - 1);
        let dst = &mut out[k * plane..(k + 1) * plane];
        for kk in lo..=k {
            for (d, s) in dst.iter_mut().zip(&src[kk * plane..(kk + 1) * plane]) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|d| *d *= tap);
    }
    PsfKernel::from_values(out, grid, true)
}

/// The x-t kernel with y fixed at zero. 1D kernels are returned unchanged.
pub fn psf_slice_1d(psf: &PsfKernel) -> PsfKernel {
    if psf.is_1d() {
        return psf.clone();
    }
    let g = psf.grid();
    let j = g.center_y();
    let mut values = Vec::with_capacity(g.n_x * g.n_t);
    for k in 0..g.n_t {
        for i in 0..g.n_x {
            values.push(psf.get(i, j, k));
        }
    }
    let grid = Grid { n_y: 1, ..*g };
    PsfKernel { values, grid, pulse_convolved: psf.pulse_convolved }
}
