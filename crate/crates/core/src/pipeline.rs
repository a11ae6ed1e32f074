//! Row-wise reconstruction of measurement stacks and quality scoring.

use std::ops::Range;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{solve_estimate, SolverConfig};
use crate::conv::Filter;
use crate::error::{ensure, Error, Result};
use crate::synth::{DefectScene, MeasurementStack};
use crate::unfold::{infer_with, BlockSignal, InferencePlan, UnfoldedNetwork};

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Averages groups of `factor` adjacent y-rows.
pub fn bin_pixels_y(stack: &MeasurementStack, factor: usize) -> Result<MeasurementStack> {
    let n_y = stack.n_y();
    if factor == 0 || n_y % factor != 0 {
        return Err(Error::InvalidParameter(format!(
            "binning factor {factor} does not divide n_y = {n_y}; valid factors: {:?}",
            divisors(n_y)
        )));
    }
    if factor == 1 {
        return Ok(stack.clone());
    }
    let data = stack.data();
    let (m, _, n_x) = data.dim();
    let mut out = Array3::zeros((m, n_y / factor, n_x));
    for (j, mut row) in out.axis_iter_mut(Axis(1)).enumerate() {
        for k in 0..factor {
            row += &data.index_axis(Axis(1), j * factor + k);
        }
        row /= factor as f64;
    }
    MeasurementStack::new(out, stack.dx, stack.dy * factor as f64, stack.snr_db)
}

/// Anything that turns one `(measurement, x)` slice into a flux estimate.
pub trait RowReconstructor: Sync {
    fn reconstruct_row(&self, t: ArrayView2<f64>) -> Result<BlockSignal>;
}

/// Unfolded network bound to a row length.
pub struct NetworkReconstructor<'a> {
    net: &'a UnfoldedNetwork,
    plan: InferencePlan,
}

impl<'a> NetworkReconstructor<'a> {
    pub fn new(net: &'a UnfoldedNetwork, n_x: usize) -> Self {
        Self { net, plan: net.plan(n_x) }
    }
}

impl RowReconstructor for NetworkReconstructor<'_> {
    fn reconstruct_row(&self, t: ArrayView2<f64>) -> Result<BlockSignal> {
        infer_with(self.net, &self.plan, t)
    }
}

/// Classical solver with fixed parameters.
pub struct SolverReconstructor {
    pub config: SolverConfig,
    pub psf: Filter,
}

impl RowReconstructor for SolverReconstructor {
    fn reconstruct_row(&self, t: ArrayView2<f64>) -> Result<BlockSignal> {
        solve_estimate(&self.config, &self.psf, t)
    }
}

/// Reconstructs every y-row independently; output is `(m, y, x)`.
pub fn reconstruct_2d(rec: &dyn RowReconstructor, stack: &MeasurementStack) -> Result<Array3<f64>> {
    let rows: Vec<BlockSignal> = (0..stack.n_y())
        .into_par_iter()
        .map(|y| {
            let out = rec.reconstruct_row(stack.row(y))?;
            ensure!(out.dim() == (stack.n_meas(), stack.n_x()), Shape, "row {y}: reconstructor returned {:?}", out.dim());
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut out = Array3::zeros(stack.data().dim());
    for (y, row) in rows.iter().enumerate() {
        out.index_axis_mut(Axis(1), y).assign(row);
    }
    Ok(out)
}

/// Sums over measurements and divides by the largest value; returns `(y, x)`.
pub fn aggregate_and_normalize(per_meas: &Array3<f64>) -> Result<Array2<f64>> {
    let sum = per_meas.sum_axis(Axis(0));
    let max = sum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure!(max > 0.0 && max.is_finite(), Numerical, "cannot normalize an image without a positive maximum");
    Ok(sum / max)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len(), Shape, "vectors differ in length ({} vs {})", a.len(), b.len());
    ensure!(a.len() >= 2, Shape, "need at least two samples for a correlation");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    ensure!(saa > 0.0 && sbb > 0.0, Numerical, "correlation is undefined for a constant vector");
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub pearson_r: f64,
    pub roi: Range<usize>,
}

/// y-window in meters, converted to rows of a given pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiY {
    pub start: f64,
    pub end: f64,
}

impl Default for RoiY {
    fn default() -> Self {
        Self { start: 10e-3, end: 20e-3 }
    }
}

impl RoiY {
    pub fn rows(&self, n_y: usize, dy: f64) -> Result<Range<usize>> {
        ensure!(self.end > self.start && self.start >= 0.0, InvalidParameter, "empty ROI {}..{} m", self.start, self.end);
        let lo = (self.start / dy).round() as usize;
        let hi = ((self.end / dy).round() as usize).min(n_y);
        ensure!(lo < hi, InvalidParameter, "ROI {}..{} m lies outside {n_y} rows of {dy} m", self.start, self.end);
        Ok(lo..hi)
    }
}

fn mean_rows(image: ArrayView2<f64>, rows: Range<usize>) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc = vec![0.0; image.ncols()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(image.row(r)) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / n).collect()
}

/// Pearson correlation of the ROI-averaged image profile against the
/// scene's absorptance profile over the same rows. `image` is `(y, x)` on
/// the scene grid.
pub fn pearson_quality(image: ArrayView2<f64>, scene: &DefectScene, roi: Range<usize>) -> Result<QualityScore> {
    ensure!(
        image.dim() == (scene.n_y(), scene.n_x()),
        Shape,
        "image {:?} does not match scene {}x{}",
        image.dim(),
        scene.n_y(),
        scene.n_x()
    );
    ensure!(!roi.is_empty() && roi.end <= scene.n_y(), InvalidParameter, "ROI rows {roi:?} outside 0..{}", scene.n_y());
    let profile = mean_rows(image, roi.clone());
    let r = pearson(&profile, &scene.profile(roi.clone()))?;
    Ok(QualityScore { pearson_r: r, roi })
}

/// Scores an image reconstructed from a y-binned stack: image rows are
/// mapped back to the scene rows they cover.
pub fn pearson_quality_binned(image: ArrayView2<f64>, factor: usize, scene: &DefectScene, roi: Range<usize>) -> Result<QualityScore> {
    ensure!(factor >= 1 && image.nrows() * factor == scene.n_y(), Shape, "binned image does not cover the scene");
    if factor == 1 {
        return pearson_quality(image, scene, roi);
    }
    let lo = roi.start / factor;
    let hi = roi.end.div_ceil(factor).min(image.nrows());
    ensure!(lo < hi, InvalidParameter, "ROI {roi:?} is empty after binning by {factor}");
    let profile = mean_rows(image, lo..hi);
    let r = pearson(&profile, &scene.profile(lo * factor..hi * factor))?;
    Ok(QualityScore { pearson_r: r, roi: lo * factor..hi * factor })
}

/// Full image from a stack: reconstruct, aggregate, normalize.
pub fn reconstruct_image(rec: &dyn RowReconstructor, stack: &MeasurementStack) -> Result<Array2<f64>> {
    aggregate_and_normalize(&reconstruct_2d(rec, stack)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningRow {
    pub factor: usize,
    pub pearson_r: f64,
    pub wall_ms: f64,
}

/// Bins, reconstructs and scores the stack once per factor. Wall time covers
/// binning, reconstruction and aggregation; the fastest of `repeats` runs is
/// reported.
pub fn binning_study(
    rec: &dyn RowReconstructor,
    stack: &MeasurementStack,
    scene: &DefectScene,
    roi: Range<usize>,
    factors: &[usize],
    repeats: usize,
) -> Result<Vec<BinningRow>> {
    ensure!(!factors.is_empty(), InvalidParameter, "no binning factors given");
    let n_y = stack.n_y();
    if let Some(bad) = factors.iter().find(|f| **f == 0 || n_y % **f != 0) {
        return Err(Error::InvalidParameter(format!(
            "binning factor {bad} does not divide n_y = {n_y}; valid factors: {:?}",
            divisors(n_y)
        )));
    }
    let mut rows = Vec::with_capacity(factors.len());
    for &factor in factors {
        let mut best = f64::INFINITY;
        let mut image = None;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let binned = bin_pixels_y(stack, factor)?;
            let img = reconstruct_image(rec, &binned)?;
            best = best.min(start.elapsed().as_secs_f64() * 1e3);
            image = Some(img);
        }
        let image = image.expect("at least one repeat");
        let score = pearson_quality_binned(image.view(), factor, scene, roi.clone())?;
        rows.push(BinningRow { factor, pearson_r: score.pearson_r, wall_ms: best });
    }
    Ok(rows)
}

pub fn binning_csv(rows: &[BinningRow]) -> String {
    let mut s = String::from("factor,pearson_r,wall_ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.3}\n", r.factor, r.pearson_r, r.wall_ms));
    }
    s
}

/// Number of strict interior local maxima of a 1D profile, counting a flat
/// top once.
pub fn local_maxima(profile: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let n = profile.len();
    let mut i = 1;
    while i + 1 < n {
        if profile[i] > profile[i - 1] {
            let mut j = i;
            while j + 1 < n && profile[j + 1] == profile[i] {
                j += 1;
            }
            if j + 1 < n && profile[j + 1] < profile[i] {
                out.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}
