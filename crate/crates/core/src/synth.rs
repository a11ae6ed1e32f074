//! Synthetic defect scenes, line-scan illumination and measurement stacks.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{Convolver, Engine, Filter};
use crate::error::{ensure, Error, Result};
use crate::io;
use crate::thermal::{PsfKernel, PulseProfile, TimeCollapse};
use crate::unfold::BlockSignal;

/// One slit: center pixel, width in pixels and absorptance level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlitSpec {
    pub center: usize,
    pub width: usize,
    pub level: f64,
}

impl SlitSpec {
    pub fn new(center: usize, width: usize) -> Self {
        Self { center, width, level: 1.0 }
    }

    /// First covered pixel (may be negative for slits hanging off the left edge).
    pub fn start(&self) -> isize {
        self.center as isize - ((self.width as isize - 1) / 2)
    }

    pub fn end(&self) -> isize {
        self.start() + self.width as isize
    }
}

/// Ground-truth absorptance, stored `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectScene {
    absorptance: Array2<f64>,
    slits: Vec<SlitSpec>,
    dx: f64,
    dy: f64,
}

impl DefectScene {
    pub fn absorptance(&self) -> &Array2<f64> {
        &self.absorptance
    }

    pub fn slits(&self) -> &[SlitSpec] {
        &self.slits
    }

    pub fn n_x(&self) -> usize {
        self.absorptance.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.absorptance.nrows()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    /// Fraction of nonzero pixels.
    pub fn sparsity(&self) -> f64 {
        let nz = self.absorptance.iter().filter(|v| **v != 0.0).count();
        nz as f64 / self.absorptance.len() as f64
    }

    /// Mean absorptance over `rows`, as a function of x.
    pub fn profile(&self, rows: std::ops::Range<usize>) -> Vec<f64> {
        let rows = rows.start.min(self.n_y() - 1)..rows.end.clamp(rows.start.min(self.n_y() - 1) + 1, self.n_y());
        self.absorptance.slice(s![rows, ..]).mean_axis(Axis(0)).unwrap().to_vec()
    }
}

/// Builds a scene whose slits run along y over the whole grid. Slits must lie
/// inside `0..n_x` and must not share pixels.
pub fn make_scene(slits: &[SlitSpec], n_x: usize, n_y: usize, dx: f64, dy: f64) -> Result<DefectScene> {
    ensure!(n_x >= 1 && n_y >= 1, InvalidParameter, "scene needs at least one pixel");
    let mut row = vec![0.0; n_x];
    let mut taken = vec![false; n_x];
    for (k, slit) in slits.iter().enumerate() {
        ensure!(slit.width >= 1, InvalidParameter, "slit {k} has zero width");
        ensure!(
            slit.level > 0.0 && slit.level <= 1.0,
            InvalidParameter,
            "slit {k} absorptance {} outside (0, 1]",
            slit.level
        );
        ensure!(
            slit.start() >= 0 && slit.end() <= n_x as isize,
            InvalidParameter,
            "slit {k} (center {}, width {}) does not fit in {n_x} pixels",
            slit.center,
            slit.width
        );
        for i in slit.start() as usize..slit.end() as usize {
            ensure!(!taken[i], InvalidParameter, "slit {k} overlaps another slit at pixel {i}");
            taken[i] = true;
            row[i] = slit.level;
        }
    }
    let absorptance = Array2::from_shape_fn((n_y, n_x), |(_, i)| row[i]);
    Ok(DefectScene { absorptance, slits: slits.to_vec(), dx, dy })
}

/// Slit pairs laid out left to right: `gaps` are center-to-center distances
/// inside each pair, `spacing` the distance between pair centers (meters).
pub fn slit_pair_layout(gaps: &[f64], spacing: f64, first_center: f64, width: usize, dx: f64) -> Vec<SlitSpec> {
    let mut slits = Vec::with_capacity(gaps.len() * 2);
    for (p, gap) in gaps.iter().enumerate() {
        let pair_center = ((first_center + p as f64 * spacing) / dx).round() as isize;
        let gap_px = (gap / dx).round() as isize;
        let left = pair_center - gap_px / 2;
        for c in [left, left + gap_px] {
            slits.push(SlitSpec::new(c.max(0) as usize, width));
        }
    }
    slits
}

/// Pair gaps of the reference specimen (meters).
pub const REFERENCE_PAIR_GAPS: [f64; 4] = [0.5e-3, 1.0e-3, 2.0e-3, 1.3e-3];
/// Distance between neighbouring pair centers (meters).
pub const REFERENCE_PAIR_SPACING: f64 = 10e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineProfile {
    #[default]
    Boxcar,
    /// Gaussian whose FWHM equals the line width.
    Gaussian,
}

/// Scan plan. Line positions are only used to synthesize data; nothing that
/// reconstructs receives them.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationPlan {
    pub line_width: usize,
    pub profile: LineProfile,
    pub pulse: PulseProfile,
    positions: Vec<usize>,
    n_x: usize,
}

impl IlluminationPlan {
    pub fn n_meas(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Spatial intensity of line `m` over x.
    pub fn line_mask(&self, m: usize) -> Vec<f64> {
        let pos = self.positions[m] as isize;
        match self.profile {
            LineProfile::Boxcar => {
                let start = pos - (self.line_width as isize - 1) / 2;
                (0..self.n_x as isize)
                    .map(|i| if i >= start && i < start + self.line_width as isize { 1.0 } else { 0.0 })
                    .collect()
            }
            LineProfile::Gaussian => {
                let sigma = self.line_width as f64 / (8.0 * 2f64.ln()).sqrt();
                (0..self.n_x as isize)
                    .map(|i| {
                        let d = (i - pos) as f64;
                        (-d * d / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            }
        }
    }
}

/// Evenly spaced line positions `floor((m + 1/2) n_x / n_meas)`, optionally
/// jittered by up to `jitter` pixels.
pub fn make_illumination(
    n_meas: usize,
    line_width: usize,
    n_x: usize,
    pulse: PulseProfile,
    jitter: usize,
    seed: u64,
) -> Result<IlluminationPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plan_with_rng(n_meas, line_width, n_x, pulse, LineProfile::Boxcar, jitter, &mut rng)
}

fn plan_with_rng(
    n_meas: usize,
    line_width: usize,
    n_x: usize,
    pulse: PulseProfile,
    profile: LineProfile,
    jitter: usize,
    rng: &mut ChaCha8Rng,
) -> Result<IlluminationPlan> {
    ensure!(n_meas >= 1, InvalidParameter, "need at least one measurement");
    ensure!(line_width >= 1, InvalidParameter, "line width must be >= 1");
    ensure!(line_width <= n_x, InvalidParameter, "line width {line_width} exceeds grid width {n_x}");
    let positions = (0..n_meas)
        .map(|m| {
            let base = ((2 * m + 1) * n_x / (2 * n_meas)) as i64;
            let shift = if jitter > 0 { rng.random_range(-(jitter as i64)..=jitter as i64) } else { 0 };
            (base + shift).clamp(0, n_x as i64 - 1) as usize
        })
        .collect();
    Ok(IlluminationPlan { line_width, profile, pulse, positions, n_x })
}

/// Time-collapsed measurements stored `(m, y, x)`. Carries no illumination
/// positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementStack {
    data: Array3<f64>,
    pub dx: f64,
    pub dy: f64,
    pub snr_db: Option<f64>,
}

impl MeasurementStack {
    pub fn new(data: Array3<f64>, dx: f64, dy: f64, snr_db: Option<f64>) -> Result<Self> {
        ensure!(data.iter().all(|v| v.is_finite()), Numerical, "measurement data must be finite");
        ensure!(data.len() > 0, Shape, "empty measurement stack");
        Ok(Self { data, dx, dy, snr_db })
    }

    /// A single-row stack from `(m, x)` data.
    pub fn from_rows(rows: Array2<f64>, dx: f64) -> Result<Self> {
        let (m, n) = rows.dim();
        Self::new(rows.into_shape_with_order((m, 1, n)).unwrap(), dx, dx, None)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn n_meas(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_y(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_x(&self) -> usize {
        self.data.dim().2
    }

    /// The `(m, x)` slice of one y-row.
    pub fn row(&self, y: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(1), y)
    }

    /// Repeats a single-row stack `n_y` times along y.
    pub fn extrude_y(&self, n_y: usize) -> Result<Self> {
        ensure!(self.n_y() == 1, Shape, "extrude_y needs a single-row stack");
        let row = self.row(0);
        let data = Array3::from_shape_fn((self.n_meas(), n_y, self.n_x()), |(m, _, x)| row[[m, x]]);
        Self::new(data, self.dx, self.dy, self.snr_db)
    }

    /// Sum over measurements, `(y, x)`.
    pub fn aggregate(&self) -> Array2<f64> {
        self.data.sum_axis(Axis(0))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_array3(path, &self.data)
    }

    /// Reads a `TEN1` tensor, or a CSV with one row per measurement.
    pub fn read(path: &Path, dx: f64, dy: f64) -> Result<Self> {
        let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let data = if is_csv {
            let m = io::read_csv_matrix(path)?;
            let (r, c) = m.dim();
            m.into_shape_with_order((r, 1, c)).unwrap()
        } else {
            io::read_array3(path)?
        };
        Self::new(data, dx, dy, None)
    }
}

/// Row-wise forward model `Phi *_x u` for a `(m, x)` block.
pub fn forward_rows(filter: &Filter, u: ArrayView2<f64>) -> Array2<f64> {
    Convolver::new(filter, u.ncols(), Engine::Auto).apply_owned(u)
}

/// 2D "same" convolution of one `(y, x)` plane with a `(ky, kx)` kernel.
fn convolve_plane(kernel: &Array2<f64>, plane: ArrayView2<f64>) -> Array2<f64> {
    let (ky, kx) = kernel.dim();
    let (cy, cx) = ((ky / 2) as isize, (kx / 2) as isize);
    let (ny, nx) = plane.dim();
    let mut out = Array2::zeros((ny, nx));
    for ((j, i), v) in plane.indexed_iter() {
        if *v == 0.0 {
            continue;
        }
        for b in 0..ky {
            let oy = j as isize + b as isize - cy;
            if oy < 0 || oy >= ny as isize {
                continue;
            }
            for a in 0..kx {
                let ox = i as isize + a as isize - cx;
                if ox >= 0 && ox < nx as isize {
                    out[[oy as usize, ox as usize]] += kernel[[b, a]] * v;
                }
            }
        }
    }
    out
}

/// Ground truth and measurements from [`synthesize`].
#[derive(Debug, Clone)]
pub struct Synthesis {
    /// Heat flux `u^m = line_m * a`, `(m, y, x)`.
    pub flux: Array3<f64>,
    pub stack: MeasurementStack,
}

/// Forward-simulates every measurement of `plan` on `scene`.
///
/// A 1D kernel is applied along x to each y-row; a 2D kernel is applied as a
/// full spatial convolution. The kernel must already include the pulse.
pub fn synthesize(
    scene: &DefectScene,
    plan: &IlluminationPlan,
    psf: &PsfKernel,
    collapse: TimeCollapse,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Synthesis> {
    ensure!(
        psf.pulse_convolved(),
        InvalidParameter,
        "synthesis needs a pulse-convolved kernel (see convolve_pulse)"
    );
    ensure!(
        plan.n_x == scene.n_x(),
        Shape,
        "illumination spans {} pixels, scene has {}",
        plan.n_x,
        scene.n_x()
    );
    let (n_meas, n_y, n_x) = (plan.n_meas(), scene.n_y(), scene.n_x());
    let a = scene.absorptance();
    let mut flux = Array3::zeros((n_meas, n_y, n_x));
    for m in 0..n_meas {
        let mask = plan.line_mask(m);
        for ((j, i), v) in a.indexed_iter() {
            flux[[m, j, i]] = mask[i] * v;
        }
    }
    let mut data = Array3::zeros((n_meas, n_y, n_x));
    if psf.is_1d() {
        let filter = psf.spatial_filter(collapse)?;
        let conv = Convolver::new(&filter, n_x, Engine::Auto);
        for j in 0..n_y {
            let slab = flux.index_axis(Axis(1), j);
            let out = conv.apply_owned(slab);
            data.index_axis_mut(Axis(1), j).assign(&out);
        }
    } else {
        let kernel = spatial_kernel_2d(psf, collapse)?;
        for m in 0..n_meas {
            let out = convolve_plane(&kernel, flux.index_axis(Axis(0), m));
            data.index_axis_mut(Axis(0), m).assign(&out);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(snr) = snr_db {
        add_noise(&mut data, snr, &mut rng);
    }
    let stack = MeasurementStack::new(data, scene.dx(), scene.dy(), snr_db)?;
    Ok(Synthesis { flux, stack })
}

fn spatial_kernel_2d(psf: &PsfKernel, collapse: TimeCollapse) -> Result<Array2<f64>> {
    let g = psf.grid();
    ensure!(
        g.n_x % 2 == 1 && g.n_y % 2 == 1,
        InvalidParameter,
        "2D spatial kernels need odd extents, got {}x{}",
        g.n_x,
        g.n_y
    );
    let frame = psf.collapse_frame(collapse)?;
    Ok(Array2::from_shape_fn((g.n_y, g.n_x), |(j, i)| match frame {
        Some(k) => psf.get(i, j, k),
        None => (0..g.n_t).map(|k| psf.get(i, j, k)).sum::<f64>() * g.dt,
    }))
}

/// Adds white Gaussian noise per measurement, scaled to that measurement's
/// mean signal power. Silent measurements stay noise free.
fn add_noise(data: &mut Array3<f64>, snr_db: f64, rng: &mut ChaCha8Rng) {
    let ratio = 10f64.powf(snr_db / 10.0);
    for mut meas in data.axis_iter_mut(Axis(0)) {
        let power = meas.iter().map(|v| v * v).sum::<f64>() / meas.len() as f64;
        if power == 0.0 {
            continue;
        }
        let sigma = (power / ratio).sqrt();
        for v in meas.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += sigma * n;
        }
    }
}

/// `10 log10(signal power / noise power)` from a clean and a noisy copy.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let signal: f64 = clean.iter().map(|v| v * v).sum();
    let noise: f64 = clean.iter().zip(noisy).map(|(c, n)| (n - c) * (n - c)).sum();
    10.0 * (signal / noise).log10()
}

/// Randomized training-set generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSetConfig {
    pub n_x: usize,
    /// Pixel pitch (meters).
    pub dx: f64,
    pub n_meas: usize,
    pub line_width: usize,
    pub line_profile: LineProfile,
    /// Maximum random shift of each line, in pixels.
    pub jitter: usize,
    /// Target fraction of nonzero pixels.
    pub sparsity: f64,
    pub slit_width_min: usize,
    pub slit_width_max: usize,
    pub absorptance_min: f64,
    pub snr_db: Option<f64>,
    pub batches: usize,
}

impl Default for TrainingSetConfig {
    fn default() -> Self {
        Self {
            n_x: 128,
            dx: 0.25e-3,
            n_meas: 16,
            line_width: 8,
            line_profile: LineProfile::Boxcar,
            jitter: 0,
            sparsity: 0.1,
            slit_width_min: 1,
            slit_width_max: 3,
            absorptance_min: 0.5,
            snr_db: Some(40.0),
            batches: 16,
        }
    }
}

impl TrainingSetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_x >= 1 && self.dx > 0.0, InvalidParameter, "invalid grid");
        ensure!(self.batches >= 1, InvalidParameter, "need at least one batch");
        ensure!((0.0..=0.5).contains(&self.sparsity), InvalidParameter, "sparsity must lie in [0, 0.5]");
        ensure!(
            self.slit_width_min >= 1 && self.slit_width_min <= self.slit_width_max,
            InvalidParameter,
            "slit width range [{}, {}] is empty",
            self.slit_width_min,
            self.slit_width_max
        );
        ensure!(
            self.absorptance_min > 0.0 && self.absorptance_min <= 1.0,
            InvalidParameter,
            "absorptance_min must lie in (0, 1]"
        );
        let target = self.target_pixels();
        ensure!(
            target == 0 || target >= self.slit_width_min,
            InvalidParameter,
            "sparsity {} allows {} pixels, fewer than the minimum slit width {}",
            self.sparsity,
            target,
            self.slit_width_min
        );
        Ok(())
    }

    fn target_pixels(&self) -> usize {
        (self.sparsity * self.n_x as f64).round() as usize
    }
}

/// One supervised pair: ground-truth flux `(m, x)` and its measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub flux: BlockSignal,
    pub stack: MeasurementStack,
}

impl TrainingPair {
    pub fn measurements(&self) -> ArrayView2<'_, f64> {
        self.stack.row(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub pairs: Vec<TrainingPair>,
    pub config: TrainingSetConfig,
    pub seed: u64,
}

fn random_scene(cfg: &TrainingSetConfig, rng: &mut ChaCha8Rng) -> Result<DefectScene> {
    let target = cfg.target_pixels();
    let mut slits: Vec<SlitSpec> = Vec::new();
    let mut taken = vec![false; cfg.n_x];
    let mut covered = 0;
    let mut attempts = 0;
    while target - covered >= cfg.slit_width_min && attempts < 10_000 {
        attempts += 1;
        let max_w = cfg.slit_width_max.min(target - covered);
        let width = rng.random_range(cfg.slit_width_min..=max_w);
        let center = rng.random_range(0..cfg.n_x);
        let level = if cfg.absorptance_min < 1.0 { rng.random_range(cfg.absorptance_min..=1.0) } else { 1.0 };
        let slit = SlitSpec { center, width, level };
        let (start, end) = (slit.start(), slit.end());
        if start < 0 || end > cfg.n_x as isize {
            continue;
        }
        // keep at least one empty pixel between slits
        let lo = (start - 1).max(0) as usize;
        let hi = (end + 1).min(cfg.n_x as isize) as usize;
        if taken[lo..hi].iter().any(|t| *t) {
            continue;
        }
        taken[start as usize..end as usize].iter_mut().for_each(|t| *t = true);
        covered += width;
        slits.push(slit);
    }
    if target > 0 && covered == 0 {
        return Err(Error::InvalidParameter("could not place any slit with the configured widths".into()));
    }
    slits.sort_by_key(|s| s.center);
    make_scene(&slits, cfg.n_x, 1, cfg.dx, cfg.dx)
}

/// Generates one batch from its own RNG stream so batches are independent of
/// generation order.
pub fn generate_batch(cfg: &TrainingSetConfig, psf: &PsfKernel, collapse: TimeCollapse, seed: u64, b: usize) -> Result<TrainingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    let scene = random_scene(cfg, &mut rng)?;
    let pulse = PulseProfile::new(psf.grid().dt, 1.0)?;
    let plan = plan_with_rng(cfg.n_meas, cfg.line_width, cfg.n_x, pulse, cfg.line_profile, cfg.jitter, &mut rng)?;
    let noise_seed: u64 = rng.random();
    let syn = synthesize(&scene, &plan, psf, collapse, cfg.snr_db, noise_seed)?;
    let flux = syn.flux.index_axis(Axis(1), 0).to_owned();
    Ok(TrainingPair { flux, stack: syn.stack })
}

/// Generates `cfg.batches` pairs. Parallel and sequential runs agree exactly.
pub fn generate_training_set(cfg: &TrainingSetConfig, psf: &PsfKernel, collapse: TimeCollapse, seed: u64) -> Result<TrainingSet> {
    cfg.validate()?;
    ensure!(psf.is_1d(), InvalidParameter, "training uses the x-t kernel; slice 2D kernels first");
    let pairs = (0..cfg.batches)
        .into_par_iter()
        .map(|b| generate_batch(cfg, psf, collapse, seed, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet { pairs, config: cfg.clone(), seed })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    batches: usize,
    config: TrainingSetConfig,
    files: Vec<(String, String)>,
}

impl TrainingSet {
    /// Writes `manifest.json` first, then one `TEN1` pair per batch.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files: Vec<(String, String)> =
            (0..self.pairs.len()).map(|b| (format!("batch_{b:04}_u.ten"), format!("batch_{b:04}_t.ten"))).collect();
        let manifest = Manifest {
            format: "psrnet-training-set-v1".into(),
            seed: self.seed,
            batches: self.pairs.len(),
            config: self.config.clone(),
            files: files.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        io::write_text(&dir.join("manifest.json"), &(text + "\n"))?;
        for (pair, (uf, tf)) in self.pairs.iter().zip(&files) {
            io::write_array2(&dir.join(uf), &pair.flux)?;
            io::write_array2(&dir.join(tf), &pair.measurements().to_owned())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut pairs = Vec::with_capacity(manifest.files.len());
        for (uf, tf) in &manifest.files {
            let flux = io::read_array2(&dir.join(uf))?;
            let t = io::read_array2(&dir.join(tf))?;
            ensure!(flux.dim() == t.dim(), Shape, "batch {uf}: flux and measurement shapes differ");
            let stack = MeasurementStack::from_rows(t, manifest.config.dx)?;
            pairs.push(TrainingPair { flux, stack: MeasurementStack { snr_db: manifest.config.snr_db, ..stack } });
        }
        Ok(Self { pairs, config: manifest.config, seed: manifest.seed })
    }
}
