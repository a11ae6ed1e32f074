//! TOML run configuration. Every section is optional and unknown keys are
//! rejected.
//!
//! ```toml
//! seed = 7
//!
//! [material]          # plate and observation geometry
//! [psf]               # kernel grid, pulse, time collapse
//! [training_set]      # synthetic training data
//! [train]             # optimizer and schedule
//! [network]           # architecture
//! [scene]             # slit-pair test scene and its scan
//! [reconstruct]       # binning and ROI
//! [bench]             # study grids
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::Filter;
use crate::error::{ensure, Error, Result};
use crate::pipeline::RoiY;
use crate::synth::{make_illumination, make_scene, slit_pair_layout, synthesize, DefectScene, LineProfile, MeasurementStack, Synthesis, TrainingSetConfig, REFERENCE_PAIR_GAPS};
use crate::thermal::{build_psf, convolve_pulse, Grid, MaterialParams, PsfKernel, PulseProfile, TimeCollapse};
use crate::train::TrainConfig;
use crate::unfold::{default_step_size, Architecture, UnfoldedNetwork, Variant, WeightMode};

/// Kernel sampling. `n_x` is the kernel support in pixels (odd); the
/// reconstruction grid may be wider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsfConfig {
    pub n_x: usize,
    /// 1 builds the x-t kernel only.
    pub n_y: usize,
    pub n_t: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    pub pulse_duration: f64,
    pub pulse_amplitude: f64,
    pub collapse: TimeCollapse,
    pub peak_normalize: bool,
}

impl Default for PsfConfig {
    fn default() -> Self {
        Self {
            n_x: 33,
            n_y: 1,
            n_t: 10,
            dx: 0.25e-3,
            dy: 0.25e-3,
            dt: 2e-3,
            pulse_duration: 10e-3,
            pulse_amplitude: 1.0,
            collapse: TimeCollapse::PeakFrame,
            peak_normalize: false,
        }
    }
}

impl PsfConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.n_x, self.n_y, self.n_t, self.dx, self.dy, self.dt)
    }

    /// Builds the pulse-convolved kernel.
    pub fn build(&self, material: &MaterialParams) -> Result<PsfKernel> {
        let raw = build_psf(&self.grid()?, material)?;
        let pulse = PulseProfile::new(self.pulse_duration, self.pulse_amplitude)?;
        let psf = convolve_pulse(&raw, &pulse)?;
        if self.peak_normalize {
            psf.peak_normalized()
        } else {
            Ok(psf)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub weight_mode: WeightMode,
    pub relu_after_gradient: bool,
    pub layers: usize,
    /// `γ`; defaults to the stability bound of the kernel.
    pub step: Option<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { variant: Variant::Lbfista, weight_mode: WeightMode::Untied, relu_after_gradient: false, layers: 4, step: None }
    }
}

impl NetworkConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            variant: self.variant,
            weight_mode: self.weight_mode,
            relu_after_gradient: self.relu_after_gradient,
            layers: self.layers,
        }
    }
}

/// Slit pairs scanned by evenly spaced laser lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub dx: f64,
    pub dy: f64,
    /// Center-to-center distance inside each pair (meters).
    pub gaps: Vec<f64>,
    pub pair_spacing: f64,
    pub first_pair_center: f64,
    pub slit_width: usize,
    pub n_meas: usize,
    pub line_width: usize,
    pub line_profile: LineProfile,
    pub jitter: usize,
    pub snr_db: Option<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_x: 128,
            n_y: 1,
            dx: 0.25e-3,
            dy: 0.25e-3,
            gaps: REFERENCE_PAIR_GAPS.to_vec(),
            pair_spacing: 7.5e-3,
            first_pair_center: 5e-3,
            slit_width: 1,
            n_meas: 16,
            line_width: 8,
            line_profile: LineProfile::Boxcar,
            jitter: 0,
            snr_db: Some(40.0),
        }
    }
}

impl SceneConfig {
    pub fn scene(&self) -> Result<DefectScene> {
        let slits = slit_pair_layout(&self.gaps, self.pair_spacing, self.first_pair_center, self.slit_width, self.dx);
        make_scene(&slits, self.n_x, self.n_y, self.dx, self.dy)
    }

    /// Scene and its measurements. The illumination uses `seed`, the noise a
    /// derived seed.
    pub fn synthesize(&self, psf: &PsfKernel, collapse: TimeCollapse, seed: u64) -> Result<(DefectScene, Synthesis)> {
        let scene = self.scene()?;
        let pulse = PulseProfile::new(psf.grid().dt, 1.0)?;
        let mut plan = make_illumination(self.n_meas, self.line_width, self.n_x, pulse, self.jitter, seed)?;
        plan.profile = self.line_profile;
        let syn = synthesize(&scene, &plan, psf, collapse, self.snr_db, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
        Ok((scene, syn))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub bin_factor: usize,
    pub roi: Option<RoiY>,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self { bin_factor: 1, roi: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub weight_modes: Vec<WeightMode>,
    pub relu_modes: Vec<bool>,
    pub layer_list: Vec<usize>,
    /// Rows of the y-constant stack used by the binning study.
    pub binning_rows: usize,
    pub binning_factors: Vec<usize>,
    pub timing_repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            weight_modes: vec![WeightMode::Tied, WeightMode::Untied],
            relu_modes: vec![false, true],
            layer_list: vec![2, 4, 6],
            binning_rows: 450,
            binning_factors: vec![1, 2, 3, 5, 6, 9, 10, 15, 18, 25, 30],
            timing_repeats: 20,
        }
    }
}

/// Everything a command may need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub material: MaterialParams,
    pub psf: PsfConfig,
    pub training_set: TrainingSetConfig,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub scene: SceneConfig,
    pub reconstruct: ReconstructConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            material: MaterialParams::default(),
            psf: PsfConfig::default(),
            training_set: TrainingSetConfig::default(),
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
            scene: SceneConfig::default(),
            reconstruct: ReconstructConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        self.psf.grid()?;
        ensure!(self.psf.n_x % 2 == 1, Config, "psf.n_x must be odd, got {}", self.psf.n_x);
        self.training_set.validate()?;
        self.train.validate()?;
        ensure!(self.network.layers >= 1, Config, "network.layers must be >= 1");
        ensure!(self.scene.n_meas >= 1 && self.scene.n_x >= 1 && self.scene.n_y >= 1, Config, "scene grid must be non-empty");
        ensure!(self.reconstruct.bin_factor >= 1, Config, "reconstruct.bin_factor must be >= 1");
        ensure!(!self.bench.variants.is_empty(), Config, "bench.variants must not be empty");
        ensure!(!self.bench.weight_modes.is_empty(), Config, "bench.weight_modes must not be empty");
        ensure!(!self.bench.relu_modes.is_empty(), Config, "bench.relu_modes must not be empty");
        Ok(())
    }

    /// 1D x-t kernel (the central slice when a 2D kernel is configured).
    pub fn kernel_1d(&self) -> Result<PsfKernel> {
        Ok(crate::thermal::psf_slice_1d(&self.psf.build(&self.material)?))
    }

    pub fn spatial_filter(&self) -> Result<Filter> {
        self.kernel_1d()?.spatial_filter(self.psf.collapse)
    }

    /// Network initialized from the kernel for rows of `n_x` pixels.
    pub fn initial_network(&self, filter: &Filter, n_x: usize) -> Result<UnfoldedNetwork> {
        let step = match self.network.step {
            Some(s) => s,
            None => default_step_size(filter, n_x)?,
        };
        let a = self.train.initial_alpha;
        UnfoldedNetwork::psf_initialized(self.network.architecture(), filter, step, n_x, a, a)
    }

    /// Rows scored for quality: the configured ROI, or every row.
    pub fn roi_rows(&self, n_y: usize, dy: f64) -> Result<std::ops::Range<usize>> {
        match &self.reconstruct.roi {
            Some(roi) => roi.rows(n_y, dy),
            None => Ok(0..n_y),
        }
    }

    pub fn test_data(&self) -> Result<(DefectScene, MeasurementStack)> {
        let (scene, syn) = self.scene.synthesize(&self.kernel_1d()?, self.psf.collapse, self.seed)?;
        Ok((scene, syn.stack))
    }
}
