//! Desk-scale studies: the variant grid, the layer-count study, per-row
//! timing and the binning study, plus the two-phase training they share.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::conv::Filter;
use crate::error::{ensure, Error, Result};
use crate::io;
use crate::pipeline::{binning_study, pearson_quality, reconstruct_image, BinningRow, NetworkReconstructor, QualityScore};
use crate::synth::{generate_training_set, make_scene, DefectScene, MeasurementStack, TrainingSet};
use crate::train::{loss_partial, samples_from, train_samples, Sample, StageReport, TrainReport};
use crate::unfold::{default_step_size, infer_with, Architecture, UnfoldedNetwork, Variant, WeightMode};

/// Kernel, training samples and test scene shared by every run of one config.
pub struct Experiment {
    pub config: Config,
    pub hash: String,
    pub filter: Filter,
    pub samples: Vec<Sample>,
    /// Row length of the training samples.
    pub n_x: usize,
    pub scene: DefectScene,
    pub stack: MeasurementStack,
    pub roi: Range<usize>,
}

impl Experiment {
    pub fn prepare(config: &Config) -> Result<Self> {
        Self::prepare_with(config, None)
    }

    /// Uses `set` instead of generating the configured training set.
    pub fn prepare_with(config: &Config, set: Option<TrainingSet>) -> Result<Self> {
        config.validate()?;
        let kernel = config.kernel_1d()?;
        let filter = kernel.spatial_filter(config.psf.collapse)?;
        let set = match set {
            Some(s) => s,
            None => generate_training_set(&config.training_set, &kernel, config.psf.collapse, config.seed)?,
        };
        ensure!(!set.pairs.is_empty(), InvalidParameter, "training set is empty");
        let n_x = set.pairs[0].flux.ncols();
        let samples = samples_from(&set)?;
        let (scene, syn) = config.scene.synthesize(&kernel, config.psf.collapse, config.seed)?;
        let roi = config.roi_rows(scene.n_y(), scene.dy())?;
        Ok(Self { config: config.clone(), hash: config.hash(), filter, samples, n_x, scene, stack: syn.stack, roi })
    }

    /// Kernel-initialized network with the configured thresholds and step.
    pub fn initial_network(&self, arch: Architecture) -> Result<UnfoldedNetwork> {
        let step = match self.config.network.step {
            Some(s) => s,
            None => default_step_size(&self.filter, self.n_x)?,
        };
        let a = self.config.train.initial_alpha;
        UnfoldedNetwork::psf_initialized(arch, &self.filter, step, self.n_x, a, a)
    }

    pub fn reconstruct(&self, net: &UnfoldedNetwork) -> Result<Array2<f64>> {
        reconstruct_image(&NetworkReconstructor::new(net, self.stack.n_x()), &self.stack)
    }

    pub fn score(&self, image: &Array2<f64>) -> Result<QualityScore> {
        pearson_quality(image.view(), &self.scene, self.roi.clone())
    }
}

/// Resumable position inside [`train_architecture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Phase in progress. Untied networks start with a tied phase.
    pub phase: WeightMode,
    /// First layer stage of `phase` still to run.
    pub next_layer: usize,
    /// Completed stages of all phases.
    pub stages: Vec<StageReport>,
    pub reverted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub checkpoint: Checkpoint,
    /// Network the current phase started from.
    pub phase_start: UnfoldedNetwork,
    pub current: UnfoldedNetwork,
}

const CKPT_JSON: &str = "checkpoint.json";
const CKPT_START: &str = "checkpoint_start.psrn";
const CKPT_CURRENT: &str = "checkpoint_current.psrn";

impl Progress {
    /// Writes the two networks, then the JSON that makes them valid.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = |name: &str| dir.join(format!("{name}.tmp"));
        self.phase_start.save(&tmp(CKPT_START))?;
        self.current.save(&tmp(CKPT_CURRENT))?;
        let json = serde_json::to_string(&self.checkpoint).expect("checkpoint serializes");
        io::write_text(&tmp(CKPT_JSON), &json)?;
        for name in [CKPT_START, CKPT_CURRENT, CKPT_JSON] {
            std::fs::rename(tmp(name), dir.join(name)).map_err(|e| Error::io(dir.join(name), e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CKPT_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(Self {
            checkpoint,
            phase_start: UnfoldedNetwork::load(&dir.join(CKPT_START))?,
            current: UnfoldedNetwork::load(&dir.join(CKPT_CURRENT))?,
        })
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(CKPT_JSON).is_file()
    }

    pub fn remove(dir: &Path) -> Result<()> {
        for name in [CKPT_JSON, CKPT_START, CKPT_CURRENT] {
            let p = dir.join(name);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }
}

/// Greedy training of `arch` from the kernel initialization. Untied
/// networks first train tied filters and then untie them. `on_checkpoint`
/// sees every completed layer stage and every phase change.
pub fn train_architecture(
    exp: &Experiment,
    arch: Architecture,
    resume: Option<Progress>,
    mut on_checkpoint: impl FnMut(&Progress) -> Result<()>,
) -> Result<(UnfoldedNetwork, TrainReport)> {
    let start = Instant::now();
    let cfg = &exp.config.train;
    let init = exp.initial_network(Architecture { weight_mode: WeightMode::Tied, ..arch })?;
    let initial_loss = loss_partial(&init, &exp.samples, arch.layers)?;
    let mut p = match resume {
        Some(p) => {
            let c = &p.current;
            ensure!(
                c.variant() == arch.variant && c.layers() == arch.layers && c.relu_after_gradient() == arch.relu_after_gradient,
                Config,
                "checkpoint holds a {} network with {} layers, expected {} with {}",
                c.variant(),
                c.layers(),
                arch.variant,
                arch.layers
            );
            ensure!(
                p.checkpoint.phase == WeightMode::Tied || arch.weight_mode == WeightMode::Untied,
                Config,
                "checkpoint is in the untied phase but a tied network was requested"
            );
            p
        }
        None => Progress {
            checkpoint: Checkpoint { phase: WeightMode::Tied, next_layer: 1, stages: Vec::new(), reverted: false },
            phase_start: init.clone(),
            current: init,
        },
    };
    loop {
        let Checkpoint { phase, next_layer, stages: done, reverted } = p.checkpoint;
        let phase_start = p.phase_start;
        let (net, rep) = train_samples(&phase_start, p.current, &exp.samples, cfg, next_layer, |layer, net, stages| {
            let mut all = done.clone();
            all.extend_from_slice(stages);
            on_checkpoint(&Progress {
                checkpoint: Checkpoint { phase, next_layer: layer + 1, stages: all, reverted },
                phase_start: phase_start.clone(),
                current: net.clone(),
            })
        })?;
        let mut stages = done;
        stages.extend(rep.stages);
        let reverted = reverted || rep.reverted;
        if phase == arch.weight_mode {
            let final_loss = loss_partial(&net, &exp.samples, arch.layers)?;
            let report = TrainReport { initial_loss, final_loss, stages, reverted, wall_time_s: start.elapsed().as_secs_f64() };
            return Ok((net, report));
        }
        let untied = net.untie();
        p = Progress {
            checkpoint: Checkpoint { phase: WeightMode::Untied, next_layer: 1, stages, reverted },
            phase_start: untied.clone(),
            current: untied,
        };
        on_checkpoint(&p)?;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub weight_mode: WeightMode,
    pub relu: bool,
    pub layers: usize,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_{}{}_k{}", self.variant, self.weight_mode, if self.relu { "_relu" } else { "" }, self.layers)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { variant: self.variant, weight_mode: self.weight_mode, relu_after_gradient: self.relu, layers: self.layers }
    }
}

/// Cells of the configured grid, mode-major. The ReLU-only network has a
/// single cell per mode whatever the relu modes say.
pub fn grid_cells(config: &Config) -> Vec<Cell> {
    let b = &config.bench;
    let layers = config.network.layers;
    let mut cells: Vec<Cell> = Vec::new();
    for &weight_mode in &b.weight_modes {
        for &relu in &b.relu_modes {
            for &variant in &b.variants {
                let relu = relu || variant == Variant::ReluOnly;
                let cell = Cell { variant, weight_mode, relu, layers };
                if !cells.contains(&cell) {
                    cells.push(cell);
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: Cell,
    pub pearson_r: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub train_s: f64,
    /// `ok`, or the error that failed the cell.
    pub status: String,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub row: GridRow,
    pub network: Option<UnfoldedNetwork>,
    pub image: Option<Array2<f64>>,
}

fn evaluate_cell(exp: &Experiment, cell: Cell, trained: Result<(UnfoldedNetwork, TrainReport)>, train_s: f64) -> CellResult {
    let scored = trained.and_then(|(net, rep)| {
        let image = exp.reconstruct(&net)?;
        let r = exp.score(&image)?.pearson_r;
        Ok((net, rep, image, r))
    });
    let mut row = GridRow {
        cell,
        pearson_r: None,
        initial_loss: None,
        final_loss: None,
        train_s,
        status: "ok".into(),
        config_hash: exp.hash.clone(),
    };
    match scored {
        Ok((net, rep, image, r)) => {
            row.pearson_r = Some(r);
            row.initial_loss = Some(rep.initial_loss);
            row.final_loss = Some(rep.final_loss);
            CellResult { row, network: Some(net), image: Some(image) }
        }
        Err(e) => {
            log::warn!("cell {} failed: {e}", cell.name());
            row.status = format!("failed: {e}");
            CellResult { row, network: None, image: None }
        }
    }
}

/// Trains and scores every cell on the experiment's training set and test
/// scene. Cells sharing variant and relu flag share the tied phase. A failed
/// cell is reported in its row.
pub fn run_variant_grid(exp: &Experiment, cells: &[Cell]) -> Vec<CellResult> {
    let mut groups: Vec<(Cell, Vec<usize>)> = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let key = Cell { weight_mode: WeightMode::Tied, ..*c };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    let done: Vec<Vec<(usize, CellResult)>> = groups
        .par_iter()
        .map(|(key, idx)| {
            log::info!("training {}", key.name());
            let start = Instant::now();
            let tied = train_architecture(exp, key.architecture(), None, |_| Ok(()));
            let tied_s = start.elapsed().as_secs_f64();
            let mut out = Vec::new();
            for &i in idx {
                let cell = cells[i];
                let result = match (cell.weight_mode, &tied) {
                    (WeightMode::Tied, Ok(t)) => evaluate_cell(exp, cell, Ok(t.clone()), tied_s),
                    (WeightMode::Untied, Ok((net, rep))) => {
                        let start = Instant::now();
                        let untied = net.untie();
                        let resume = Progress {
                            checkpoint: Checkpoint {
                                phase: WeightMode::Untied,
                                next_layer: 1,
                                stages: rep.stages.clone(),
                                reverted: rep.reverted,
                            },
                            phase_start: untied.clone(),
                            current: untied,
                        };
                        let trained = train_architecture(exp, cell.architecture(), Some(resume), |_| Ok(()));
                        evaluate_cell(exp, cell, trained, tied_s + start.elapsed().as_secs_f64())
                    }
                    (_, Err(e)) => evaluate_cell(exp, cell, Err(Error::Numerical(format!("tied phase: {e}"))), tied_s),
                };
                out.push((i, result));
            }
            out
        })
        .collect();
    let mut flat: Vec<(usize, CellResult)> = done.into_iter().flatten().collect();
    flat.sort_by_key(|(i, _)| *i);
    flat.into_iter().map(|(_, r)| r).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("variant,weight_mode,relu,layers,pearson_r,initial_loss,final_loss,status,config_hash,train_s\n");
    for r in rows {
        let c = r.cell;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            c.variant,
            c.weight_mode,
            c.relu,
            c.layers,
            opt(r.pearson_r),
            opt(r.initial_loss),
            opt(r.final_loss),
            csv_field(&r.status),
            r.config_hash,
            r.train_s
        );
    }
    s
}

/// Median wall time in milliseconds of inferring one row, cycling through
/// the stack's rows. The inference plan is built once beforehand.
pub fn time_row_inference(net: &UnfoldedNetwork, stack: &MeasurementStack, repeats: usize) -> Result<f64> {
    ensure!(repeats >= 1, InvalidParameter, "need at least one timing repetition");
    let plan = net.plan(stack.n_x());
    let mut times = Vec::with_capacity(repeats);
    for i in 0..repeats {
        let row = stack.row(i % stack.n_y());
        let start = Instant::now();
        let out = infer_with(net, &plan, row)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layers: usize,
    pub pearson_r: f64,
    pub final_loss: f64,
    pub train_s: f64,
    pub infer_ms: f64,
    pub config_hash: String,
}

/// Trains the configured architecture once per layer count and scores it.
/// Repeated counts reuse the first result.
pub fn run_layer_study(exp: &Experiment, layer_list: &[usize]) -> Result<Vec<LayerRow>> {
    ensure!(!layer_list.is_empty(), InvalidParameter, "layer list is empty");
    let base = exp.config.network.architecture();
    let mut seen: HashMap<usize, LayerRow> = HashMap::new();
    let mut rows = Vec::with_capacity(layer_list.len());
    for &k in layer_list {
        ensure!(k >= 1, InvalidParameter, "layer counts must be >= 1");
        if let Some(r) = seen.get(&k) {
            rows.push(r.clone());
            continue;
        }
        log::info!("layer study: K = {k}");
        let start = Instant::now();
        let (net, rep) = train_architecture(exp, Architecture { layers: k, ..base }, None, |_| Ok(()))?;
        let train_s = start.elapsed().as_secs_f64();
        let r = exp.score(&exp.reconstruct(&net)?)?.pearson_r;
        let infer_ms = time_row_inference(&net, &exp.stack, exp.config.bench.timing_repeats)?;
        let row = LayerRow { layers: k, pearson_r: r, final_loss: rep.final_loss, train_s, infer_ms, config_hash: exp.hash.clone() };
        seen.insert(k, row.clone());
        rows.push(row);
    }
    Ok(rows)
}

pub fn layer_csv(rows: &[LayerRow]) -> String {
    let mut s = String::from("layers,pearson_r,final_loss,config_hash,train_s,infer_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.3},{:.4}", r.layers, r.pearson_r, r.final_loss, r.config_hash, r.train_s, r.infer_ms);
    }
    s
}

/// Binning study on the test scene repeated over `bench.binning_rows`
/// identical y-rows.
pub fn run_binning(exp: &Experiment, net: &UnfoldedNetwork) -> Result<Vec<BinningRow>> {
    let b = &exp.config.bench;
    ensure!(exp.stack.n_y() == 1, InvalidParameter, "the binning study extrudes a single-row scene");
    let scene = make_scene(exp.scene.slits(), exp.scene.n_x(), b.binning_rows, exp.scene.dx(), exp.scene.dy())?;
    let stack = exp.stack.extrude_y(b.binning_rows)?;
    let roi = exp.config.roi_rows(b.binning_rows, scene.dy())?;
    let rec = NetworkReconstructor::new(net, stack.n_x());
    binning_study(&rec, &stack, &scene, roi, &b.binning_factors, b.timing_repeats)
}

pub fn binning_table(rows: &[BinningRow], hash: &str) -> String {
    let mut s = String::from("factor,pearson_r,config_hash,wall_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{hash},{:.3}", r.factor, r.pearson_r, r.wall_ms);
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestCell {
    name: String,
    cell: Cell,
    status: String,
    image: Option<String>,
    profile: Option<String>,
    network: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BenchManifest {
    format: String,
    config_hash: String,
    seed: u64,
    config: String,
    tables: Vec<String>,
    cells: Vec<ManifestCell>,
}

/// Everything [`run_bench`] produced.
#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub grid: Vec<GridRow>,
    pub layers: Vec<LayerRow>,
    pub binning: Vec<BinningRow>,
}

/// Runs all studies and writes tables, images, networks and `manifest.json`
/// into `out`, which must exist.
pub fn run_bench(exp: &Experiment, out: &Path) -> Result<BenchOutput> {
    let cells = grid_cells(&exp.config);
    let results = run_variant_grid(exp, &cells);
    for sub in ["images", "networks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    io::write_text(&out.join("config.toml"), &exp.config.to_toml())?;
    let mut manifest_cells = Vec::new();
    for r in &results {
        let name = r.row.cell.name();
        let mut entry = ManifestCell { name: name.clone(), cell: r.row.cell, status: r.row.status.clone(), image: None, profile: None, network: None };
        if let (Some(net), Some(img)) = (&r.network, &r.image) {
            let (pgm, csv, psrn) = (format!("images/{name}.pgm"), format!("images/{name}.csv"), format!("networks/{name}.psrn"));
            io::write_pgm16(&out.join(&pgm), img.view())?;
            io::write_csv_matrix(&out.join(&csv), img.view())?;
            net.save(&out.join(&psrn))?;
            entry.image = Some(pgm);
            entry.profile = Some(csv);
            entry.network = Some(psrn);
        }
        manifest_cells.push(entry);
    }
    let grid: Vec<GridRow> = results.iter().map(|r| r.row.clone()).collect();
    io::write_text(&out.join("variant_grid.csv"), &grid_csv(&grid))?;

    let layers = run_layer_study(exp, &exp.config.bench.layer_list)?;
    io::write_text(&out.join("layer_study.csv"), &layer_csv(&layers))?;

    let wanted = Cell {
        variant: exp.config.network.variant,
        weight_mode: exp.config.network.weight_mode,
        relu: exp.config.network.relu_after_gradient || exp.config.network.variant == Variant::ReluOnly,
        layers: exp.config.network.layers,
    };
    let net = match results.iter().find(|r| r.row.cell == wanted).and_then(|r| r.network.clone()) {
        Some(n) => n,
        None => train_architecture(exp, exp.config.network.architecture(), None, |_| Ok(()))?.0,
    };
    let binning = run_binning(exp, &net)?;
    io::write_text(&out.join("binning.csv"), &binning_table(&binning, &exp.hash))?;

    let manifest = BenchManifest {
        format: "psrnet-bench-v1".into(),
        config_hash: exp.hash.clone(),
        seed: exp.config.seed,
        config: "config.toml".into(),
        tables: vec!["variant_grid.csv".into(), "layer_study.csv".into(), "binning.csv".into()],
        cells: manifest_cells,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    io::write_text(&out.join("manifest.json"), &(text + "\n"))?;
    Ok(BenchOutput { grid, layers, binning })
}
