//! The command-line subcommands as library calls. Paths are checked before
//! any computation, and every output lands under the declared location.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bench::{run_bench, train_architecture, BenchOutput, Experiment, Progress};
use crate::classical::{SolverConfig, SolverVariant};
use crate::config::Config;
use crate::error::{ensure, Error, Result};
use crate::io;
use crate::pipeline::{bin_pixels_y, pearson_quality, pearson_quality_binned, reconstruct_image, NetworkReconstructor, SolverReconstructor};
use crate::synth::{generate_training_set, MeasurementStack, TrainingSet};
use crate::train::TrainReport;
use crate::unfold::UnfoldedNetwork;

/// The parent of `path` must exist; `path` itself may not.
pub fn check_output_parent(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => return Ok(()),
    };
    ensure!(parent.is_dir(), InvalidParameter, "output directory {} does not exist", parent.display());
    Ok(())
}

/// Creates `dir` (its parent must exist).
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    check_output_parent(dir)?;
    ensure!(!dir.is_file(), InvalidParameter, "output {} is a file, expected a directory", dir.display());
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn check_input(path: &Path) -> Result<()> {
    ensure!(path.exists(), InvalidParameter, "input {} does not exist", path.display());
    Ok(())
}

/// Writes the configured, pulse-convolved kernel as a `PSF1` file and
/// optionally as CSV.
pub fn cmd_psf(config: &Config, out: &Path, csv: Option<&Path>) -> Result<()> {
    check_output_parent(out)?;
    if let Some(c) = csv {
        check_output_parent(c)?;
    }
    config.validate()?;
    let psf = config.psf.build(&config.material)?;
    io::write_psf(out, &psf)?;
    if let Some(c) = csv {
        io::write_psf_csv(c, &psf)?;
    }
    log::info!("kernel {}x{}x{} written to {}", psf.grid().n_x, psf.grid().n_y, psf.grid().n_t, out.display());
    Ok(())
}

/// Writes the training set under `out/training` (manifest first) and the
/// test scene as `out/scene.ten` with its absorptance in
/// `out/scene_absorptance.csv`.
pub fn cmd_synth(config: &Config, out: &Path) -> Result<()> {
    prepare_output_dir(out)?;
    config.validate()?;
    let kernel = config.kernel_1d()?;
    let set = generate_training_set(&config.training_set, &kernel, config.psf.collapse, config.seed)?;
    set.save(&out.join("training"))?;
    let (scene, syn) = config.scene.synthesize(&kernel, config.psf.collapse, config.seed)?;
    syn.stack.write(&out.join("scene.ten"))?;
    io::write_csv_matrix(&out.join("scene_absorptance.csv"), scene.absorptance().view())?;
    log::info!("{} training batches and a {}-slit scene written to {}", set.pairs.len(), scene.slits().len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Training set directory written by `synth`; generated when absent.
    pub data: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Stop with [`Error::Interrupted`] after this many checkpoints.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct Quality {
    pearson_r: f64,
    roi_rows: [usize; 2],
    config_hash: String,
}

/// Trains the configured network into `out`: `network.psrn`,
/// `network.json`, `report.csv` and `quality.json` (test-scene score).
/// A checkpoint is kept in `out` until training finishes.
pub fn cmd_train(config: &Config, out: &Path, opts: &TrainOptions) -> Result<(UnfoldedNetwork, TrainReport)> {
    if let Some(d) = &opts.data {
        check_input(&d.join("manifest.json"))?;
    }
    prepare_output_dir(out)?;
    ensure!(!opts.resume || Progress::exists(out), InvalidParameter, "no checkpoint to resume in {}", out.display());
    let set = opts.data.as_deref().map(TrainingSet::load).transpose()?;
    let exp = Experiment::prepare_with(config, set)?;
    let resume = if opts.resume { Some(Progress::load(out)?) } else { None };
    let mut written = 0usize;
    let (net, report) = train_architecture(&exp, config.network.architecture(), resume, |p| {
        p.save(out)?;
        written += 1;
        log::info!("checkpoint: {} phase, next layer {}", p.checkpoint.phase, p.checkpoint.next_layer);
        match opts.stop_after {
            Some(n) if written >= n => Err(Error::Interrupted(written)),
            _ => Ok(()),
        }
    })?;
    net.save(&out.join("network.psrn"))?;
    io::write_text(&out.join("network.json"), &net.metadata_json())?;
    report.write_csv(&out.join("report.csv"))?;
    let score = exp.score(&exp.reconstruct(&net)?)?;
    let q = Quality { pearson_r: score.pearson_r, roi_rows: [score.roi.start, score.roi.end], config_hash: exp.hash.clone() };
    io::write_text(&out.join("quality.json"), &(serde_json::to_string_pretty(&q).expect("serializes") + "\n"))?;
    Progress::remove(out)?;
    log::info!(
        "trained in {:.1} s: loss {:.4e} -> {:.4e}, test r = {:.4}",
        report.wall_time_s,
        report.initial_loss,
        report.final_loss,
        score.pearson_r
    );
    Ok((net, report))
}

/// What reconstructs the rows.
#[derive(Debug, Clone)]
pub enum Method {
    Network(PathBuf),
    Solver { variant: SolverVariant, lambda1: f64, lambda2: f64, max_iters: usize },
}

/// Reconstructs `input` (or the configured test scene, which is then
/// scored) into `out/image.pgm` and `out/image.csv`. Returns the score of
/// the test scene.
pub fn cmd_reconstruct(config: &Config, method: &Method, input: Option<&Path>, bin: usize, out: &Path) -> Result<Option<f64>> {
    if let Method::Network(p) = method {
        check_input(p)?;
    }
    if let Some(p) = input {
        check_input(p)?;
    }
    prepare_output_dir(out)?;
    config.validate()?;
    let (scene, stack) = match input {
        Some(p) => (None, MeasurementStack::read(p, config.scene.dx, config.scene.dy)?),
        None => {
            let (scene, stack) = config.test_data()?;
            (Some(scene), stack)
        }
    };
    let binned = bin_pixels_y(&stack, bin)?;
    let start = std::time::Instant::now();
    let image = match method {
        Method::Network(p) => {
            let net = UnfoldedNetwork::load(p)?;
            reconstruct_image(&NetworkReconstructor::new(&net, binned.n_x()), &binned)?
        }
        Method::Solver { variant, lambda1, lambda2, max_iters } => {
            let mut cfg = SolverConfig::new(*variant, *lambda1, *lambda2, *max_iters);
            cfg.step = config.network.step;
            cfg.validate()?;
            reconstruct_image(&SolverReconstructor { config: cfg, psf: config.spatial_filter()? }, &binned)?
        }
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    io::write_pgm16(&out.join("image.pgm"), image.view())?;
    io::write_csv_matrix(&out.join("image.csv"), image.view())?;
    log::info!("{} rows reconstructed in {wall_ms:.1} ms", binned.n_y());
    let Some(scene) = scene else { return Ok(None) };
    let roi = config.roi_rows(scene.n_y(), scene.dy())?;
    let score = if bin == 1 { pearson_quality(image.view(), &scene, roi)? } else { pearson_quality_binned(image.view(), bin, &scene, roi)? };
    let q = Quality { pearson_r: score.pearson_r, roi_rows: [score.roi.start, score.roi.end], config_hash: config.hash() };
    io::write_text(&out.join("quality.json"), &(serde_json::to_string_pretty(&q).expect("serializes") + "\n"))?;
    log::info!("pearson r = {:.4}", score.pearson_r);
    Ok(Some(score.pearson_r))
}

pub fn cmd_bench(config: &Config, out: &Path) -> Result<BenchOutput> {
    prepare_output_dir(out)?;
    let exp = Experiment::prepare(config)?;
    let res = run_bench(&exp, out)?;
    for r in &res.grid {
        match r.pearson_r {
            Some(v) => log::info!("{:<28} r = {v:.4}", r.cell.name()),
            None => log::warn!("{:<28} {}", r.cell.name(), r.status),
        }
    }
    Ok(res)
}

/// Full-sized shapes: 1280-pixel rows, 120 measurements, six layers, and
/// a kernel covering the whole row.
pub fn full_scale(config: &mut Config) {
    config.scene.n_x = 1280;
    config.scene.n_meas = 120;
    config.training_set.n_x = 1280;
    config.training_set.n_meas = 120;
    config.network.layers = 6;
    config.psf.n_x = 1281;
}
