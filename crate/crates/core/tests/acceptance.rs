//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails:
//!
//! ```text
//! cargo test --release -p psrnet --test acceptance -- --nocapture
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Zip};
use psrnet::bench::{grid_cells, run_variant_grid, time_row_inference, CellResult, Experiment};
use psrnet::classical::{solve, SolverConfig, SolverVariant};
use psrnet::commands::{self, Method, TrainOptions};
use psrnet::config::Config;
use psrnet::conv::{Convolver, Engine, Filter};
use psrnet::pipeline::{binning_study, local_maxima, NetworkReconstructor};
use psrnet::synth::{make_scene, forward_rows};
use psrnet::thermal::{build_psf, convolve_pulse, Grid, MaterialParams, PulseProfile};
use psrnet::train::{loss_and_grad, loss_partial, stage_mask, Sample};
use psrnet::unfold::{
    block_soft_threshold, default_step_size, infer_trajectory, next_momentum, Architecture, UnfoldedNetwork, Variant, WeightMode,
    T_FIRST,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0_f64, |m, x, y| m.max((x - y).abs()))
}

fn gaussian(width: usize, sigma: f64) -> Filter {
    let c = (width / 2) as f64;
    Filter::new((0..width).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()).unwrap()
}

fn desk_config() -> Config {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    Config::load(&path).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 32;
    let psf = gaussian(9, 1.8);
    let t = Array2::from_shape_fn((4, n), |_| rng.random_range(0.0..1.0));
    let step = default_step_size(&psf, n).unwrap();
    let mut worst = 0.0_f64;
    for variant in [SolverVariant::Ista, SolverVariant::Fista, SolverVariant::Enet, SolverVariant::Fenet] {
        let l2 = if variant.uses_lambda2() { 0.2 } else { 0.0 };
        let cfg = SolverConfig::new(variant, 0.3, l2, 6);
        let classical = solve(&cfg, &psf, t.view()).unwrap();
        let (a1, a2) = cfg.thresholds(step);
        let arch = Architecture { variant: variant.unfolded(), weight_mode: WeightMode::Tied, relu_after_gradient: false, layers: 6 };
        let net = UnfoldedNetwork::psf_initialized(arch, &psf, step, n, a1, a2).unwrap();
        let unfolded = infer_trajectory(&net, &net.plan(n), t.view(), 6).unwrap();
        if unfolded.len() != classical.trajectory.len() {
            return outcome(false, format!("{variant}: {} vs {} iterates", unfolded.len(), classical.trajectory.len()));
        }
        for (a, b) in unfolded.iter().zip(&classical.trajectory) {
            worst = worst.max(max_abs_diff(a, b));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-10 && secs < 1.0, format!("max iterate difference {worst:.2e} over 4 pairs, {secs:.3} s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();

    let u = Array2::from_shape_fn((5, 11), |_| rng.random_range(-3.0..3.0));
    if block_soft_threshold(u.view(), 0.0, 0.0).unwrap() != u {
        failures.push("identity at zero thresholds".to_string());
    }

    for _ in 0..200 {
        let u = Array2::from_shape_fn((3, 9), |_| rng.random_range(-1.0..1.0));
        let a1 = rng.random_range(0.0..1.5);
        let a2 = rng.random_range(0.0..1.0);
        let out = block_soft_threshold(u.view(), a1, a2).unwrap();
        for j in 0..u.ncols() {
            let norm = u.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            let zeroed = out.column(j).iter().all(|v| *v == 0.0);
            if zeroed != (norm <= a1) {
                failures.push(format!("column {j}: norm {norm} alpha1 {a1} zeroed={zeroed}"));
            }
        }
    }

    let mut worst_ratio = 0.0_f64;
    for _ in 0..10_000 {
        let (m, n) = (rng.random_range(1..5), rng.random_range(1..8));
        let u = Array2::from_shape_fn((m, n), |_| rng.random_range(-2.0..2.0));
        let v = Array2::from_shape_fn((m, n), |_| rng.random_range(-2.0..2.0));
        let a1 = rng.random_range(0.0..2.0);
        let du = block_soft_threshold(u.view(), a1, 0.0).unwrap() - block_soft_threshold(v.view(), a1, 0.0).unwrap();
        let lhs = du.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rhs = (&u - &v).iter().map(|x| x * x).sum::<f64>().sqrt();
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        }
    }
    if worst_ratio > 1.0 + 1e-12 {
        failures.push(format!("expansion ratio {worst_ratio}"));
    }

    let mut worst_scalar = 0.0_f64;
    let values: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.125).collect();
    let alphas: Vec<f64> = (0..=16).map(|i| i as f64 * 0.25).collect();
    for &x in &values {
        for &a1 in &alphas {
            for &a2 in &alphas {
                let got = block_soft_threshold(ndarray::arr2(&[[x]]).view(), a1, a2).unwrap()[[0, 0]];
                let want = x.signum() * (x.abs() - a1).max(0.0) / (1.0 + a2);
                let want = if x.abs() <= a1 { 0.0 } else { want };
                worst_scalar = worst_scalar.max((got - want).abs());
            }
        }
    }
    if worst_scalar > 1e-14 {
        failures.push(format!("scalar grid error {worst_scalar:e}"));
    }
    let detail = format!(
        "nonexpansive ratio {worst_ratio:.6} over 1e4 pairs, scalar grid error {worst_scalar:.1e}{}",
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    outcome(failures.is_empty(), detail)
}

fn fd_relative_error(variant: Variant, mode: WeightMode, relu: bool, rng: &mut ChaCha8Rng) -> f64 {
    let n = 16;
    let psf = gaussian(5, 1.2);
    let samples: Vec<Sample> = (0..2)
        .map(|_| {
            let u = Array2::from_shape_fn((3, n), |_| if rng.random::<f64>() < 0.3 { rng.random_range(0.2..1.0) } else { 0.0 });
            let t = forward_rows(&psf, u.view()) + Array2::from_shape_fn((3, n), |_| 0.01 * rng.random_range(-1.0..1.0));
            Sample::new(t.view(), u.view()).unwrap()
        })
        .collect();
    let arch = Architecture { variant, weight_mode: mode, relu_after_gradient: relu, layers: 2 };
    let mut net = UnfoldedNetwork::psf_initialized(arch, &psf, 0.08, n, 0.05, 0.05).unwrap();
    let mut p = net.params();
    let layout = net.layout();
    for set in 0..layout.sets {
        for i in layout.b_range(set).chain(layout.s_range(set)) {
            p[i] += 0.02 * rng.random_range(-1.0..1.0);
        }
    }
    net.set_params(&p).unwrap();
    let (_, grad) = loss_and_grad(&net, &samples, 2).unwrap();
    let mask = stage_mask(&net, 2, false);
    let h = 1e-6;
    let mut work = net.clone();
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..p.len()).filter(|i| mask[*i]) {
        let mut q = p.clone();
        q[i] += h;
        work.set_params(&q).unwrap();
        let lp = loss_partial(&work, &samples, 2).unwrap();
        q[i] -= 2.0 * h;
        work.set_params(&q).unwrap();
        let lm = loss_partial(&work, &samples, 2).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        num += (fd - grad[i]).powi(2);
        den += grad[i].powi(2);
    }
    (num / den).sqrt()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (0.0_f64, String::new());
    let mut count = 0;
    for variant in Variant::ALL {
        for mode in [WeightMode::Tied, WeightMode::Untied] {
            for relu in [false, true] {
                let err = fd_relative_error(variant, mode, relu, &mut rng);
                count += 1;
                if err > worst.0 || err.is_nan() {
                    worst = (err, format!("{variant} {mode} relu={relu}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 <= 1e-5 && secs < 30.0,
        format!("{count} configurations, worst relative error {:.2e} ({}), {secs:.1} s", worst.0, worst.1),
    )
}

fn naive_same(h: &[f64], x: &[f64]) -> Vec<f64> {
    let c = (h.len() / 2) as isize;
    (0..x.len() as isize)
        .map(|i| {
            let mut acc = 0.0;
            for (k, hk) in h.iter().enumerate() {
                let j = i - (k as isize - c);
                if j >= 0 && (j as usize) < x.len() {
                    acc += hk * x[j as usize];
                }
            }
            acc
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut failures = Vec::new();
    let material = MaterialParams::default();
    let grid = Grid::new(15, 13, 12, 0.25e-3, 0.25e-3, 2e-3).unwrap();
    let psf = build_psf(&grid, &material).unwrap();
    if psf.values().iter().any(|v| *v < 0.0) {
        failures.push("negative kernel value".to_string());
    }
    let mut sym = 0.0_f64;
    for k in 0..grid.n_t {
        for j in 0..grid.n_y {
            for i in 0..grid.n_x {
                let v = psf.get(i, j, k);
                let scale = v.abs().max(f64::MIN_POSITIVE);
                sym = sym.max((v - psf.get(grid.n_x - 1 - i, j, k)).abs() / scale);
                sym = sym.max((v - psf.get(i, grid.n_y - 1 - j, k)).abs() / scale);
            }
        }
    }
    if sym > 1e-12 {
        failures.push(format!("asymmetry {sym:e}"));
    }
    let mut prev: Option<Vec<f64>> = None;
    for p in 1..=6 {
        let m = MaterialParams { reflection_count: p, reflectance: 0.8, ..material };
        let vals = build_psf(&grid, &m).unwrap().values().to_vec();
        if let Some(prev) = &prev {
            if vals.iter().zip(prev).any(|(a, b)| a < b) {
                failures.push(format!("value decreased from p_max = {} to {p}", p - 1));
            }
        }
        prev = Some(vals);
    }

    // pulse convolution against the direct time sum
    let line = Grid::line(9, 30, 0.25e-3, 2e-3).unwrap();
    let raw = build_psf(&line, &material).unwrap();
    let pulse = PulseProfile::new(10e-3, 1.5).unwrap();
    let conv = convolve_pulse(&raw, &pulse).unwrap();
    let frames = pulse.frames(line.dt).unwrap();
    let mut worst_pulse = 0.0_f64;
    for i in 0..line.n_x {
        let series = raw.time_series(i, 0);
        for k in 0..line.n_t {
            let want: f64 = (0..=k.min(frames - 1)).map(|j| series[k - j] * 1.5).sum::<f64>() * line.dt;
            let got = conv.get(i, 0, k);
            worst_pulse = worst_pulse.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
        }
    }
    if worst_pulse > 1e-10 {
        failures.push(format!("pulse convolution error {worst_pulse:e}"));
    }

    // spatial convolution (direct and FFT) against the direct sum
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_conv = 0.0_f64;
    for n in [1usize, 7, 16, 33, 64] {
        let g = Grid::line(2 * n.min(31) + 1, 10, 0.25e-3, 2e-3).unwrap();
        let filter = convolve_pulse(&build_psf(&g, &material).unwrap(), &pulse).unwrap().spatial_filter(Default::default()).unwrap();
        let taps: Vec<f64> = filter.taps().iter().map(|v| v / filter.taps().iter().cloned().fold(0.0, f64::max)).collect();
        let filter = Filter::new(taps).unwrap();
        let x = Array2::from_shape_fn((3, n), |_| rng.random_range(-1.0..1.0));
        for engine in [Engine::Direct, Engine::Fft] {
            let got = Convolver::new(&filter, n, engine).apply_owned(x.view());
            for (r, row) in x.rows().into_iter().enumerate() {
                let want = naive_same(filter.taps(), row.as_slice().unwrap());
                for (a, b) in got.row(r).iter().zip(&want) {
                    worst_conv = worst_conv.max((a - b).abs());
                }
            }
        }
    }
    if worst_conv > 1e-10 {
        failures.push(format!("spatial convolution error {worst_conv:e}"));
    }
    let detail = format!(
        "symmetry {sym:.1e}, pulse sum {worst_pulse:.1e}, spatial sum {worst_conv:.1e}{}",
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    outcome(failures.is_empty(), detail)
}

struct DeskGrid {
    exp: Experiment,
    results: Vec<CellResult>,
    secs: f64,
}

fn desk_grid() -> DeskGrid {
    let cfg = desk_config();
    let start = Instant::now();
    let exp = Experiment::prepare(&cfg).unwrap();
    let results = run_variant_grid(&exp, &grid_cells(&cfg));
    DeskGrid { exp, results, secs: start.elapsed().as_secs_f64() }
}

fn criterion_5(grid: &DeskGrid) -> Outcome {
    let failed: Vec<String> = grid.results.iter().filter(|r| r.row.pearson_r.is_none()).map(|r| r.row.cell.name()).collect();
    if !failed.is_empty() {
        return outcome(false, format!("failed cells: {}", failed.join(", ")));
    }
    let mean = |mode: WeightMode| {
        let v: Vec<f64> = grid.results.iter().filter(|r| r.row.cell.weight_mode == mode).map(|r| r.row.pearson_r.unwrap()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (tied, untied) = (mean(WeightMode::Tied), mean(WeightMode::Untied));
    // a variant scores its best cell over weight mode and relu flag
    let best = |variant: Variant| {
        grid.results.iter().filter(|r| r.row.cell.variant == variant).map(|r| r.row.pearson_r.unwrap()).fold(f64::NEG_INFINITY, f64::max)
    };
    let no_reg = best(Variant::ReluOnly);
    let regs: Vec<(Variant, f64)> = Variant::ALL.iter().filter(|v| v.is_regularized()).map(|&v| (v, best(v))).collect();
    let reg_ok = regs.iter().all(|(_, r)| *r >= no_reg - 0.02);
    let cpu_min = grid.secs * rayon::current_num_threads() as f64 / 60.0;
    let list: Vec<String> = regs.iter().map(|(v, r)| format!("{v} {r:.3}")).collect();
    outcome(
        untied >= tied - 0.02 && reg_ok && cpu_min < 30.0,
        format!(
            "mean untied {untied:.3} vs tied {tied:.3}; best per variant {} vs no-reg {no_reg:.3}; {:.1} CPU-min",
            list.join(", "),
            cpu_min
        ),
    )
}

fn criterion_6(grid: &DeskGrid) -> Outcome {
    let exp = &grid.exp;
    let want = exp.config.network;
    let Some(cell) = grid
        .results
        .iter()
        .find(|r| r.row.cell.variant == want.variant && r.row.cell.weight_mode == want.weight_mode && r.row.cell.relu == want.relu_after_gradient)
    else {
        return outcome(false, "configured network is not part of the grid");
    };
    let (Some(image), Some(r)) = (&cell.image, cell.row.pearson_r) else {
        return outcome(false, format!("{} failed", cell.row.cell.name()));
    };
    let raw = exp.stack.aggregate();
    let raw = raw.row(0).to_vec();
    let rec = image.row(0).to_vec();
    let (raw_max, rec_max) = (local_maxima(&raw), local_maxima(&rec));
    let slits = exp.scene.slits();
    let mut resolved = Vec::new();
    let mut unresolved_raw = 0;
    for pair in slits.chunks(2).filter(|p| p.len() == 2) {
        let (a, b) = (pair[0].center, pair[1].center);
        let gap = b - a;
        let window = a.saturating_sub(gap)..=b + gap;
        if raw_max.iter().filter(|m| window.contains(m)).count() != 1 {
            continue;
        }
        unresolved_raw += 1;
        let near = |c: usize| rec_max.iter().filter(|m| m.abs_diff(c) <= 1).count();
        let inside: Vec<usize> = rec_max.iter().copied().filter(|m| window.contains(m)).collect();
        if near(a) == 1 && near(b) == 1 && inside.len() >= 2 {
            resolved.push(format!("{a}/{b} -> {inside:?}"));
        }
    }
    outcome(
        !resolved.is_empty() && r >= 0.7,
        format!(
            "{}: r = {r:.3}; {unresolved_raw} pair(s) with one raw maximum, resolved: [{}]",
            cell.row.cell.name(),
            resolved.join(", ")
        ),
    )
}

fn criterion_7(grid: &DeskGrid) -> Outcome {
    let exp = &grid.exp;
    let cfg = &exp.config;
    let want = cfg.network;
    let net = grid
        .results
        .iter()
        .find(|r| r.row.cell.variant == want.variant && r.row.cell.weight_mode == want.weight_mode && r.row.cell.relu == want.relu_after_gradient)
        .and_then(|r| r.network.clone())
        .expect("configured network trained");
    let rows = 450;
    let scene = make_scene(exp.scene.slits(), exp.scene.n_x(), rows, exp.scene.dx(), exp.scene.dy()).unwrap();
    let stack = exp.stack.extrude_y(rows).unwrap();
    let factors: Vec<usize> = psrnet::pipeline::divisors(rows).into_iter().filter(|f| *f <= 30).collect();
    let rec = NetworkReconstructor::new(&net, stack.n_x());
    let table = binning_study(&rec, &stack, &scene, 0..rows, &factors, 20).unwrap();
    let r0 = table[0].pearson_r;
    let spread = table.iter().map(|b| (b.pearson_r - r0).abs()).fold(0.0, f64::max);
    let t1 = table.iter().find(|b| b.factor == 1).unwrap().wall_ms;
    let t30 = table.iter().find(|b| b.factor == 30).unwrap().wall_ms;
    outcome(
        spread <= 1e-9 && t1 / t30 >= 10.0,
        format!("{} factors, r spread {spread:.1e}, {t1:.1} ms -> {t30:.2} ms ({:.1}x)", factors.len(), t1 / t30),
    )
}

fn criterion_8() -> Outcome {
    let mut cfg = desk_config();
    commands::full_scale(&mut cfg);
    cfg.network.variant = Variant::Lbfista;
    cfg.network.weight_mode = WeightMode::Untied;
    let filter = cfg.spatial_filter().unwrap();
    let n = cfg.scene.n_x;
    let step = default_step_size(&filter, n).unwrap();
    let net = UnfoldedNetwork::psf_initialized(cfg.network.architecture(), &filter, step, n, 0.1, 0.0).unwrap();
    let (_, stack) = cfg.test_data().unwrap();
    let ms = time_row_inference(&net, &stack, 21).unwrap();
    outcome(
        ms <= 100.0,
        format!("{}x{} row, K = {}, filter width {}: median {ms:.2} ms", stack.n_meas(), n, net.layers(), filter.width()),
    )
}

fn criterion_9() -> Outcome {
    let mut worst = ((1.0 + 5.0_f64.sqrt()) / 2.0 - T_FIRST).abs();
    let mut t = T_FIRST;
    let mut expected = (1.0 + 5.0_f64.sqrt()) / 2.0;
    for _ in 2..=100 {
        t = next_momentum(t);
        expected = 0.5 * (1.0 + (1.0 + 4.0 * expected * expected).sqrt());
        worst = worst.max((t - expected).abs() / expected);
    }
    outcome(worst <= 1e-12, format!("t_1..t_100, max relative deviation {worst:.1e}, t_100 = {t:.6}"))
}

fn tiny_config() -> Config {
    let mut c = Config::default();
    c.psf.n_x = 9;
    c.training_set.n_x = 32;
    c.training_set.n_meas = 4;
    c.training_set.batches = 2;
    c.scene.n_x = 32;
    c.scene.n_meas = 4;
    c.scene.gaps = vec![1.25e-3];
    c.scene.first_pair_center = 4e-3;
    c.train.max_adam_iters = 4;
    c.train.learning_rate = 1e-2;
    c.network.layers = 2;
    c.bench.variants = vec![Variant::Lbfista, Variant::ReluOnly];
    c.bench.relu_modes = vec![false];
    c.bench.layer_list = vec![1, 2];
    c.bench.binning_rows = 6;
    c.bench.binning_factors = vec![1, 2, 3, 6];
    c.bench.timing_repeats = 3;
    c
}

const TIMING_COLUMNS: [&str; 4] = ["train_s", "infer_ms", "wall_ms", "wall_time_s"];

/// File contents with timing columns blanked in CSV tables.
fn comparable(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    if path.extension().is_none_or(|e| e != "csv") {
        return bytes;
    }
    let text = String::from_utf8(bytes).unwrap();
    let mut lines = text.lines();
    let Some(header) = lines.next() else { return Vec::new() };
    let drop: Vec<usize> = header.split(',').enumerate().filter(|(_, h)| TIMING_COLUMNS.contains(h)).map(|(i, _)| i).collect();
    let mut out = String::from(header);
    out.push('\n');
    for line in lines {
        let cells: Vec<&str> = line.split(',').enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, c)| c).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let cfg = tiny_config();
    let root = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> PathBuf {
        let base = root.path().join(tag);
        std::fs::create_dir(&base).unwrap();
        commands::cmd_psf(&cfg, &base.join("kernel.psf"), None).unwrap();
        commands::cmd_synth(&cfg, &base.join("synth")).unwrap();
        commands::cmd_train(&cfg, &base.join("train"), &TrainOptions::default()).unwrap();
        let method = Method::Network(base.join("train/network.psrn"));
        commands::cmd_reconstruct(&cfg, &method, None, 1, &base.join("reconstruct")).unwrap();
        commands::cmd_reconstruct(&cfg, &method, Some(&base.join("synth/scene.ten")), 1, &base.join("reconstruct_file")).unwrap();
        commands::cmd_bench(&cfg, &base.join("bench")).unwrap();
        base
    };
    let (a, b) = (run("a"), run("b"));
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return outcome(false, "runs produced different file sets");
    }
    let differing: Vec<String> = fa.iter().filter(|f| comparable(&a.join(f)) != comparable(&b.join(f))).map(|f| f.display().to_string()).collect();
    outcome(differing.is_empty(), format!("{} files compared; differing: {differing:?}", fa.len()))
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
    ];
    let grid = desk_grid();
    results.push((5, criterion_5(&grid)));
    results.push((6, criterion_6(&grid)));
    results.push((7, criterion_7(&grid)));
    results.push((8, criterion_8()));
    results.push((9, criterion_9()));
    results.push((10, criterion_10()));
    for (n, o) in &results {
        println!("criterion {n:>2}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
