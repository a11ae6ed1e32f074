use std::path::Path;
use std::process::{Command, Output};

use psrnet::config::Config;
use psrnet::io::{read_csv_matrix, read_psf};

const TINY: &str = r#"
seed = 3

[psf]
n_x = 9

[training_set]
n_x = 32
n_meas = 4
batches = 2

[scene]
n_x = 32
n_meas = 4
gaps = [1.25e-3]
first_pair_center = 4e-3

[train]
max_adam_iters = 4
learning_rate = 1e-2

[network]
variant = "lbfista"
weight_mode = "untied"
layers = 2

[bench]
variants = ["lbista"]
weight_modes = ["tied"]
relu_modes = [false]
layer_list = [1]
binning_rows = 4
binning_factors = [1, 2]
timing_repeats = 2
"#;

fn psrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psrnet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn version_and_help() {
    let o = psrnet(&["--version"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains(env!("CARGO_PKG_VERSION")));
    assert_eq!(code(&psrnet(&["--help"])), 0);
    assert_eq!(code(&psrnet(&[])), 2);
    assert_eq!(code(&psrnet(&["frobnicate"])), 2);
}

#[test]
fn psf_writes_kernel_and_rejects_missing_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k.psf");
    let o = psrnet(&["psf", "--out", s(&out), "--csv", s(&dir.path().join("k.csv"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let psf = read_psf(&out, true).unwrap();
    assert_eq!(psf, Config::default().psf.build(&Default::default()).unwrap());
    let again = dir.path().join("k2.psf");
    assert_eq!(code(&psrnet(&["psf", "--out", s(&again)])), 0);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());

    let o = psrnet(&["psf", "--out", s(&dir.path().join("missing/k.psf"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k.psf");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nmax_adam_iter = 3\n").unwrap();
    assert_eq!(code(&psrnet(&["--config", s(&bad), "psf", "--out", s(&out)])), 2);
    std::fs::write(&bad, "[network]\nvariant = \"lbxyz\"\n").unwrap();
    assert_eq!(code(&psrnet(&["--config", s(&bad), "psf", "--out", s(&out)])), 2);
    std::fs::write(&bad, "[material]\nreflectance = 2.0\n").unwrap();
    assert_eq!(code(&psrnet(&["--config", s(&bad), "psf", "--out", s(&out)])), 2);
    assert_eq!(code(&psrnet(&["--config", s(&dir.path().join("none.toml")), "psf", "--out", s(&out)])), 2);
    let cfg = tiny(dir.path());
    let o = psrnet(&["--config", &cfg, "train", "--out", s(&dir.path().join("t")), "--variant", "lbxyz"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    for tag in ["a", "b"] {
        assert_eq!(code(&psrnet(&["--config", &cfg, "synth", "--out", s(&dir.path().join(tag))])), 0);
    }
    assert_eq!(code(&psrnet(&["--config", &cfg, "--seed", "4", "synth", "--out", s(&dir.path().join("c"))])), 0);
    let read = |tag: &str, f: &str| std::fs::read(dir.path().join(tag).join(f)).unwrap();
    for f in ["training/manifest.json", "training/batch_0000_t.ten", "training/batch_0001_u.ten", "scene.ten"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_ne!(read("a", "training/batch_0000_t.ten"), read("c", "training/batch_0000_t.ten"));
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let o = psrnet(&["--config", &cfg, "train", "--out", s(&full)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // two tied stages, the phase change, then one untied stage
    let o = psrnet(&["--config", &cfg, "train", "--out", s(&part), "--stop-after", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(part.join("checkpoint.json").exists());
    assert!(!part.join("network.psrn").exists());
    let o = psrnet(&["--config", &cfg, "train", "--out", s(&part), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["network.psrn", "network.json", "report.csv", "quality.json"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
    assert!(!part.join("checkpoint.json").exists());
    let o = psrnet(&["--config", &cfg, "train", "--out", s(&dir.path().join("fresh")), "--resume"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_on_synth_output_matches_generated_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert_eq!(code(&psrnet(&["--config", &cfg, "synth", "--out", s(&dir.path().join("data"))])), 0);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&psrnet(&["--config", &cfg, "train", "--out", s(&a), "--layers", "1"])), 0);
    let o = psrnet(&["--config", &cfg, "train", "--out", s(&b), "--layers", "1", "--data", s(&dir.path().join("data/training"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("network.psrn")).unwrap(), std::fs::read(b.join("network.psrn")).unwrap());
    let report = std::fs::read_to_string(a.join("report.csv")).unwrap();
    let losses: Vec<f64> = report.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(losses.last().unwrap() < losses.first().unwrap());
}

#[test]
fn reconstruct_binning_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("rows.toml");
    std::fs::write(&cfg_path, format!("{TINY}\n").replace("[scene]\n", "[scene]\nn_y = 6\n")).unwrap();
    let cfg = s(&cfg_path).to_string();
    let net = dir.path().join("t/network.psrn");
    assert_eq!(code(&psrnet(&["--config", &cfg, "train", "--out", s(&dir.path().join("t"))])), 0);
    let run = |tag: &str, extra: &[&str]| {
        let mut args = vec!["--config", &cfg, "reconstruct", "--net", s(&net)];
        let out = dir.path().join(tag);
        let out = out.to_str().unwrap().to_string();
        args.extend_from_slice(&["--out", &out]);
        args.extend_from_slice(extra);
        psrnet(&args)
    };
    assert_eq!(code(&run("plain", &[])), 0);
    assert_eq!(code(&run("one", &["--bin", "1"])), 0);
    for f in ["image.pgm", "image.csv", "quality.json"] {
        assert_eq!(std::fs::read(dir.path().join("plain").join(f)).unwrap(), std::fs::read(dir.path().join("one").join(f)).unwrap());
    }
    let o = run("three", &["--bin", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_csv_matrix(&dir.path().join("three/image.csv")).unwrap().dim(), (2, 32));
    let o = run("four", &["--bin", "4"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("[1, 2, 3, 6]"), "{}", stderr(&o));
    let o = run("missing", &["--input", "/nonexistent/stack.ten"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn reconstruct_with_solver_and_input_file() {
    let dir = tempfile::tempdir().unwrap();
    // solver thresholds are absolute, so use a kernel with unit peak
    let cfg_path = dir.path().join("unit.toml");
    std::fs::write(&cfg_path, TINY.replace("[psf]\n", "[psf]\npeak_normalize = true\n")).unwrap();
    let cfg = s(&cfg_path).to_string();
    assert_eq!(code(&psrnet(&["--config", &cfg, "synth", "--out", s(&dir.path().join("data"))])), 0);
    let out = dir.path().join("r");
    let o = psrnet(&[
        "--config",
        &cfg,
        "reconstruct",
        "--solver",
        "fista",
        "--lambda1",
        "0.01",
        "--max-iters",
        "50",
        "--input",
        s(&dir.path().join("data/scene.ten")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("image.pgm").exists());
    assert!(!out.join("quality.json").exists());
    assert_eq!(code(&psrnet(&["--config", &cfg, "reconstruct", "--out", s(&out)])), 2);
    assert_eq!(code(&psrnet(&["--config", &cfg, "reconstruct", "--solver", "xista", "--out", s(&out)])), 2);
}

#[test]
fn bench_single_cell_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("bench");
    let o = psrnet(&["--config", &cfg, "--threads", "1", "bench", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let cells = manifest["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0]["status"], "ok");
    let grid = std::fs::read_to_string(out.join("variant_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 2);
    let hash = manifest["config_hash"].as_str().unwrap();
    for table in ["variant_grid.csv", "layer_study.csv", "binning.csv"] {
        let text = std::fs::read_to_string(out.join(table)).unwrap();
        assert!(text.lines().skip(1).all(|l| l.contains(hash)), "{table}");
    }
}
