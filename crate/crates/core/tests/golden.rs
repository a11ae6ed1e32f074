use std::path::Path;

use psrnet::config::Config;
use psrnet::io::read_psf;

/// Default kernel against the file written by the first verified build.
#[test]
fn default_kernel_matches_golden_file() {
    let golden = read_psf(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/psf_default.psf"), true).unwrap();
    let cfg = Config::default();
    let psf = cfg.psf.build(&cfg.material).unwrap();
    assert_eq!(psf.grid(), golden.grid());
    let peak = golden.values().iter().cloned().fold(0.0, f64::max);
    assert!(peak > 0.0);
    for (a, b) in psf.values().iter().zip(golden.values()) {
        assert!((a - b).abs() <= 1e-12 * peak, "{a:e} vs {b:e}");
    }
}
