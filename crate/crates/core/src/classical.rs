//! Fixed-parameter block-sparse solvers.
//!
//! They minimize `||Φ u - T||² + λ1 Σ_n ||u[·, n]|| + λ2 ||u||²` where `Φ u`
//! is the full linear convolution (length `n + w - 1`) and `T` is the
//! measurement zero-extended to that length. The iteration is started the
//! same way as the unfolded networks, so a tied network with
//! `B = 2γΦ`, `S = E - B * Φ` reproduces these iterates.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::conv::{convolve_full, correlate_full, Filter};
use crate::error::{ensure, Error, Result};
use crate::unfold::{default_step_size, next_momentum, threshold_in_place, BlockSignal, Variant, T_FIRST};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverVariant {
    Ista,
    Fista,
    Enet,
    Fenet,
}

impl SolverVariant {
    pub fn has_momentum(self) -> bool {
        matches!(self, SolverVariant::Fista | SolverVariant::Fenet)
    }

    pub fn uses_lambda2(self) -> bool {
        matches!(self, SolverVariant::Enet | SolverVariant::Fenet)
    }

    /// The unfolded variant with the same update structure.
    pub fn unfolded(self) -> Variant {
        match self {
            SolverVariant::Ista => Variant::Lbista,
            SolverVariant::Fista => Variant::Lbfista,
            SolverVariant::Enet => Variant::Lbenet,
            SolverVariant::Fenet => Variant::Lbfenet,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverVariant::Ista => "ista",
            SolverVariant::Fista => "fista",
            SolverVariant::Enet => "enet",
            SolverVariant::Fenet => "fenet",
        }
    }
}

impl fmt::Display for SolverVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ista" => Ok(SolverVariant::Ista),
            "fista" => Ok(SolverVariant::Fista),
            "enet" => Ok(SolverVariant::Enet),
            "fenet" => Ok(SolverVariant::Fenet),
            _ => Err(Error::Config(format!("unknown solver '{s}' (expected ista, fista, enet or fenet)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub variant: SolverVariant,
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    pub max_iters: usize,
    /// `γ`; `None` uses [`default_step_size`].
    #[serde(default)]
    pub step: Option<f64>,
    /// Stop once `||û_k - û_{k-1}||_F` drops below this.
    #[serde(default)]
    pub tolerance: f64,
}

impl SolverConfig {
    pub fn new(variant: SolverVariant, lambda1: f64, lambda2: f64, max_iters: usize) -> Self {
        Self { variant, lambda1, lambda2, max_iters, step: None, tolerance: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda1 >= 0.0, InvalidParameter, "lambda1 must be >= 0, got {}", self.lambda1);
        ensure!(self.lambda2 >= 0.0, InvalidParameter, "lambda2 must be >= 0, got {}", self.lambda2);
        ensure!(
            self.variant.uses_lambda2() || self.lambda2 == 0.0,
            InvalidParameter,
            "{} has no Tikhonov term; lambda2 must be 0",
            self.variant
        );
        ensure!(self.max_iters >= 1, InvalidParameter, "max_iters must be >= 1");
        ensure!(self.tolerance >= 0.0, InvalidParameter, "tolerance must be >= 0");
        if let Some(g) = self.step {
            ensure!(g > 0.0 && g.is_finite(), InvalidParameter, "step size must be positive, got {g}");
        }
        Ok(())
    }

    /// Threshold pair for step `γ`: the proximal map of
    /// `γ (λ1 ||·||_{2,1} + λ2 ||·||²)` is `η(γ λ1, 2 γ λ2)`.
    pub fn thresholds(&self, step: f64) -> (f64, f64) {
        (step * self.lambda1, 2.0 * step * self.lambda2)
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub estimate: BlockSignal,
    /// `û_1, û_2, ...`; the last entry equals `estimate`.
    pub trajectory: Vec<BlockSignal>,
    pub iterations: usize,
    pub step: f64,
    pub converged: bool,
}

/// Gradient step `u - 2γ Φᵀ(Φ u - T)` row by row.
fn gradient_step(psf: &[f64], t: ArrayView2<f64>, u: &Array2<f64>, step: f64) -> Array2<f64> {
    let (w, n) = (psf.len(), t.ncols());
    let c = w / 2;
    let mut out = u.clone();
    for ((mut o, ur), tr) in out.rows_mut().into_iter().zip(u.rows()).zip(t.rows()) {
        let mut r = convolve_full(psf, ur.as_slice().expect("standard layout"));
        for (i, tv) in tr.iter().enumerate() {
            r[c + i] -= tv;
        }
        let g = correlate_full(psf, &r, n);
        for (ov, gv) in o.iter_mut().zip(g) {
            *ov -= 2.0 * step * gv;
        }
    }
    out
}

/// Runs the solver. The first iterate is `η(2γ Φᵀ T)`, the gradient step
/// from zero; momentum variants start their extrapolation from that
/// pre-threshold value and `t_1 = (1 + sqrt 5) / 2`.
pub fn solve(config: &SolverConfig, psf: &Filter, t: ArrayView2<f64>) -> Result<SolveOutput> {
    run(config, psf, t, true)
}

/// Like [`solve`] but keeps only the final iterate.
pub fn solve_estimate(config: &SolverConfig, psf: &Filter, t: ArrayView2<f64>) -> Result<BlockSignal> {
    Ok(run(config, psf, t, false)?.estimate)
}

fn run(config: &SolverConfig, psf: &Filter, t: ArrayView2<f64>, record: bool) -> Result<SolveOutput> {
    config.validate()?;
    ensure!(t.nrows() >= 1 && t.ncols() >= 1, Shape, "empty measurement block");
    let step = match config.step {
        Some(g) => g,
        None => default_step_size(psf, t.ncols())?,
    };
    let bound = default_step_size(psf, t.ncols())?;
    if step > bound * (1.0 + 1e-9) {
        log::warn!("step size {step:e} exceeds the stability bound {bound:e}");
    }
    let (a1, a2) = config.thresholds(step);
    let h = psf.taps();
    let t = t.as_standard_layout();
    let t = t.view();

    let zero = Array2::zeros(t.dim());
    let v = gradient_step(h, t, &zero, step);
    let mut u = v.clone();
    threshold_in_place(&mut u, a1, a2);
    let mut z = if config.variant.has_momentum() { v } else { u.clone() };
    let mut tk = T_FIRST;
    let mut trajectory = vec![u.clone()];
    let mut iterations = 1;
    let mut converged = false;

    for _ in 1..config.max_iters {
        let mut next = gradient_step(h, t, &z, step);
        threshold_in_place(&mut next, a1, a2);
        ensure!(
            next.iter().all(|x| x.is_finite()),
            Numerical,
            "non-finite iterate after {iterations} iterations (step {step:e})"
        );
        let change = Zip::from(&next).and(&u).fold(0.0, |acc, a, b| acc + (a - b) * (a - b)).sqrt();
        if config.variant.has_momentum() {
            let t_next = next_momentum(tk);
            let beta = (tk - 1.0) / t_next;
            z = next.clone();
            Zip::from(&mut z).and(&next).and(&u).for_each(|z, &a, &p| *z = a + beta * (a - p));
            tk = t_next;
        } else {
            z = next.clone();
        }
        u = next;
        iterations += 1;
        if record {
            trajectory.push(u.clone());
        }
        if change < config.tolerance {
            converged = true;
            break;
        }
    }
    if !record {
        trajectory = vec![u.clone()];
    }
    Ok(SolveOutput { estimate: u, trajectory, iterations, step, converged })
}

/// `||Φ u - T||² + λ1 Σ_n ||u[·, n]|| + λ2 ||u||²` with the full convolution.
pub fn objective(psf: &Filter, t: ArrayView2<f64>, u: ArrayView2<f64>, lambda1: f64, lambda2: f64) -> Result<f64> {
    ensure!(t.dim() == u.dim(), Shape, "estimate {:?} and measurements {:?} differ in shape", u.dim(), t.dim());
    let h = psf.taps();
    let c = h.len() / 2;
    let mut fit = 0.0;
    for (ur, tr) in u.rows().into_iter().zip(t.rows()) {
        let mut r = convolve_full(h, &ur.to_vec());
        for (i, tv) in tr.iter().enumerate() {
            r[c + i] -= tv;
        }
        fit += r.iter().map(|v| v * v).sum::<f64>();
    }
    let mut col = vec![0.0; u.ncols()];
    for row in u.rows() {
        for (s, v) in col.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    let l21: f64 = col.iter().map(|s| s.sqrt()).sum();
    let l2: f64 = u.iter().map(|v| v * v).sum();
    Ok(fit + lambda1 * l21 + lambda2 * l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unfold::{infer_trajectory, Architecture, UnfoldedNetwork, WeightMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(width: usize, sigma: f64) -> Filter {
        let c = (width / 2) as f64;
        Filter::new((0..width).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()).unwrap()
    }

    #[test]
    fn zero_measurements_give_zero() {
        let t = Array2::zeros((3, 10));
        let out = solve(&SolverConfig::new(SolverVariant::Fista, 0.1, 0.0, 5), &gaussian(5, 1.0), t.view()).unwrap();
        assert!(out.trajectory[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn delta_kernel_reaches_least_squares_in_one_step() {
        let t = ndarray::arr2(&[[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]]);
        let mut cfg = SolverConfig::new(SolverVariant::Ista, 0.0, 0.0, 1);
        let out = solve(&cfg, &Filter::delta(), t.view()).unwrap();
        assert!(Zip::from(&out.estimate).and(&t).all(|a, b| (a - b).abs() < 1e-14));
        cfg.step = Some(0.5);
        assert_eq!(solve(&cfg, &Filter::delta(), t.view()).unwrap().estimate, t);
    }

    #[test]
    fn objective_of_zero_is_energy() {
        let t = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let z = Array2::zeros((2, 2));
        assert_eq!(objective(&gaussian(3, 1.0), t.view(), z.view(), 1.0, 1.0).unwrap(), 30.0);
        assert_eq!(objective(&Filter::delta(), t.view(), t.view(), 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ista_objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let psf = gaussian(9, 2.0);
        for _ in 0..5 {
            let t = Array2::from_shape_fn((3, 24), |_| rng.random_range(-1.0..1.0));
            let (l1, l2) = (rng.random_range(0.01..1.0), rng.random_range(0.0..0.5));
            for variant in [SolverVariant::Ista, SolverVariant::Enet] {
                let l2 = if variant.uses_lambda2() { l2 } else { 0.0 };
                let out = solve(&SolverConfig::new(variant, l1, l2, 60), &psf, t.view()).unwrap();
                let obj: Vec<f64> = out.trajectory.iter().map(|u| objective(&psf, t.view(), u.view(), l1, l2).unwrap()).collect();
                for w in obj.windows(2) {
                    assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{variant}: {} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn tolerance_stop_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psf = gaussian(7, 1.5);
        let t = Array2::from_shape_fn((2, 16), |_| rng.random_range(0.0..1.0));
        let mut cfg = SolverConfig::new(SolverVariant::Ista, 0.5, 0.0, 200_000);
        cfg.tolerance = 1e-9;
        let out = solve(&cfg, &psf, t.view()).unwrap();
        assert!(out.converged);
        let mut again = gradient_step(psf.taps(), t.view(), &out.estimate, out.step);
        let (a1, a2) = cfg.thresholds(out.step);
        threshold_in_place(&mut again, a1, a2);
        let diff = Zip::from(&again).and(&out.estimate).fold(0.0, |acc, a, b| acc + (a - b) * (a - b)).sqrt();
        assert!(diff < 1e-9);
    }

    #[test]
    fn lambda2_rejected_for_ista() {
        let t = Array2::zeros((1, 4));
        assert!(solve(&SolverConfig::new(SolverVariant::Fista, 0.1, 0.1, 3), &Filter::delta(), t.view()).is_err());
    }

    #[test]
    fn tied_networks_follow_solver_iterates() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let psf = gaussian(11, 2.0);
        let n = 32;
        let t = Array2::from_shape_fn((4, n), |_| rng.random_range(0.0..1.0));
        let step = default_step_size(&psf, n).unwrap();
        for variant in [SolverVariant::Ista, SolverVariant::Fista, SolverVariant::Enet, SolverVariant::Fenet] {
            let l2 = if variant.uses_lambda2() { 0.3 } else { 0.0 };
            let cfg = SolverConfig::new(variant, 0.4, l2, 6);
            let out = solve(&cfg, &psf, t.view()).unwrap();
            let (a1, a2) = cfg.thresholds(step);
            let arch = Architecture { variant: variant.unfolded(), weight_mode: WeightMode::Tied, relu_after_gradient: false, layers: 6 };
            let net = UnfoldedNetwork::psf_initialized(arch, &psf, step, n, a1, a2).unwrap();
            let traj = infer_trajectory(&net, &net.plan(n), t.view(), 6).unwrap();
            assert_eq!(traj.len(), out.trajectory.len());
            for (a, b) in traj.iter().zip(&out.trajectory) {
                let err = Zip::from(a).and(b).fold(0.0_f64, |m, x, y| m.max((x - y).abs()));
                assert!(err <= 1e-10, "{variant}: {err:e}");
            }
        }
    }
}
