//! Layer-wise training of unfolded networks.
//!
//! The loss is the mean normalized squared error between the network output
//! and the ground-truth flux of each batch. Gradients are accumulated by
//! hand through the unrolled layers. Training is greedy: stage `k` trains
//! the parameters that layer `k` introduces on the `k`-layer loss, then a
//! refinement pass retrains everything active so far with a reduced rate.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{accumulate_filter_grad, convolve_same, correlate_same};
use crate::error::{ensure, Error, Result};
use crate::io;
use crate::synth::TrainingSet;
use crate::unfold::{column_norms, next_momentum, shrink_factors, UnfoldedNetwork, Variant, WeightMode, T_FIRST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// ADAM iterations per stage.
    pub max_adam_iters: usize,
    /// Learning-rate factor for refinement passes.
    pub refinement_factor: f64,
    pub n_refinements: usize,
    /// Starting value for both thresholds.
    pub initial_alpha: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// A stage stops once its best loss improved by less than
    /// `early_stop_tol` over this many iterations.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_adam_iters: 5000,
            refinement_factor: 0.5,
            n_refinements: 1,
            initial_alpha: 0.1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            early_stop_window: 200,
            early_stop_tol: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.max_adam_iters >= 1, Config, "max_adam_iters must be >= 1");
        ensure!(
            self.refinement_factor > 0.0 && self.refinement_factor < 1.0,
            Config,
            "refinement_factor must lie in (0, 1), got {}",
            self.refinement_factor
        );
        ensure!(self.initial_alpha >= 0.0, Config, "initial_alpha must be >= 0");
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), Config, "learning_rate must be positive");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), Config, "ADAM betas must lie in [0, 1)");
        ensure!(self.epsilon > 0.0, Config, "epsilon must be positive");
        ensure!(self.early_stop_window >= 1, Config, "early_stop_window must be >= 1");
        Ok(())
    }
}

/// ADAM moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1, beta2, epsilon }
    }
}

/// Bias-corrected ADAM update. Entries with `mask[i] == false` are left alone.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], mask: Option<&[bool]>) -> Result<()> {
    ensure!(
        params.len() == state.m.len() && grads.len() == state.m.len(),
        Shape,
        "ADAM state has {} entries, params {} and grads {}",
        state.m.len(),
        params.len(),
        grads.len()
    );
    if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient {g} at parameter {i}")));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= state.lr * mh / (vh.sqrt() + state.epsilon);
    }
    Ok(())
}

/// One training batch prepared for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: Array2<f64>,
    pub u: Array2<f64>,
    energy: f64,
}

impl Sample {
    pub fn new(t: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Self> {
        ensure!(t.dim() == u.dim(), Shape, "measurements {:?} and flux {:?} differ in shape", t.dim(), u.dim());
        let energy = u.iter().map(|v| v * v).sum();
        Ok(Self { t: t.as_standard_layout().into_owned(), u: u.as_standard_layout().into_owned(), energy })
    }
}

/// Drops all-zero batches with a warning; errors if nothing is left.
pub fn samples_from(set: &TrainingSet) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(set.pairs.len());
    for (b, pair) in set.pairs.iter().enumerate() {
        let s = Sample::new(pair.measurements(), pair.flux.view())?;
        if s.energy == 0.0 {
            log::warn!("batch {b} has an all-zero ground truth and is excluded from the loss");
            continue;
        }
        out.push(s);
    }
    ensure!(!out.is_empty(), InvalidParameter, "every training batch has an all-zero ground truth");
    Ok(out)
}

fn conv_rows(h: &[f64], x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
        convolve_same(h, xr.as_slice().expect("standard layout"), or.as_slice_mut().expect("standard layout"));
    }
    out
}

fn corr_rows(h: &[f64], y: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(y.dim());
    for (yr, mut or) in y.rows().into_iter().zip(out.rows_mut()) {
        correlate_same(h, yr.as_slice().expect("standard layout"), or.as_slice_mut().expect("standard layout"));
    }
    out
}

fn filter_grad(g: &Array2<f64>, x: &Array2<f64>, dh: &mut [f64]) {
    for (gr, xr) in g.rows().into_iter().zip(x.rows()) {
        accumulate_filter_grad(gr.as_slice().expect("standard layout"), xr.as_slice().expect("standard layout"), dh);
    }
}

fn relu_applies(net: &UnfoldedNetwork) -> bool {
    net.variant() == Variant::ReluOnly || net.relu_after_gradient()
}

fn eta_forward(net: &UnfoldedNetwork, k: usize, r: &Array2<f64>) -> Array2<f64> {
    let mut u = r.clone();
    if net.variant() != Variant::ReluOnly {
        let th = net.thresholds()[k];
        crate::unfold::threshold_in_place(&mut u, th.alpha1, th.alpha2);
    }
    u
}

/// Backward pass of `η` for one layer; returns the gradient with respect to
/// its input and adds the threshold gradients to `da`.
fn eta_backward(r: &Array2<f64>, u: &Array2<f64>, gu: &Array2<f64>, alpha1: f64, alpha2: f64, da: (&mut f64, &mut f64)) -> Array2<f64> {
    let norms = column_norms(r);
    let factors = shrink_factors(&norms, alpha1, alpha2);
    let n = r.ncols();
    let mut rg = vec![0.0; n];
    let mut ug = vec![0.0; n];
    for ((rr, ur), gr) in r.rows().into_iter().zip(u.rows()).zip(gu.rows()) {
        for i in 0..n {
            rg[i] += rr[i] * gr[i];
            ug[i] += ur[i] * gr[i];
        }
    }
    let inv = 1.0 / (1.0 + alpha2);
    // Per column: g_r = f g_u + alpha1 / (1 + alpha2) * r (r . g_u) / s^3.
    let mut scale = vec![0.0; n];
    let mut radial = vec![0.0; n];
    for i in 0..n {
        let s = norms[i];
        if s > alpha1 && s > 0.0 {
            scale[i] = factors[i];
            radial[i] = alpha1 * inv * rg[i] / (s * s * s);
            *da.0 -= rg[i] * inv / s;
            *da.1 -= ug[i] * inv;
        } else if alpha1 == 0.0 {
            scale[i] = inv;
        }
    }
    let mut out = Array2::zeros(r.dim());
    for ((mut o, rr), gr) in out.rows_mut().into_iter().zip(r.rows()).zip(gu.rows()) {
        for i in 0..n {
            o[i] = scale[i] * gr[i] + radial[i] * rr[i];
        }
    }
    out
}

struct Tape {
    v: Vec<Array2<f64>>,
    u: Vec<Array2<f64>>,
    z: Vec<Array2<f64>>,
    beta: Vec<f64>,
}

fn forward(net: &UnfoldedNetwork, t: &Array2<f64>, k_active: usize) -> Tape {
    let relu = relu_applies(net);
    let momentum = net.variant().has_momentum();
    let mut bt_cache: Vec<Option<Array2<f64>>> = vec![None; net.filters().len()];
    let mut bt = |l: usize| -> Array2<f64> {
        let set = net.filter_set(l);
        bt_cache[set].get_or_insert_with(|| conv_rows(net.filters()[set].b.taps(), t)).clone()
    };
    let mut tape = Tape { v: Vec::with_capacity(k_active), u: Vec::with_capacity(k_active), z: Vec::with_capacity(k_active), beta: vec![0.0] };
    let mut tk = T_FIRST;
    for l in 0..k_active {
        let mut v = bt(l);
        if l > 0 {
            v += &conv_rows(net.filters()[net.filter_set(l)].s.taps(), &tape.z[l - 1]);
        }
        let r = if relu { v.mapv(|x| x.max(0.0)) } else { v.clone() };
        let u = eta_forward(net, l, &r);
        let z = if l == 0 {
            if momentum { v.clone() } else { u.clone() }
        } else if momentum {
            let t_next = next_momentum(tk);
            let beta = (tk - 1.0) / t_next;
            tk = t_next;
            tape.beta.push(beta);
            let mut z = u.clone();
            Zip::from(&mut z).and(&u).and(&tape.u[l - 1]).for_each(|z, &a, &p| *z = a + beta * (a - p));
            z
        } else {
            tape.beta.push(0.0);
            u.clone()
        };
        tape.v.push(v);
        tape.u.push(u);
        tape.z.push(z);
    }
    tape
}

fn nmse(out: &Array2<f64>, s: &Sample) -> f64 {
    Zip::from(out).and(&s.u).fold(0.0, |acc, a, b| acc + (a - b) * (a - b)) / s.energy
}

/// Loss of one batch and its gradient in [`UnfoldedNetwork::params`] order.
fn sample_loss_grad(net: &UnfoldedNetwork, s: &Sample, k_active: usize) -> (f64, Vec<f64>) {
    let layout = net.layout();
    let mut grad = vec![0.0; layout.len()];
    let tape = forward(net, &s.t, k_active);
    let last = &tape.u[k_active - 1];
    let loss = nmse(last, s);

    let relu = relu_applies(net);
    let momentum = net.variant().has_momentum();
    let mut gu: Vec<Array2<f64>> = (0..k_active).map(|_| Array2::zeros(s.t.dim())).collect();
    Zip::from(&mut gu[k_active - 1]).and(last).and(&s.u).for_each(|g, &a, &b| *g = 2.0 * (a - b) / s.energy);
    let mut gz: Option<Array2<f64>> = None;

    for l in (0..k_active).rev() {
        let mut gv_extra = None;
        if let Some(gz) = gz.take() {
            if !momentum {
                gu[l] += &gz;
            } else if l == 0 {
                gv_extra = Some(gz);
            } else {
                let beta = tape.beta[l];
                gu[l].scaled_add(1.0 + beta, &gz);
                gu[l - 1].scaled_add(-beta, &gz);
            }
        }
        let v = &tape.v[l];
        let r = if relu { v.mapv(|x| x.max(0.0)) } else { v.clone() };
        let mut gv = if net.variant() == Variant::ReluOnly {
            gu[l].clone()
        } else {
            let th = net.thresholds()[l];
            let (mut d1, mut d2) = (0.0, 0.0);
            let g = eta_backward(&r, &tape.u[l], &gu[l], th.alpha1, th.alpha2, (&mut d1, &mut d2));
            grad[layout.alpha1(l)] += d1;
            grad[layout.alpha2(l)] += d2;
            g
        };
        if relu {
            Zip::from(&mut gv).and(v).for_each(|g, &x| {
                if x <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        if let Some(extra) = gv_extra {
            gv += &extra;
        }
        let set = net.filter_set(l);
        filter_grad(&gv, &s.t, &mut grad[layout.b_range(set)]);
        if l > 0 {
            filter_grad(&gv, &tape.z[l - 1], &mut grad[layout.s_range(set)]);
            gz = Some(corr_rows(net.filters()[set].s.taps(), &gv));
        }
    }
    (loss, grad)
}

/// Mean NMSE of the first `k_active` layers over the samples.
pub fn loss_partial(net: &UnfoldedNetwork, samples: &[Sample], k_active: usize) -> Result<f64> {
    check_active(net, samples, k_active)?;
    let losses: Vec<f64> = samples.par_iter().map(|s| nmse(&forward(net, &s.t, k_active).u[k_active - 1], s)).collect();
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Mean NMSE of the full network on a training set.
pub fn loss(net: &UnfoldedNetwork, set: &TrainingSet) -> Result<f64> {
    loss_partial(net, &samples_from(set)?, net.layers())
}

/// Loss and gradient of the `k_active`-layer network, summed over batches in
/// a fixed order.
pub fn loss_and_grad(net: &UnfoldedNetwork, samples: &[Sample], k_active: usize) -> Result<(f64, Vec<f64>)> {
    check_active(net, samples, k_active)?;
    let parts: Vec<(f64, Vec<f64>)> = samples.par_iter().map(|s| sample_loss_grad(net, s, k_active)).collect();
    let scale = 1.0 / samples.len() as f64;
    let mut grad = vec![0.0; net.layout().len()];
    let mut total = 0.0;
    for (l, g) in parts {
        total += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

fn check_active(net: &UnfoldedNetwork, samples: &[Sample], k_active: usize) -> Result<()> {
    ensure!(k_active >= 1 && k_active <= net.layers(), InvalidParameter, "k_active = {k_active} outside 1..={}", net.layers());
    ensure!(!samples.is_empty(), InvalidParameter, "no training samples");
    Ok(())
}

/// Which parameters a stage updates. `only_new` restricts to what layer
/// `k_active` introduces; otherwise everything used by the first `k_active`
/// layers.
pub fn stage_mask(net: &UnfoldedNetwork, k_active: usize, only_new: bool) -> Vec<bool> {
    let layout = net.layout();
    let mut mask = vec![false; layout.len()];
    let sets: Vec<usize> = match net.weight_mode() {
        WeightMode::Tied => vec![0],
        WeightMode::Untied if only_new => vec![k_active - 1],
        WeightMode::Untied => (0..k_active).collect(),
    };
    for set in sets {
        layout.b_range(set).chain(layout.s_range(set)).for_each(|i| mask[i] = true);
    }
    if net.variant().is_regularized() {
        let layers = if only_new { k_active - 1..k_active } else { 0..k_active };
        for l in layers {
            mask[layout.alpha1(l)] = true;
            if net.variant().uses_alpha2() {
                mask[layout.alpha2(l)] = true;
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Main,
    Refine(u32),
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Main => f.write_str("main"),
            Phase::Refine(r) => write!(f, "refine{r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Plateau,
    Diverged,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// Active layer count.
    pub layer: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    /// Loss at every evaluated iterate, starting with the stage's initial parameters.
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub stop: StopReason,
    /// Parameters at the end of the stage.
    pub snapshot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stages: Vec<StageReport>,
    /// Training ended worse than it started and the initial network was kept.
    pub reverted: bool,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// `iteration,stage,layer,phase,loss`, one row per evaluated iterate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,stage,layer,phase,loss\n");
        let mut it = 0usize;
        for (i, st) in self.stages.iter().enumerate() {
            for l in &st.losses {
                let _ = writeln!(s, "{it},{i},{},{},{l:e}", st.layer, st.phase);
                it += 1;
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.to_csv())
    }
}

fn project_alphas(net: &UnfoldedNetwork, params: &mut [f64]) {
    let layout = net.layout();
    for l in 0..layout.layers {
        let a1 = &mut params[layout.alpha1(l)];
        *a1 = a1.max(0.0);
        let a2 = &mut params[layout.alpha2(l)];
        *a2 = if net.variant().uses_alpha2() { a2.max(0.0) } else { 0.0 };
    }
}

fn run_stage(
    net: &mut UnfoldedNetwork,
    samples: &[Sample],
    cfg: &TrainConfig,
    k_active: usize,
    phase: Phase,
    lr: f64,
) -> Result<StageReport> {
    let mask = stage_mask(net, k_active, phase == Phase::Main);
    let mut params = net.params();
    let mut adam = AdamState::new(params.len(), lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut work = net.clone();
    let mut losses = Vec::with_capacity(cfg.max_adam_iters + 1);
    let mut best_hist = Vec::with_capacity(cfg.max_adam_iters + 1);
    let mut best = (f64::INFINITY, params.clone());
    let mut diverging = 0usize;
    let mut stop = StopReason::MaxIters;

    for it in 0..=cfg.max_adam_iters {
        work.set_params(&params)?;
        let (loss, grad) = if it < cfg.max_adam_iters {
            loss_and_grad(&work, samples, k_active)?
        } else {
            (loss_partial(&work, samples, k_active)?, Vec::new())
        };
        if !loss.is_finite() {
            log::warn!("layer {k_active} {phase}: non-finite loss at iteration {it}; keeping the best snapshot");
            stop = StopReason::NonFinite;
            break;
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, params.clone());
        }
        best_hist.push(best.0);
        if it == cfg.max_adam_iters {
            break;
        }
        if loss > 10.0 * losses[0] {
            diverging += 1;
            if diverging >= 100 {
                log::warn!("layer {k_active} {phase}: loss diverged; reverting to the best snapshot");
                stop = StopReason::Diverged;
                break;
            }
        } else {
            diverging = 0;
        }
        let w = cfg.early_stop_window;
        if it >= w && best_hist[it - w] - best.0 < cfg.early_stop_tol {
            stop = StopReason::Plateau;
            break;
        }
        if let Err(e) = adam_step(&mut adam, &mut params, &grad, Some(&mask)) {
            log::warn!("layer {k_active} {phase}: {e}; keeping the best snapshot");
            stop = StopReason::NonFinite;
            break;
        }
        project_alphas(net, &mut params);
    }
    net.set_params(&best.1)?;
    log::debug!("layer {k_active} {phase}: {} evaluations, best loss {:e}", losses.len(), best.0);
    Ok(StageReport { layer: k_active, phase, learning_rate: lr, losses, best_loss: best.0, stop, snapshot: best.1 })
}

/// Sets every threshold to `cfg.initial_alpha` (alpha2 only where the variant uses it).
pub fn reset_thresholds(net: &mut UnfoldedNetwork, alpha: f64) {
    let (regularized, enet) = (net.variant().is_regularized(), net.variant().uses_alpha2());
    for th in net.thresholds_mut() {
        th.alpha1 = if regularized { alpha } else { 0.0 };
        th.alpha2 = if enet { alpha } else { 0.0 };
    }
}

/// Trains all layers of `net`.
pub fn train(net: &UnfoldedNetwork, set: &TrainingSet, cfg: &TrainConfig) -> Result<(UnfoldedNetwork, TrainReport)> {
    let samples = samples_from(set)?;
    train_samples(net, net.clone(), &samples, cfg, 1, |_, _, _| Ok(()))
}

/// Continues the schedule at stage `first_layer` from `current`. `initial`
/// is the network the whole run started from; the result never has a higher
/// loss than it. `on_stage` sees the network and the stages of this call
/// after every completed layer, which is enough to resume bit-identically.
pub fn train_samples(
    initial: &UnfoldedNetwork,
    current: UnfoldedNetwork,
    samples: &[Sample],
    cfg: &TrainConfig,
    first_layer: usize,
    mut on_stage: impl FnMut(usize, &UnfoldedNetwork, &[StageReport]) -> Result<()>,
) -> Result<(UnfoldedNetwork, TrainReport)> {
    cfg.validate()?;
    let k = initial.layers();
    ensure!(current.layout() == initial.layout(), Shape, "resumed network does not match the initial architecture");
    ensure!(first_layer >= 1 && first_layer <= k + 1, InvalidParameter, "first stage {first_layer} outside 1..={}", k + 1);
    let start = Instant::now();
    let initial_loss = loss_partial(initial, samples, k)?;
    let mut net = current;
    let mut stages = Vec::new();
    for layer in first_layer..=k {
        stages.push(run_stage(&mut net, samples, cfg, layer, Phase::Main, cfg.learning_rate)?);
        let mut lr = cfg.learning_rate;
        for r in 1..=cfg.n_refinements {
            lr *= cfg.refinement_factor;
            stages.push(run_stage(&mut net, samples, cfg, layer, Phase::Refine(r as u32), lr)?);
        }
        on_stage(layer, &net, &stages)?;
    }
    let final_loss = loss_partial(&net, samples, k)?;
    let reverted = final_loss > initial_loss;
    let (net, final_loss) = if reverted {
        log::warn!("trained loss {final_loss:e} exceeds the initial {initial_loss:e}; keeping the initial network");
        (initial.clone(), initial_loss)
    } else {
        (net, final_loss)
    };
    let report = TrainReport { initial_loss, final_loss, stages, reverted, wall_time_s: start.elapsed().as_secs_f64() };
    Ok((net, report))
}
