//! Deep-unfolded block-sparse networks.
//!
//! A network of `K` layers maps measurements `T` (rows = measurements,
//! columns = pixels) to a flux estimate. Layer 0 computes `û = η(B * T)`;
//! every further layer computes `û = η(S * z + B * T)` where `z` is the
//! previous estimate, or a momentum extrapolation for the fast variants.
//! `η` is the block soft threshold over measurements at each pixel.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{Convolver, Engine, Filter};
use crate::error::{ensure, Error, Result};
use crate::io;

/// `(measurement, pixel)` matrix; each column is one block.
pub type BlockSignal = Array2<f64>;

/// Momentum start value `t_1 = (1 + sqrt 5) / 2`.
pub const T_FIRST: f64 = 1.618_033_988_749_895;

/// Momentum recurrence `t_k = (1 + sqrt(1 + 4 t_{k-1}^2)) / 2`.
#[inline]
pub fn next_momentum(t: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lbista,
    Lbfista,
    Lbenet,
    Lbfenet,
    /// No thresholding; `η` is replaced by `max(0, ·)`.
    ReluOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Lbista, Variant::Lbfista, Variant::Lbenet, Variant::Lbfenet, Variant::ReluOnly];

    pub fn has_momentum(self) -> bool {
        matches!(self, Variant::Lbfista | Variant::Lbfenet)
    }

    /// Elastic-net variants train the Tikhonov shrink `alpha2`.
    pub fn uses_alpha2(self) -> bool {
        matches!(self, Variant::Lbenet | Variant::Lbfenet)
    }

    pub fn is_regularized(self) -> bool {
        self != Variant::ReluOnly
    }

    fn code(self) -> u8 {
        match self {
            Variant::Lbista => 0,
            Variant::Lbfista => 1,
            Variant::Lbenet => 2,
            Variant::Lbfenet => 3,
            Variant::ReluOnly => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lbista => "lbista",
            Variant::Lbfista => "lbfista",
            Variant::Lbenet => "lbenet",
            Variant::Lbfenet => "lbfenet",
            Variant::ReluOnly => "relu_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected lbista, lbfista, lbenet, lbfenet or relu_only)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// One `B`, `S` pair shared by every layer.
    Tied,
    /// Separate filters per layer.
    Untied,
}

impl WeightMode {
    pub fn name(self) -> &'static str {
        match self {
            WeightMode::Tied => "tied",
            WeightMode::Untied => "untied",
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tied" => Ok(WeightMode::Tied),
            "untied" => Ok(WeightMode::Untied),
            _ => Err(Error::Config(format!("unknown weight mode '{s}' (expected tied or untied)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPair {
    pub b: Filter,
    pub s: Filter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub alpha1: f64,
    pub alpha2: f64,
}

/// Borrowed view of the parameters one layer uses.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a> {
    pub b: &'a Filter,
    pub s: &'a Filter,
    pub alpha1: f64,
    pub alpha2: f64,
}

/// Block soft threshold: every column whose norm is at most `alpha1` is
/// zeroed, the rest are shrunk by `1 - alpha1 / norm` and divided by `1 + alpha2`.
pub fn block_soft_threshold(u: ArrayView2<f64>, alpha1: f64, alpha2: f64) -> Result<BlockSignal> {
    ensure!(alpha1 >= 0.0 && alpha2 >= 0.0, InvalidParameter, "thresholds must be >= 0, got ({alpha1}, {alpha2})");
    let mut out = u.to_owned();
    threshold_in_place(&mut out, alpha1, alpha2);
    Ok(out)
}

/// Column norms over measurements.
pub(crate) fn column_norms(u: &Array2<f64>) -> Vec<f64> {
    let mut sq = vec![0.0; u.ncols()];
    for row in u.rows() {
        for (s, v) in sq.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Per-column scale `max(0, 1 - alpha1 / norm) / (1 + alpha2)`.
pub(crate) fn shrink_factors(norms: &[f64], alpha1: f64, alpha2: f64) -> Vec<f64> {
    norms
        .iter()
        .map(|&n| if n > alpha1 && n > 0.0 { (1.0 - alpha1 / n) / (1.0 + alpha2) } else { 0.0 })
        .collect()
}

pub(crate) fn threshold_in_place(u: &mut Array2<f64>, alpha1: f64, alpha2: f64) {
    if alpha1 == 0.0 && alpha2 == 0.0 {
        return;
    }
    let factors = shrink_factors(&column_norms(u), alpha1, alpha2);
    for mut row in u.rows_mut() {
        for (v, f) in row.iter_mut().zip(&factors) {
            *v *= f;
        }
    }
}

pub(crate) fn relu_in_place(u: &mut Array2<f64>) {
    u.mapv_inplace(|v| v.max(0.0));
}

/// An unrolled network.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedNetwork {
    variant: Variant,
    weight_mode: WeightMode,
    relu_after_gradient: bool,
    filters: Vec<FilterPair>,
    thresholds: Vec<Thresholds>,
}

/// Architecture choice for a freshly initialized network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: Variant,
    pub weight_mode: WeightMode,
    pub relu_after_gradient: bool,
    pub layers: usize,
}

impl UnfoldedNetwork {
    pub fn new(
        variant: Variant,
        weight_mode: WeightMode,
        relu_after_gradient: bool,
        filters: Vec<FilterPair>,
        thresholds: Vec<Thresholds>,
    ) -> Result<Self> {
        let k = thresholds.len();
        ensure!(k >= 1, InvalidParameter, "a network needs at least one layer");
        let want_sets = match weight_mode {
            WeightMode::Tied => 1,
            WeightMode::Untied => k,
        };
        ensure!(
            filters.len() == want_sets,
            InvalidParameter,
            "{weight_mode} network with {k} layers needs {want_sets} filter pairs, got {}",
            filters.len()
        );
        let (bw, sw) = (filters[0].b.width(), filters[0].s.width());
        ensure!(
            filters.iter().all(|f| f.b.width() == bw && f.s.width() == sw),
            InvalidParameter,
            "all layers must share filter widths"
        );
        for (i, th) in thresholds.iter().enumerate() {
            ensure!(
                th.alpha1 >= 0.0 && th.alpha2 >= 0.0,
                InvalidParameter,
                "layer {i} thresholds must be >= 0, got ({}, {})",
                th.alpha1,
                th.alpha2
            );
            ensure!(
                variant.uses_alpha2() || th.alpha2 == 0.0,
                InvalidParameter,
                "{variant} keeps alpha2 = 0 (layer {i} has {})",
                th.alpha2
            );
        }
        Ok(Self { variant, weight_mode, relu_after_gradient, filters, thresholds })
    }

    /// Initializes from a spatial PSF: `B = 2 γ Φ`, `S = E - B * Φ`, all
    /// thresholds set to the given values (alpha2 forced to 0 where unused).
    pub fn psf_initialized(arch: Architecture, psf: &Filter, step: f64, n_x: usize, alpha1: f64, alpha2: f64) -> Result<Self> {
        ensure!(step > 0.0 && step.is_finite(), InvalidParameter, "step size must be positive, got {step}");
        ensure!(arch.layers >= 1, InvalidParameter, "a network needs at least one layer");
        let b = psf.scaled(2.0 * step);
        let s = b.compose(psf).identity_minus().cropped(2 * n_x.max(1) - 1);
        let pair = FilterPair { b, s };
        let sets = match arch.weight_mode {
            WeightMode::Tied => 1,
            WeightMode::Untied => arch.layers,
        };
        let (a1, a2) = match arch.variant {
            Variant::ReluOnly => (0.0, 0.0),
            v if v.uses_alpha2() => (alpha1, alpha2),
            _ => (alpha1, 0.0),
        };
        Self::new(
            arch.variant,
            arch.weight_mode,
            arch.relu_after_gradient,
            vec![pair; sets],
            vec![Thresholds { alpha1: a1, alpha2: a2 }; arch.layers],
        )
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn weight_mode(&self) -> WeightMode {
        self.weight_mode
    }

    pub fn relu_after_gradient(&self) -> bool {
        self.relu_after_gradient
    }

    pub fn layers(&self) -> usize {
        self.thresholds.len()
    }

    pub fn filters(&self) -> &[FilterPair] {
        &self.filters
    }

    pub fn thresholds(&self) -> &[Thresholds] {
        &self.thresholds
    }

    pub fn thresholds_mut(&mut self) -> &mut [Thresholds] {
        &mut self.thresholds
    }

    /// Filter-pair index used by layer `k`.
    pub fn filter_set(&self, k: usize) -> usize {
        match self.weight_mode {
            WeightMode::Tied => 0,
            WeightMode::Untied => k,
        }
    }

    pub fn layer(&self, k: usize) -> LayerParams<'_> {
        let f = &self.filters[self.filter_set(k)];
        let th = self.thresholds[k];
        LayerParams { b: &f.b, s: &f.s, alpha1: th.alpha1, alpha2: th.alpha2 }
    }

    /// Copy with one filter pair per layer, all equal to the shared pair.
    pub fn untie(&self) -> Self {
        let filters = (0..self.layers()).map(|k| self.filters[self.filter_set(k)].clone()).collect();
        Self { weight_mode: WeightMode::Untied, filters, ..self.clone() }
    }

    /// Keeps the first `k` layers.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        ensure!(k >= 1 && k <= self.layers(), InvalidParameter, "cannot truncate {} layers to {k}", self.layers());
        let mut net = self.clone();
        net.thresholds.truncate(k);
        if net.weight_mode == WeightMode::Untied {
            net.filters.truncate(k);
        }
        Ok(net)
    }

    /// Flat parameter vector: every filter pair (`B` taps then `S` taps),
    /// then `alpha1, alpha2` per layer.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.layout().len());
        for f in &self.filters {
            p.extend_from_slice(f.b.taps());
            p.extend_from_slice(f.s.taps());
        }
        for th in &self.thresholds {
            p.push(th.alpha1);
            p.push(th.alpha2);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let layout = self.layout();
        ensure!(p.len() == layout.len(), Shape, "parameter vector has {} entries, expected {}", p.len(), layout.len());
        for (i, f) in self.filters.iter_mut().enumerate() {
            f.b.taps_mut().copy_from_slice(&p[layout.b_range(i)]);
            f.s.taps_mut().copy_from_slice(&p[layout.s_range(i)]);
        }
        for (k, th) in self.thresholds.iter_mut().enumerate() {
            th.alpha1 = p[layout.alpha1(k)];
            th.alpha2 = p[layout.alpha2(k)];
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            sets: self.filters.len(),
            b_width: self.filters[0].b.width(),
            s_width: self.filters[0].s.width(),
            layers: self.layers(),
        }
    }

    /// Binds the filters to a row length.
    pub fn plan(&self, n_x: usize) -> InferencePlan {
        self.plan_with(n_x, Engine::Auto)
    }

    pub fn plan_with(&self, n_x: usize, engine: Engine) -> InferencePlan {
        let convs = self
            .filters
            .iter()
            .map(|f| (Convolver::new(&f.b, n_x, engine), Convolver::new(&f.s, n_x, engine)))
            .collect();
        InferencePlan { n_x, convs }
    }
}

/// Index map of [`UnfoldedNetwork::params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub sets: usize,
    pub b_width: usize,
    pub s_width: usize,
    pub layers: usize,
}

impl ParamLayout {
    fn set_len(&self) -> usize {
        self.b_width + self.s_width
    }

    pub fn len(&self) -> usize {
        self.sets * self.set_len() + 2 * self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn b_range(&self, set: usize) -> std::ops::Range<usize> {
        let start = set * self.set_len();
        start..start + self.b_width
    }

    pub fn s_range(&self, set: usize) -> std::ops::Range<usize> {
        let start = set * self.set_len() + self.b_width;
        start..start + self.s_width
    }

    pub fn alpha1(&self, layer: usize) -> usize {
        self.sets * self.set_len() + 2 * layer
    }

    pub fn alpha2(&self, layer: usize) -> usize {
        self.alpha1(layer) + 1
    }
}

/// Filters bound to a row length, reusable across rows.
#[derive(Debug, Clone)]
pub struct InferencePlan {
    n_x: usize,
    convs: Vec<(Convolver, Convolver)>,
}

impl InferencePlan {
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// `B_k * T`.
    pub fn bt(&self, net: &UnfoldedNetwork, k: usize, t: ArrayView2<f64>) -> BlockSignal {
        self.convs[net.filter_set(k)].0.apply_owned(t)
    }

    fn s_apply(&self, net: &UnfoldedNetwork, k: usize, z: &Array2<f64>) -> BlockSignal {
        self.convs[net.filter_set(k)].1.apply_owned(z.view())
    }
}

/// Iteration state after some number of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub u_hat: BlockSignal,
    pub z: BlockSignal,
    pub t: f64,
    /// Layers applied so far.
    pub layers_done: usize,
}

fn check_input(net: &UnfoldedNetwork, plan: &InferencePlan, t: ArrayView2<f64>) -> Result<()> {
    ensure!(
        t.ncols() == plan.n_x,
        Shape,
        "measurements have {} pixels, plan was built for {}",
        t.ncols(),
        plan.n_x
    );
    ensure!(t.nrows() >= 1, Shape, "need at least one measurement");
    ensure!(plan.convs.len() == net.filters.len(), Shape, "plan was built for another network");
    Ok(())
}

/// Applies the layer nonlinearity to a pre-activation in place.
fn activate(net: &UnfoldedNetwork, k: usize, v: &mut Array2<f64>) {
    if net.variant == Variant::ReluOnly {
        relu_in_place(v);
        return;
    }
    if net.relu_after_gradient {
        relu_in_place(v);
    }
    let th = net.thresholds[k];
    threshold_in_place(v, th.alpha1, th.alpha2);
}

/// Layer 0: `û = η(B * T)`, `t = t_1`, and `z = B * T` for momentum
/// variants (the pre-threshold value) or `z = û` otherwise.
pub fn init_state(net: &UnfoldedNetwork, plan: &InferencePlan, t: ArrayView2<f64>) -> Result<LayerState> {
    check_input(net, plan, t)?;
    let v = plan.bt(net, 0, t);
    let mut u_hat = v.clone();
    activate(net, 0, &mut u_hat);
    let z = if net.variant.has_momentum() { v } else { u_hat.clone() };
    Ok(LayerState { u_hat, z, t: T_FIRST, layers_done: 1 })
}

/// Applies layer `k` (`k >= 1`) given the precomputed `B_k * T`.
pub fn layer_forward(net: &UnfoldedNetwork, plan: &InferencePlan, k: usize, state: LayerState, bt: &BlockSignal) -> Result<LayerState> {
    ensure!(k >= 1 && k < net.layers(), InvalidParameter, "layer index {k} outside 1..{}", net.layers());
    ensure!(bt.dim() == state.z.dim(), Shape, "B*T shape {:?} does not match state {:?}", bt.dim(), state.z.dim());
    let mut v = plan.s_apply(net, k, &state.z);
    v += bt;
    activate(net, k, &mut v);
    let u_hat = v;
    if net.variant.has_momentum() {
        let t_next = next_momentum(state.t);
        let beta = (state.t - 1.0) / t_next;
        let mut z = u_hat.clone();
        Zip::from(&mut z).and(&u_hat).and(&state.u_hat).for_each(|z, &u, &p| *z = u + beta * (u - p));
        Ok(LayerState { u_hat, z, t: t_next, layers_done: state.layers_done + 1 })
    } else {
        Ok(LayerState { z: u_hat.clone(), u_hat, t: state.t, layers_done: state.layers_done + 1 })
    }
}

/// Runs the first `k_active` layers and returns every intermediate estimate.
pub fn infer_trajectory(net: &UnfoldedNetwork, plan: &InferencePlan, t: ArrayView2<f64>, k_active: usize) -> Result<Vec<BlockSignal>> {
    ensure!(
        k_active >= 1 && k_active <= net.layers(),
        InvalidParameter,
        "k_active = {k_active} outside 1..={}",
        net.layers()
    );
    let mut state = init_state(net, plan, t)?;
    let mut out = vec![state.u_hat.clone()];
    let mut shared_bt: Option<BlockSignal> = None;
    for k in 1..k_active {
        let bt = match net.weight_mode {
            WeightMode::Tied => shared_bt.get_or_insert_with(|| plan.bt(net, 0, t)).clone(),
            WeightMode::Untied => plan.bt(net, k, t),
        };
        state = layer_forward(net, plan, k, state, &bt)?;
        out.push(state.u_hat.clone());
    }
    Ok(out)
}

/// Output after the first `k_active` layers.
pub fn infer_partial_with(net: &UnfoldedNetwork, plan: &InferencePlan, t: ArrayView2<f64>, k_active: usize) -> Result<BlockSignal> {
    ensure!(
        k_active >= 1 && k_active <= net.layers(),
        InvalidParameter,
        "k_active = {k_active} outside 1..={}",
        net.layers()
    );
    let mut state = init_state(net, plan, t)?;
    let shared_bt = (net.weight_mode == WeightMode::Tied && k_active > 1).then(|| plan.bt(net, 0, t));
    for k in 1..k_active {
        state = match &shared_bt {
            Some(bt) => layer_forward(net, plan, k, state, bt)?,
            None => {
                let bt = plan.bt(net, k, t);
                layer_forward(net, plan, k, state, &bt)?
            }
        };
    }
    Ok(state.u_hat)
}

pub fn infer_partial(net: &UnfoldedNetwork, k_active: usize, t: ArrayView2<f64>) -> Result<BlockSignal> {
    let plan = net.plan(t.ncols());
    infer_partial_with(net, &plan, t, k_active)
}

/// Full forward pass.
pub fn infer(net: &UnfoldedNetwork, t: ArrayView2<f64>) -> Result<BlockSignal> {
    infer_partial(net, net.layers(), t)
}

pub fn infer_with(net: &UnfoldedNetwork, plan: &InferencePlan, t: ArrayView2<f64>) -> Result<BlockSignal> {
    infer_partial_with(net, plan, t, net.layers())
}

/// Squared norm of the full (uncropped) convolution operator on length-`n_x`
/// signals, by power iteration on its normal operator.
pub fn operator_norm_sq(psf: &Filter, n_x: usize) -> Result<f64> {
    ensure!(n_x >= 1, InvalidParameter, "signal length must be >= 1");
    ensure!(psf.taps().iter().any(|t| *t != 0.0), Numerical, "zero kernel has no usable step size");
    let normal = psf.compose(&psf.flipped());
    let conv = Convolver::new(&normal, n_x, Engine::Auto);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = Array2::from_shape_fn((1, n_x), |_| 1.0 + 0.1 * rng.random::<f64>());
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v /= norm;
    let mut lambda = 0.0;
    for _ in 0..50_000 {
        let w = conv.apply_owned(v.view());
        let next: f64 = w.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        ensure!(wn > 0.0 && wn.is_finite(), Numerical, "power iteration collapsed");
        v = w / wn;
        if (next - lambda).abs() <= 1e-13 * next.abs() {
            return Ok(next);
        }
        lambda = next;
    }
    log::warn!("power iteration hit the iteration cap; eigenvalue estimate {lambda:e}");
    Ok(lambda)
}

/// `γ = 1 / (2 L)` with `L` the squared operator norm, so the gradient step
/// `2γ` stays at the stability bound.
pub fn default_step_size(psf: &Filter, n_x: usize) -> Result<f64> {
    Ok(0.5 / operator_norm_sq(psf, n_x)?)
}

const NET_MAGIC: &[u8; 4] = b"PSRN";
const NET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NetworkMeta {
    format: String,
    version: u32,
    variant: Variant,
    weight_mode: WeightMode,
    relu_after_gradient: bool,
    layers: usize,
    b_width: usize,
    s_width: usize,
    thresholds: Vec<Thresholds>,
}

impl UnfoldedNetwork {
    /// Binary layout: magic `PSRN`, `u32` version, `u8` variant, `u8` weight
    /// mode, `u8` relu flag, `u32` K, `u32` B width, `u32` S width, `u32`
    /// number of filter pairs, the pairs as `f64` taps (`B` then `S`), then
    /// `f64 alpha1, alpha2` per layer. All little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = io::create(path)?;
        io::write_all(&mut w, NET_MAGIC, path)?;
        io::write_all(&mut w, &NET_VERSION.to_le_bytes(), path)?;
        io::write_all(
            &mut w,
            &[self.variant.code(), self.weight_mode as u8, self.relu_after_gradient as u8],
            path,
        )?;
        let layout = self.layout();
        for n in [self.layers(), layout.b_width, layout.s_width, layout.sets] {
            io::write_all(&mut w, &(n as u32).to_le_bytes(), path)?;
        }
        io::write_f64s(&mut w, self.params(), path)?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = io::open(path)?;
        r.magic(NET_MAGIC)?;
        let version = r.u32()?;
        if version != NET_VERSION {
            return Err(Error::format(path, format!("unsupported network version {version}")));
        }
        let variant = Variant::from_code(r.u8()?).ok_or_else(|| Error::format(path, "unknown variant code"))?;
        let weight_mode = match r.u8()? {
            0 => WeightMode::Tied,
            1 => WeightMode::Untied,
            c => return Err(Error::format(path, format!("unknown weight mode code {c}"))),
        };
        let relu = match r.u8()? {
            0 => false,
            1 => true,
            c => return Err(Error::format(path, format!("bad relu flag {c}"))),
        };
        let (k, bw, sw, sets) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if k == 0 || bw % 2 == 0 || sw % 2 == 0 || sets == 0 {
            return Err(Error::format(path, "inconsistent network header"));
        }
        let layout = ParamLayout { sets, b_width: bw, s_width: sw, layers: k };
        let params = r.f64s(layout.len())?;
        r.finish()?;
        let filters = (0..sets)
            .map(|i| {
                Ok(FilterPair {
                    b: Filter::new(params[layout.b_range(i)].to_vec())?,
                    s: Filter::new(params[layout.s_range(i)].to_vec())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let thresholds = (0..k)
            .map(|i| Thresholds { alpha1: params[layout.alpha1(i)], alpha2: params[layout.alpha2(i)] })
            .collect();
        Self::new(variant, weight_mode, relu, filters, thresholds).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Human-readable description written next to the binary file.
    pub fn metadata_json(&self) -> String {
        let layout = self.layout();
        let meta = NetworkMeta {
            format: "psrnet-network".into(),
            version: NET_VERSION,
            variant: self.variant,
            weight_mode: self.weight_mode,
            relu_after_gradient: self.relu_after_gradient,
            layers: self.layers(),
            b_width: layout.b_width,
            s_width: layout.s_width,
            thresholds: self.thresholds.clone(),
        };
        serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n"
    }
}
