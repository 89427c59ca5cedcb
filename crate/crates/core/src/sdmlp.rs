//! Single-hidden-layer SDM-style MLP: nonnegative unit-norm neuron addresses,
//! Top-K subtraction with k-annealing or the per-neuron GABA switch, manual
//! backpropagation and weight projection.
//!
//! `x_a` is stored `n × r` row-major so a sparse input touches only the rows
//! of its nonzero pixels in the forward pass.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! b"SDMLP1\n"
//! u32 n, r, o
//! u32 mode (0 anneal-subtract, 1 anneal-mask, 2 gaba-switch, 3 fixed-subtract)
//! u32 k_target, k_max, detach_inhibition (0/1), epoch
//! u32 ablation bits (1 negative weights, 2 no l2 norm, 4 hidden bias, 8 output bias)
//! f64 s
//! u64 seed, u64 column resets so far
//! f64 x_a[n*r] (row-major n×r), f64 x_v[o*r] (row-major o×r), u64 counters[r]
//! f64 hidden_bias[r]   if bit 4
//! f64 output_bias[o]   if bit 8
//! ```

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::LabeledDataset;
use crate::numerics::{cross_entropy, softmax, DenseMatrix, NumericsError, Real, Rng, ZERO_NORM};
use crate::optimizers::{Optimizer, OptimizerError, StepHook};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SDMLP1\n";

/// Column norms must stay within this of 1 after projection.
pub const COLUMN_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SdmlpError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("trace was produced by an older version of the model")]
    StaleTrace,
    #[error("class {target} out of range for {classes} outputs")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("invalid Top-K config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyData,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SdmlpError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKMode {
    /// Subtract the (k+1)-th activation, k annealed linearly over epochs.
    AnnealSubtract,
    /// Keep the top k untouched and zero the rest, k annealed.
    AnnealMask,
    /// Per-neuron excitation that turns into inhibition after `s` activations.
    GabaSwitch,
    /// Subtract with `k = k_target` from the first step.
    FixedSubtract,
}

impl TopKMode {
    fn tag(self) -> u32 {
        match self {
            Self::AnnealSubtract => 0,
            Self::AnnealMask => 1,
            Self::GabaSwitch => 2,
            Self::FixedSubtract => 3,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            0 => Self::AnnealSubtract,
            1 => Self::AnnealMask,
            2 => Self::GabaSwitch,
            3 => Self::FixedSubtract,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopKConfig {
    pub k_target: usize,
    pub k_max: usize,
    /// Anneal span in epochs, or activations per neuron in GABA mode.
    pub s: f64,
    pub mode: TopKMode,
    #[serde(default)]
    pub detach_inhibition: bool,
}

impl TopKConfig {
    pub fn annealed(k_target: usize, k_max: usize, s: f64) -> Self {
        Self {
            k_target,
            k_max,
            s,
            mode: TopKMode::AnnealSubtract,
            detach_inhibition: false,
        }
    }

    pub fn validate(&self, r: usize) -> Result<()> {
        if self.k_target == 0 || self.k_target > self.k_max || self.k_max > r {
            return Err(SdmlpError::InvalidConfig(format!(
                "need 1 <= k_target ({}) <= k_max ({}) <= r ({r})",
                self.k_target, self.k_max
            )));
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(SdmlpError::InvalidConfig(format!("s = {} must be positive", self.s)));
        }
        Ok(())
    }
}

/// Linear k schedule: `max(k_target, ⌊k_max − epoch·(k_max − k_target)/s⌋)`.
pub fn anneal_k(epoch: usize, cfg: &TopKConfig) -> usize {
    let span = (cfg.k_max - cfg.k_target) as f64;
    let k = (cfg.k_max as f64 - epoch as f64 * span / cfg.s).floor();
    if k <= cfg.k_target as f64 {
        cfg.k_target
    } else {
        (k as usize).min(cfg.k_max)
    }
}

/// `min(1, max(−1, −1 + 2·count/s))`: −1 excites fully, +1 inhibits fully.
pub fn gaba_lambda(count: u64, s: f64) -> f64 {
    (-1.0 + 2.0 * count as f64 / s).clamp(-1.0, 1.0)
}

/// Result of applying an inhibition rule to one activation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Inhibition<T> {
    pub a_star: Vec<T>,
    /// The subtracted (k+1)-th activation, 0 when it does not exist.
    pub inhibition: T,
    /// Unit that supplied the inhibition value.
    pub runner_up: Option<usize>,
    /// Units with positive output, ascending.
    pub active: Vec<usize>,
}

/// Index of the (k+1)-th largest strictly positive entry; ties go to the lower index.
fn runner_up_index<T: Real>(a: &[T], k: usize) -> Option<usize> {
    let mut pos: Vec<usize> = (0..a.len()).filter(|&i| a[i] > T::zero()).collect();
    if pos.len() <= k {
        return None;
    }
    let (_, nth, _) = pos.select_nth_unstable_by(k, |&i, &j| a[j].partial_cmp(&a[i]).unwrap().then(i.cmp(&j)));
    Some(*nth)
}

fn positive_support<T: Real>(a_star: &[T]) -> Vec<usize> {
    (0..a_star.len()).filter(|&i| a_star[i] > T::zero()).collect()
}

/// `a* = [a − I]₊` where `I` is the (k+1)-th largest entry of `[a]₊`, or 0.
pub fn topk_subtract<T: Real>(a: &[T], k: usize) -> Inhibition<T> {
    let runner_up = runner_up_index(a, k);
    let inhibition = runner_up.map_or(T::zero(), |j| a[j]);
    let a_star: Vec<T> = a.iter().map(|&v| (v - inhibition).max(T::zero())).collect();
    let active = positive_support(&a_star);
    Inhibition {
        a_star,
        inhibition,
        runner_up,
        active,
    }
}

/// Keeps the k largest positive entries unchanged and zeroes everything else.
pub fn topk_mask<T: Real>(a: &[T], k: usize) -> Inhibition<T> {
    let mut pos: Vec<usize> = (0..a.len()).filter(|&i| a[i] > T::zero()).collect();
    pos.sort_by(|&i, &j| a[j].partial_cmp(&a[i]).unwrap().then(i.cmp(&j)));
    let inhibition = pos.get(k).map_or(T::zero(), |&j| a[j]);
    pos.truncate(k);
    pos.sort_unstable();
    let mut a_star = vec![T::zero(); a.len()];
    for &i in &pos {
        a_star[i] = a[i];
    }
    Inhibition {
        a_star,
        inhibition,
        runner_up: None,
        active: pos,
    }
}

/// `a*_i = [a_i − λ_i·I]₊` with `I` the (k_target+1)-th largest of `[a]₊` and
/// λ from each neuron's activation count. Does not modify the counters.
pub fn gaba_inhibit<T: Real>(a: &[T], k: usize, s: f64, counters: &[u64]) -> (Inhibition<T>, Vec<T>) {
    let runner_up = runner_up_index(a, k);
    let inhibition = runner_up.map_or(T::zero(), |j| a[j]);
    let lambdas: Vec<T> = counters.iter().map(|&c| T::of(gaba_lambda(c, s))).collect();
    let a_star: Vec<T> = a
        .iter()
        .zip(&lambdas)
        .map(|(&v, &l)| (v - l * inhibition).max(T::zero()))
        .collect();
    let active = positive_support(&a_star);
    (
        Inhibition {
            a_star,
            inhibition,
            runner_up,
            active,
        },
        lambdas,
    )
}

/// GABA-switch inhibition for one sample; increments the counter of every
/// neuron left active.
pub fn gaba_forward<T: Real>(a: &[T], cfg: &TopKConfig, counters: &mut [u64]) -> Inhibition<T> {
    let (inh, _) = gaba_inhibit(a, cfg.k_target, cfg.s, counters);
    for &i in &inh.active {
        counters[i] += 1;
    }
    inh
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Skip clamping weights to be nonnegative.
    pub allow_negative_weights: bool,
    /// Skip L2 normalization of inputs and neuron addresses.
    pub disable_l2_norm: bool,
    pub hidden_bias: bool,
    pub output_bias: bool,
}

impl Ablations {
    fn bits(self) -> u32 {
        self.allow_negative_weights as u32
            | (self.disable_l2_norm as u32) << 1
            | (self.hidden_bias as u32) << 2
            | (self.output_bias as u32) << 3
    }

    fn from_bits(bits: u32) -> Self {
        Self {
            allow_negative_weights: bits & 1 != 0,
            disable_l2_norm: bits & 2 != 0,
            hidden_bias: bits & 4 != 0,
            output_bias: bits & 8 != 0,
        }
    }
}

/// An address column that was all zero after clamping and got re-randomized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadColumnEvent {
    pub epoch: usize,
    pub column: usize,
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub x_hat: Vec<T>,
    /// Indices of the nonzero entries of `x_hat`.
    pub nonzero: Vec<usize>,
    pub a: Vec<T>,
    pub inhibition: T,
    pub runner_up: Option<usize>,
    pub active: Vec<usize>,
    pub a_star: Vec<T>,
    pub logits: Vec<T>,
    pub k: usize,
    /// Per-neuron λ in GABA mode.
    pub lambdas: Option<Vec<T>>,
    version: u64,
}

/// Gradient accumulator with the model's parameter layout. Tracks which
/// address columns received gradient so clearing and SGD can skip the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct SdmlpGradients<T> {
    pub x_a: DenseMatrix<T>,
    pub x_v: DenseMatrix<T>,
    pub hidden_bias: Option<Vec<T>>,
    pub output_bias: Option<Vec<T>>,
    touched: Vec<bool>,
    touched_list: Vec<usize>,
    all_touched: bool,
}

impl<T: Real> SdmlpGradients<T> {
    fn zeros_like(model: &SdmlpModel<T>) -> Self {
        Self {
            x_a: DenseMatrix::zeros(model.n, model.r),
            x_v: DenseMatrix::zeros(model.o, model.r),
            hidden_bias: model.hidden_bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            output_bias: model.output_bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            touched: vec![false; model.r],
            touched_list: Vec::new(),
            all_touched: false,
        }
    }

    fn touch(&mut self, j: usize) {
        if !self.touched[j] {
            self.touched[j] = true;
            self.touched_list.push(j);
        }
    }

    /// Address columns with (possibly) nonzero gradient.
    pub fn touched_columns(&self) -> &[usize] {
        &self.touched_list
    }

    pub fn mark_all_touched(&mut self) {
        self.all_touched = true;
    }

    pub fn is_dense(&self) -> bool {
        self.all_touched
    }

    pub fn clear(&mut self) {
        if self.all_touched {
            self.x_a.as_mut_slice().fill(T::zero());
        } else {
            let cols = self.x_a.cols();
            let data = self.x_a.as_mut_slice();
            for row in data.chunks_exact_mut(cols) {
                for &j in &self.touched_list {
                    row[j] = T::zero();
                }
            }
        }
        for &j in &self.touched_list {
            self.touched[j] = false;
        }
        self.touched_list.clear();
        self.all_touched = false;
        self.x_v.as_mut_slice().fill(T::zero());
        for b in [&mut self.hidden_bias, &mut self.output_bias].into_iter().flatten() {
            b.fill(T::zero());
        }
    }

    /// Flat views in the same order as [`SdmlpModel::param_groups`].
    pub fn groups(&self) -> Vec<&[T]> {
        let mut g = vec![self.x_a.as_slice(), self.x_v.as_slice()];
        g.extend(self.hidden_bias.as_deref());
        g.extend(self.output_bias.as_deref());
        g
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut g = vec![self.x_a.as_mut_slice(), self.x_v.as_mut_slice()];
        g.extend(self.hidden_bias.as_deref_mut());
        g.extend(self.output_bias.as_deref_mut());
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub train_accuracy: f64,
    pub k: usize,
    pub steps: usize,
    pub dead_column_resets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdmlpModel<T> {
    n: usize,
    r: usize,
    o: usize,
    x_a: DenseMatrix<T>,
    x_v: DenseMatrix<T>,
    hidden_bias: Option<Vec<T>>,
    output_bias: Option<Vec<T>>,
    topk: TopKConfig,
    ablations: Ablations,
    counters: Vec<u64>,
    epoch: usize,
    seed: u64,
    resets: u64,
    reset_log: Vec<DeadColumnEvent>,
    version: u64,
}

fn random_unit_column<T: Real>(rng: &mut Rng, n: usize) -> Vec<T> {
    loop {
        let col: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > ZERO_NORM {
            return col.into_iter().map(|v| T::of(v / norm)).collect();
        }
    }
}

impl<T: Real> SdmlpModel<T> {
    /// Addresses uniform in `[0, 1)` with unit columns, outputs uniform in `[0, 0.01)`.
    pub fn new(n: usize, r: usize, o: usize, topk: TopKConfig, ablations: Ablations, seed: u64) -> Result<Self> {
        topk.validate(r)?;
        let root = Rng::new(seed);
        let mut rng = root.fork(0);
        let mut x_a = DenseMatrix::zeros(n, r);
        for j in 0..r {
            x_a.set_column(j, &random_unit_column::<T>(&mut rng, n));
        }
        if ablations.disable_l2_norm {
            let scale = T::of((n as f64 / 3.0).sqrt());
            x_a.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        }
        let mut model = Self {
            n,
            r,
            o,
            x_a,
            x_v: DenseMatrix::zeros(o, r),
            hidden_bias: ablations.hidden_bias.then(|| vec![T::zero(); r]),
            output_bias: ablations.output_bias.then(|| vec![T::zero(); o]),
            topk,
            ablations,
            counters: vec![0; r],
            epoch: 0,
            seed,
            resets: 0,
            reset_log: Vec::new(),
            version: 0,
        };
        model.init_outputs(&mut root.fork(1));
        Ok(model)
    }

    /// Builds a model from explicit weights (no projection is applied).
    pub fn from_weights(
        x_a: DenseMatrix<T>,
        x_v: DenseMatrix<T>,
        topk: TopKConfig,
        ablations: Ablations,
    ) -> Result<Self> {
        if x_a.cols() != x_v.cols() {
            return Err(SdmlpError::DimensionMismatch {
                expected: x_a.cols(),
                found: x_v.cols(),
            });
        }
        let (n, r, o) = (x_a.rows(), x_a.cols(), x_v.rows());
        topk.validate(r)?;
        Ok(Self {
            n,
            r,
            o,
            x_a,
            x_v,
            hidden_bias: ablations.hidden_bias.then(|| vec![T::zero(); r]),
            output_bias: ablations.output_bias.then(|| vec![T::zero(); o]),
            topk,
            ablations,
            counters: vec![0; r],
            epoch: 0,
            seed: 0,
            resets: 0,
            reset_log: Vec::new(),
            version: 0,
        })
    }

    fn init_outputs(&mut self, rng: &mut Rng) {
        for v in self.x_v.as_mut_slice() {
            *v = T::of(rng.uniform() * 0.01);
        }
        if let Some(b) = &mut self.output_bias {
            b.fill(T::zero());
        }
        self.version += 1;
    }

    /// Fresh output weights, as at the boundary between pretraining and continual tasks.
    pub fn reset_output_weights(&mut self) {
        let mut rng = Rng::new(self.seed).fork(2 + self.epoch as u64);
        self.init_outputs(&mut rng);
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn o(&self) -> usize {
        self.o
    }

    pub fn x_a(&self) -> &DenseMatrix<T> {
        &self.x_a
    }

    pub fn x_v(&self) -> &DenseMatrix<T> {
        &self.x_v
    }

    pub fn x_a_mut(&mut self) -> &mut DenseMatrix<T> {
        self.version += 1;
        &mut self.x_a
    }

    pub fn x_v_mut(&mut self) -> &mut DenseMatrix<T> {
        self.version += 1;
        &mut self.x_v
    }

    pub fn hidden_bias(&self) -> Option<&[T]> {
        self.hidden_bias.as_deref()
    }

    pub fn output_bias(&self) -> Option<&[T]> {
        self.output_bias.as_deref()
    }

    pub fn topk(&self) -> &TopKConfig {
        &self.topk
    }

    pub fn ablations(&self) -> Ablations {
        self.ablations
    }

    pub fn gaba_counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.version += 1;
    }

    pub fn dead_column_events(&self) -> &[DeadColumnEvent] {
        &self.reset_log
    }

    /// The k in force for the current epoch.
    pub fn current_k(&self) -> usize {
        match self.topk.mode {
            TopKMode::AnnealSubtract | TopKMode::AnnealMask => anneal_k(self.epoch, &self.topk),
            TopKMode::GabaSwitch | TopKMode::FixedSubtract => self.topk.k_target,
        }
    }

    pub fn param_groups(&self) -> Vec<&[T]> {
        let mut g = vec![self.x_a.as_slice(), self.x_v.as_slice()];
        g.extend(self.hidden_bias.as_deref());
        g.extend(self.output_bias.as_deref());
        g
    }

    pub fn gradients(&self) -> SdmlpGradients<T> {
        SdmlpGradients::zeros_like(self)
    }

    /// Normalized input and pre-activations.
    fn preactivations(&self, x: &[T]) -> Result<(Vec<T>, Vec<usize>, Vec<T>)> {
        if x.len() != self.n {
            return Err(SdmlpError::DimensionMismatch {
                expected: self.n,
                found: x.len(),
            });
        }
        let x_hat = if self.ablations.disable_l2_norm {
            x.to_vec()
        } else {
            crate::numerics::l2_normalize(x)?.into_inner()
        };
        let nonzero: Vec<usize> = (0..self.n).filter(|&i| x_hat[i] != T::zero()).collect();
        let mut a = match &self.hidden_bias {
            Some(b) => b.clone(),
            None => vec![T::zero(); self.r],
        };
        for &i in &nonzero {
            crate::numerics::axpy(x_hat[i], self.x_a.row(i), &mut a);
        }
        Ok((x_hat, nonzero, a))
    }

    pub fn forward(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        let (x_hat, nonzero, a) = self.preactivations(x)?;
        let k = self.current_k();
        let (inh, lambdas) = match self.topk.mode {
            TopKMode::AnnealSubtract | TopKMode::FixedSubtract => (topk_subtract(&a, k), None),
            TopKMode::AnnealMask => (topk_mask(&a, k), None),
            TopKMode::GabaSwitch => {
                let (inh, l) = gaba_inhibit(&a, k, self.topk.s, &self.counters);
                (inh, Some(l))
            }
        };
        let mut logits = match &self.output_bias {
            Some(b) => b.clone(),
            None => vec![T::zero(); self.o],
        };
        for (c, y) in logits.iter_mut().enumerate() {
            let row = self.x_v.row(c);
            for &j in &inh.active {
                *y += row[j] * inh.a_star[j];
            }
        }
        Ok(ForwardTrace {
            x_hat,
            nonzero,
            a,
            inhibition: inh.inhibition,
            runner_up: inh.runner_up,
            active: inh.active,
            a_star: inh.a_star,
            logits,
            k,
            lambdas,
            version: self.version,
        })
    }

    pub fn predict(&self, x: &[T]) -> Result<usize> {
        Ok(crate::numerics::argmax(&self.forward(x)?.logits))
    }

    pub fn loss(&self, x: &[T], target: usize) -> Result<T> {
        let trace = self.forward(x)?;
        Ok(cross_entropy(&softmax(&trace.logits)?, target)?)
    }

    /// Gradient of the loss with respect to the pre-activations, as sparse
    /// `(unit, value)` pairs: the active set plus the runner-up when the
    /// inhibition path is differentiated.
    pub fn hidden_deltas(&self, trace: &ForwardTrace<T>, dy: &[T]) -> Vec<(usize, T)> {
        let mut delta: Vec<(usize, T)> = Vec::with_capacity(trace.active.len() + 1);
        let mut through_inhibition = T::zero();
        for &j in &trace.active {
            let mut d = T::zero();
            for (c, &dc) in dy.iter().enumerate() {
                d += self.x_v[(c, j)] * dc;
            }
            let lambda = trace.lambdas.as_ref().map_or(T::one(), |l| l[j]);
            through_inhibition += lambda * d;
            delta.push((j, d));
        }
        let subtracts = !matches!(self.topk.mode, TopKMode::AnnealMask);
        if subtracts && !self.topk.detach_inhibition {
            if let Some(j) = trace.runner_up {
                match delta.iter_mut().find(|(i, _)| *i == j) {
                    Some((_, d)) => *d -= through_inhibition,
                    None => delta.push((j, -through_inhibition)),
                }
            }
        }
        delta
    }

    /// Adds `scale ×` the gradient of a loss whose derivative with respect to
    /// the logits is `dy` into `grads`.
    pub fn accumulate_backward(
        &self,
        trace: &ForwardTrace<T>,
        dy: &[T],
        scale: T,
        grads: &mut SdmlpGradients<T>,
    ) -> Result<()> {
        if trace.version != self.version {
            return Err(SdmlpError::StaleTrace);
        }
        if dy.len() != self.o {
            return Err(SdmlpError::DimensionMismatch {
                expected: self.o,
                found: dy.len(),
            });
        }
        let dy: Vec<T> = dy.iter().map(|&v| v * scale).collect();
        for (c, &d) in dy.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            let row = grads.x_v.row_mut(c);
            for &j in &trace.active {
                row[j] += d * trace.a_star[j];
            }
        }
        if let Some(b) = &mut grads.output_bias {
            for (g, &d) in b.iter_mut().zip(&dy) {
                *g += d;
            }
        }
        let delta = self.hidden_deltas(trace, &dy);
        if let Some(b) = &mut grads.hidden_bias {
            for &(j, d) in &delta {
                b[j] += d;
            }
        }
        for &(j, _) in &delta {
            grads.touch(j);
        }
        for &i in &trace.nonzero {
            let xi = trace.x_hat[i];
            let row = grads.x_a.row_mut(i);
            for &(j, d) in &delta {
                row[j] += xi * d;
            }
        }
        Ok(())
    }

    /// Cross-entropy gradients for one sample.
    pub fn backward(&self, trace: &ForwardTrace<T>, target: usize) -> Result<SdmlpGradients<T>> {
        let dy = ce_output_grad(&trace.logits, target, T::one())?;
        let mut grads = self.gradients();
        self.accumulate_backward(trace, &dy, T::one(), &mut grads)?;
        Ok(grads)
    }

    fn project_column(&mut self, j: usize, clamp: bool, normalize: bool) -> bool {
        let mut sq = T::zero();
        for i in 0..self.n {
            let v = &mut self.x_a[(i, j)];
            if clamp && *v < T::zero() {
                *v = T::zero();
            }
            sq += *v * *v;
        }
        if !normalize {
            return false;
        }
        let norm = sq.sqrt();
        if norm.as_f64() <= ZERO_NORM {
            let mut rng = Rng::new(self.seed).fork(1_000_000 + self.resets);
            self.resets += 1;
            let col = random_unit_column::<T>(&mut rng, self.n);
            self.x_a.set_column(j, &col);
            self.reset_log.push(DeadColumnEvent {
                epoch: self.epoch,
                column: j,
            });
            return true;
        }
        if (norm - T::one()).abs() > T::epsilon() * T::of(8.0) {
            for i in 0..self.n {
                self.x_a[(i, j)] /= norm;
            }
        }
        false
    }

    fn project_columns(&mut self, columns: Option<&[usize]>) -> usize {
        let clamp = !self.ablations.allow_negative_weights;
        let normalize = !self.ablations.disable_l2_norm;
        let mut resets = 0;
        match columns {
            Some(cols) => {
                for &j in cols {
                    resets += self.project_column(j, clamp, normalize) as usize;
                }
            }
            None if !normalize => {
                if clamp {
                    self.x_a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()));
                }
            }
            None => {
                if clamp {
                    self.x_a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()));
                }
                let norms = self.x_a.column_norms();
                let dead: Vec<usize> = (0..self.r).filter(|&j| norms[j].as_f64() <= ZERO_NORM).collect();
                let tol = T::epsilon() * T::of(8.0);
                let inv: Vec<T> = norms
                    .iter()
                    .map(|&v| {
                        if v.as_f64() > ZERO_NORM && (v - T::one()).abs() > tol {
                            T::one() / v
                        } else {
                            T::one()
                        }
                    })
                    .collect();
                let cols = self.r;
                for row in self.x_a.as_mut_slice().chunks_exact_mut(cols) {
                    for (v, &s) in row.iter_mut().zip(&inv) {
                        *v *= s;
                    }
                }
                for j in dead {
                    resets += self.project_column(j, clamp, normalize) as usize;
                }
            }
        }
        if clamp {
            self.x_v.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        self.version += 1;
        resets
    }

    /// Clamps both weight matrices to be nonnegative and rescales address
    /// columns to unit norm (each step skipped under the matching ablation).
    /// All-zero address columns are re-randomized; returns how many.
    pub fn project_weights(&mut self) -> usize {
        self.project_columns(None)
    }

    /// Checks the projection invariants; returns the worst column-norm error
    /// and the smallest weight.
    pub fn projection_report(&self) -> (f64, f64) {
        let norm_err = self
            .x_a
            .column_norms()
            .into_iter()
            .map(|v| (v.as_f64() - 1.0).abs())
            .fold(0.0, f64::max);
        let min = self.x_a.min_entry().min(self.x_v.min_entry()).as_f64();
        (norm_err, min)
    }

    /// Applies one optimizer step with the accumulated gradients, then projects.
    pub fn apply_gradients(&mut self, grads: &SdmlpGradients<T>, opt: &mut Optimizer<T>) -> Result<usize> {
        opt.begin_step();
        let sparse_path = opt.skips_zero_gradients() && !grads.is_dense();
        if sparse_path {
            opt.step_group_columns(
                0,
                self.x_a.as_mut_slice(),
                grads.x_a.as_slice(),
                self.r,
                grads.touched_columns(),
            )?;
        } else {
            opt.step_group(0, self.x_a.as_mut_slice(), grads.x_a.as_slice())?;
        }
        opt.step_group(1, self.x_v.as_mut_slice(), grads.x_v.as_slice())?;
        let mut group = 2;
        if let (Some(p), Some(g)) = (&mut self.hidden_bias, &grads.hidden_bias) {
            opt.step_group(group, p, g)?;
            group += 1;
        }
        if let (Some(p), Some(g)) = (&mut self.output_bias, &grads.output_bias) {
            opt.step_group(group, p, g)?;
        }
        let touched: Vec<usize> = grads.touched_columns().to_vec();
        Ok(if sparse_path {
            self.project_columns(Some(&touched))
        } else {
            self.project_columns(None)
        })
    }

    /// One pass over `data` in shuffled mini-batches. Gradients are averaged
    /// over each batch. GABA counters are updated after each batch.
    pub fn train_epoch(
        &mut self,
        data: &LabeledDataset<T>,
        opt: &mut Optimizer<T>,
        batch_size: usize,
        rng: &mut Rng,
        mut hook: Option<&mut dyn StepHook<T>>,
    ) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(SdmlpError::EmptyData);
        }
        if data.dim() != self.n {
            return Err(SdmlpError::DimensionMismatch {
                expected: self.n,
                found: data.dim(),
            });
        }
        let batch_size = batch_size.max(1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut grads = self.gradients();
        let mut pending = vec![0u64; self.r];
        let gaba = self.topk.mode == TopKMode::GabaSwitch;
        let (mut loss, mut correct, mut steps, mut resets) = (0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(batch_size) {
            grads.clear();
            let scale = T::one() / T::of(batch.len() as f64);
            for &i in batch {
                let (x, y) = data.sample(i);
                if y >= self.o {
                    return Err(SdmlpError::TargetOutOfRange {
                        target: y,
                        classes: self.o,
                    });
                }
                let trace = self.forward(x)?;
                let probs = softmax(&trace.logits)?;
                loss += cross_entropy(&probs, y)?.as_f64();
                correct += (crate::numerics::argmax(&trace.logits) == y) as usize;
                let mut dy = probs.into_inner();
                dy[y] -= T::one();
                self.accumulate_backward(&trace, &dy, scale, &mut grads)?;
                if gaba {
                    for &j in &trace.active {
                        pending[j] += 1;
                    }
                }
            }
            if let Some(h) = hook.as_deref_mut() {
                grads.mark_all_touched();
                let params = self.param_groups();
                let mut g = grads.groups_mut();
                h.before_step(&params, &mut g);
            }
            resets += self.apply_gradients(&grads, opt)?;
            if let Some(h) = hook.as_deref_mut() {
                h.after_step(&self.param_groups());
            }
            if gaba {
                for (c, p) in self.counters.iter_mut().zip(pending.iter_mut()) {
                    *c += *p;
                    *p = 0;
                }
            }
            steps += 1;
        }
        let k = self.current_k();
        self.epoch += 1;
        self.version += 1;
        Ok(EpochStats {
            loss: loss / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            k,
            steps,
            dead_column_resets: resets,
        })
    }

    pub fn accuracy(&self, data: &LabeledDataset<T>) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for i in 0..data.len() {
            let (x, y) = data.sample(i);
            correct += (self.predict(x)? == y) as usize;
        }
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = [
            self.n as u32,
            self.r as u32,
            self.o as u32,
            self.topk.mode.tag(),
            self.topk.k_target as u32,
            self.topk.k_max as u32,
            self.topk.detach_inhibition as u32,
            self.epoch as u32,
            self.ablations.bits(),
        ];
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.topk.s.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.resets.to_le_bytes())?;
        for m in [&self.x_a, &self.x_v] {
            for v in m.as_slice() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        for c in &self.counters {
            w.write_all(&c.to_le_bytes())?;
        }
        for b in [&self.hidden_bias, &self.output_bias].into_iter().flatten() {
            for v in b {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(SdmlpError::BadCheckpoint("bad magic".into()));
        }
        let mut u32s = [0u32; 9];
        for v in &mut u32s {
            *v = u32::from_le_bytes(read_array(&mut r)?);
        }
        let [n, rr, o, mode, k_target, k_max, detach, epoch, bits] = u32s.map(|v| v as usize);
        let mode = TopKMode::from_tag(mode as u32)
            .ok_or_else(|| SdmlpError::BadCheckpoint(format!("unknown mode tag {mode}")))?;
        let s = f64::from_le_bytes(read_array(&mut r)?);
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let resets = u64::from_le_bytes(read_array(&mut r)?);
        let topk = TopKConfig {
            k_target,
            k_max,
            s,
            mode,
            detach_inhibition: detach != 0,
        };
        topk.validate(rr)
            .map_err(|e| SdmlpError::BadCheckpoint(e.to_string()))?;
        let ablations = Ablations::from_bits(bits as u32);
        let read_f64s = |r: &mut R, len: usize| -> Result<Vec<T>> {
            (0..len)
                .map(|_| Ok(T::of(f64::from_le_bytes(read_array(r)?))))
                .collect()
        };
        let x_a = DenseMatrix::from_vec(n, rr, read_f64s(&mut r, n * rr)?)?;
        let x_v = DenseMatrix::from_vec(o, rr, read_f64s(&mut r, o * rr)?)?;
        let counters = (0..rr)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?)))
            .collect::<Result<Vec<u64>>>()?;
        let hidden_bias = if ablations.hidden_bias {
            Some(read_f64s(&mut r, rr)?)
        } else {
            None
        };
        let output_bias = if ablations.output_bias {
            Some(read_f64s(&mut r, o)?)
        } else {
            None
        };
        Ok(Self {
            n,
            r: rr,
            o,
            x_a,
            x_v,
            hidden_bias,
            output_bias,
            topk,
            ablations,
            counters,
            epoch,
            seed,
            resets,
            reset_log: Vec::new(),
            version: 0,
        })
    }
}

fn truncated(e: io::Error) -> SdmlpError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        SdmlpError::BadCheckpoint("truncated".into())
    } else {
        SdmlpError::Io(e)
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

/// Derivative of `−ln softmax(β·y)[target]` with respect to `y`.
pub fn ce_output_grad<T: Real>(logits: &[T], target: usize, beta: T) -> Result<Vec<T>> {
    if target >= logits.len() {
        return Err(SdmlpError::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    let mut p = crate::numerics::softmax_beta(logits, beta)?.into_inner();
    p[target] -= T::one();
    for v in &mut p {
        *v *= beta;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k_target: usize, k_max: usize, s: f64, mode: TopKMode) -> TopKConfig {
        TopKConfig {
            k_target,
            k_max,
            s,
            mode,
            detach_inhibition: false,
        }
    }

    #[test]
    fn anneal_hand_values() {
        let c = TopKConfig::annealed(10, 1000, 100.0);
        assert_eq!(anneal_k(0, &c), 1000);
        assert_eq!(anneal_k(50, &c), 505);
        assert_eq!(anneal_k(100, &c), 10);
        assert_eq!(anneal_k(1_000, &c), 10);
    }

    #[test]
    fn subtract_hand_values() {
        let out = topk_subtract(&[0.9f64, 0.5, 0.3, 0.1], 2);
        assert_eq!(out.inhibition, 0.3);
        assert_eq!(out.runner_up, Some(2));
        assert!((out.a_star[0] - 0.6).abs() < 1e-15 && (out.a_star[1] - 0.2).abs() < 1e-15);
        assert_eq!(&out.a_star[2..], &[0.0, 0.0]);
        assert_eq!(out.active, vec![0, 1]);

        let few = topk_subtract(&[0.9f64, -0.2], 3);
        assert_eq!((few.inhibition, few.runner_up), (0.0, None));
        assert_eq!(few.a_star, vec![0.9, 0.0]);

        let zeros = topk_subtract(&[0.0f64; 4], 1);
        assert!(zeros.active.is_empty());
    }

    #[test]
    fn tie_at_runner_up_silences_all_tied_units() {
        let out = topk_subtract(&[0.7f64, 0.5, 0.5, 0.1], 1);
        assert_eq!(out.active, vec![0]);
        let out = topk_subtract(&[0.5f64, 0.5, 0.5], 1);
        assert!(out.active.is_empty());
    }

    #[test]
    fn mask_hand_values() {
        assert_eq!(topk_mask(&[0.9f64, 0.5, 0.3, 0.1], 2).a_star, vec![0.9, 0.5, 0.0, 0.0]);
        assert_eq!(topk_mask(&[0.9f64, -0.5, 0.3], 5).a_star, vec![0.9, 0.0, 0.3]);
        assert!(topk_mask(&[-0.9f64, -0.5], 1).active.is_empty());
    }

    #[test]
    fn gaba_lambda_values() {
        assert_eq!(gaba_lambda(0, 100.0), -1.0);
        assert_eq!(gaba_lambda(50, 100.0), 0.0);
        assert_eq!(gaba_lambda(100, 100.0), 1.0);
        assert_eq!(gaba_lambda(1000, 100.0), 1.0);
    }

    #[test]
    fn gaba_switched_neurons_match_subtract() {
        let a = [0.9f64, 0.5, 0.3, 0.1];
        let c = cfg(2, 4, 10.0, TopKMode::GabaSwitch);
        let mut counters = vec![10u64; 4];
        let g = gaba_forward(&a, &c, &mut counters);
        assert_eq!(g.a_star, topk_subtract(&a, 2).a_star);
        assert_eq!(counters, vec![11, 11, 10, 10]);

        let mut fresh = vec![0u64; 4];
        let g = gaba_forward(&a, &c, &mut fresh);
        assert!((g.a_star[3] - 0.4).abs() < 1e-15);
        assert_eq!(fresh, vec![1; 4]);

        let mut half = vec![5u64; 4];
        let g = gaba_forward(&a, &c, &mut half);
        assert_eq!(g.a_star, a.to_vec());
    }

    fn aligned_model() -> SdmlpModel<f64> {
        let x_a =
            DenseMatrix::<f64>::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let x_v = DenseMatrix::<f64>::from_rows(&[vec![2.0, 0.5, 0.0], vec![1.0, 0.0, 3.0]]).unwrap();
        SdmlpModel::from_weights(x_a, x_v, cfg(1, 1, 1.0, TopKMode::FixedSubtract), Ablations::default()).unwrap()
    }

    #[test]
    fn aligned_neuron_drives_logits() {
        let m = aligned_model();
        let t = m.forward(&[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.x_hat, vec![1.0, 0.0, 0.0]);
        assert_eq!(t.active, vec![0]);
        assert_eq!(t.a_star[0], 1.0);
        assert_eq!(t.logits, vec![2.0, 1.0]);
        assert_eq!(m.forward(&[2.0, 0.0, 0.0]).unwrap(), t);
    }

    #[test]
    fn zero_input_is_rejected() {
        assert!(matches!(
            aligned_model().forward(&[0.0; 3]),
            Err(SdmlpError::Numerics(NumericsError::ZeroVector))
        ));
    }

    #[test]
    fn full_k_keeps_everything_active() {
        let m = SdmlpModel::<f64>::new(6, 5, 2, TopKConfig::annealed(1, 5, 10.0), Ablations::default(), 3).unwrap();
        let t = m.forward(&[0.1, 0.5, 0.0, 0.2, 0.9, 0.3]).unwrap();
        assert_eq!(t.k, 5);
        assert_eq!(t.inhibition, 0.0);
        assert_eq!(t.a_star, t.a);
        assert_eq!(t.active.len(), 5);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut m = aligned_model();
        let t = m.forward(&[1.0, 0.2, 0.0]).unwrap();
        m.x_v_mut()[(0, 0)] = 1.0;
        assert!(matches!(m.backward(&t, 0), Err(SdmlpError::StaleTrace)));
    }

    #[test]
    fn detached_runner_up_gets_no_gradient() {
        let mut m = aligned_model();
        m.topk = cfg(1, 3, 1.0, TopKMode::FixedSubtract);
        m.topk.detach_inhibition = true;
        let t = m.forward(&[1.0, 0.5, 0.1]).unwrap();
        assert_eq!(t.runner_up, Some(1));
        let g = m.backward(&t, 1).unwrap();
        assert_eq!(g.x_a.column(1).iter().sum::<f64>(), 0.0);
        m.topk.detach_inhibition = false;
        let t = m.forward(&[1.0, 0.5, 0.1]).unwrap();
        let g = m.backward(&t, 1).unwrap();
        assert!(g.x_a.column(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn confident_prediction_has_negligible_gradient() {
        let mut m = aligned_model();
        m.x_v_mut()[(0, 0)] = 200.0;
        let t = m.forward(&[1.0, 0.0, 0.0]).unwrap();
        let g = m.backward(&t, 0).unwrap();
        assert!(g.groups().iter().all(|s| s.iter().all(|v| v.abs() < 1e-60)));
    }

    #[test]
    fn projection_hand_values() {
        let x_a = DenseMatrix::<f64>::from_rows(&[vec![-1.0, 0.6], vec![2.0, 0.8]]).unwrap();
        let x_v = DenseMatrix::<f64>::from_rows(&[vec![-0.5, 0.25]]).unwrap();
        let mut m =
            SdmlpModel::from_weights(x_a, x_v, cfg(1, 2, 1.0, TopKMode::FixedSubtract), Ablations::default()).unwrap();
        assert_eq!(m.project_weights(), 0);
        assert_eq!(m.x_a().column(0).into_inner(), vec![0.0, 1.0]);
        assert!(m
            .x_a()
            .column(1)
            .iter()
            .zip([0.6, 0.8])
            .all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(m.x_v().as_slice(), &[0.0, 0.25]);
        let before = m.x_a().clone();
        m.project_weights();
        assert!(m.x_a().max_abs_diff(&before) < 1e-15);
    }

    #[test]
    fn negative_weight_ablation_skips_clamp() {
        let x_a = DenseMatrix::<f64>::from_rows(&[vec![-3.0], vec![4.0]]).unwrap();
        let x_v = DenseMatrix::<f64>::from_rows(&[vec![-0.5]]).unwrap();
        let abl = Ablations {
            allow_negative_weights: true,
            ..Ablations::default()
        };
        let mut m = SdmlpModel::from_weights(x_a, x_v, cfg(1, 1, 1.0, TopKMode::FixedSubtract), abl).unwrap();
        m.project_weights();
        assert!((m.x_a()[(0, 0)] + 0.6).abs() < 1e-15 && (m.x_a()[(1, 0)] - 0.8).abs() < 1e-15);
        assert_eq!(m.x_v().as_slice(), &[-0.5]);
    }

    #[test]
    fn dead_column_is_rerandomized_and_logged() {
        let x_a = DenseMatrix::<f64>::from_rows(&[vec![-1.0, 1.0], vec![-2.0, 0.0]]).unwrap();
        let x_v = DenseMatrix::<f64>::zeros(1, 2);
        let mut m =
            SdmlpModel::from_weights(x_a, x_v, cfg(1, 2, 1.0, TopKMode::FixedSubtract), Ablations::default()).unwrap();
        assert_eq!(m.project_weights(), 1);
        assert_eq!(m.dead_column_events(), &[DeadColumnEvent { epoch: 0, column: 0 }]);
        let (err, min) = m.projection_report();
        assert!(err < 1e-12 && min >= 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = SdmlpModel::<f64>::new(
            4,
            6,
            3,
            cfg(2, 6, 7.5, TopKMode::GabaSwitch),
            Ablations {
                output_bias: true,
                ..Ablations::default()
            },
            9,
        )
        .unwrap();
        m.counters[2] = 41;
        m.epoch = 3;
        m.output_bias.as_mut().unwrap()[1] = -0.25;
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..7], b"SDMLP1\n");
        let back = SdmlpModel::<f64>::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.x_a, m.x_a);
        assert_eq!(back.x_v, m.x_v);
        assert_eq!(back.counters, m.counters);
        assert_eq!(back.topk, m.topk);
        assert_eq!(back.output_bias, m.output_bias);
        assert_eq!(back.epoch, 3);
        assert!(matches!(
            SdmlpModel::<f64>::read_checkpoint(&bytes[..bytes.len() - 3]),
            Err(SdmlpError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn zero_learning_rate_only_advances_schedule() {
        use crate::optimizers::{OptimizerConfig, OptimizerKind};
        let data = toy_dataset();
        let mut m =
            SdmlpModel::<f64>::new(4, 16, 2, cfg(4, 16, 2.0, TopKMode::GabaSwitch), Ablations::default(), 1).unwrap();
        let before = (m.x_a.clone(), m.x_v.clone());
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.0)).unwrap();
        m.train_epoch(&data, &mut opt, 4, &mut Rng::new(0), None).unwrap();
        assert_eq!((m.x_a.clone(), m.x_v.clone()), before);
        assert_eq!(m.epoch(), 1);
        assert!(m.gaba_counters().iter().sum::<u64>() > 0);
    }

    #[test]
    fn full_batch_is_one_step() {
        use crate::optimizers::{OptimizerConfig, OptimizerKind};
        let data = toy_dataset();
        let mut m =
            SdmlpModel::<f64>::new(4, 16, 2, TopKConfig::annealed(4, 16, 5.0), Ablations::default(), 1).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.1)).unwrap();
        let stats = m
            .train_epoch(&data, &mut opt, data.len(), &mut Rng::new(0), None)
            .unwrap();
        assert_eq!(stats.steps, 1);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn learns_separable_toy_problem() {
        use crate::optimizers::{OptimizerConfig, OptimizerKind};
        let data = toy_dataset();
        let mut m =
            SdmlpModel::<f64>::new(4, 16, 2, TopKConfig::annealed(4, 16, 20.0), Ablations::default(), 5).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.1)).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            m.train_epoch(&data, &mut opt, 4, &mut rng, None).unwrap();
            let (err, min) = m.projection_report();
            assert!(err < COLUMN_NORM_TOL && min >= 0.0);
        }
        assert_eq!(m.accuracy(&data).unwrap(), 1.0);
    }

    /// 20 points in two clusters: class 0 leans on the first two inputs, class 1 on the last two.
    fn toy_dataset() -> LabeledDataset<f64> {
        let mut rng = Rng::new(17);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let c = i % 2;
            let mut row: Vec<f64> = (0..4).map(|_| rng.uniform() * 0.3).collect();
            row[2 * c] += 1.0;
            row[2 * c + 1] += 1.0;
            rows.push(row);
            labels.push(c);
        }
        LabeledDataset::new(DenseMatrix::from_rows(&rows).unwrap(), labels, 2, "toy").unwrap()
    }
}
