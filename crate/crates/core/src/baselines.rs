//! Comparison models: a biased one-hidden-layer MLP, quadratic importance
//! regularizers (EWC, MAS, SI, L2 to the previous task) and a
//! mushroom-body-style random-projection classifier.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::LabeledDataset;
use crate::numerics::{argmax, cross_entropy, softmax, DenseMatrix, NumericsError, Real, Rng};
use crate::optimizers::{Optimizer, OptimizerError, StepHook};
use crate::sdmlp::{ce_output_grad, topk_mask, topk_subtract, EpochStats, SdmlpError, SdmlpModel};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("class {target} out of range for {classes} outputs")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("empty dataset")]
    EmptyData,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Sdmlp(#[from] SdmlpError),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum Activation {
    Relu,
    TopKMask(usize),
    TopKSubtract(usize),
}

/// Everything computed by one MLP forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace<T> {
    pub x: Vec<T>,
    pub pre: Vec<T>,
    /// Hidden output after activation and dropout.
    pub hidden: Vec<T>,
    /// Units with nonzero activation output (before dropout).
    pub active: Vec<usize>,
    pub runner_up: Option<usize>,
    /// Inverted-dropout multiplier per unit; `None` in evaluation mode.
    pub dropout: Option<Vec<T>>,
    pub logits: Vec<T>,
}

/// Gradients laid out like [`MlpBaseline::param_groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients<T> {
    pub w_in: DenseMatrix<T>,
    pub b_in: Vec<T>,
    pub w_out: DenseMatrix<T>,
    pub b_out: Vec<T>,
}

impl<T: Real> MlpGradients<T> {
    pub fn clear(&mut self) {
        self.w_in.as_mut_slice().fill(T::zero());
        self.b_in.fill(T::zero());
        self.w_out.as_mut_slice().fill(T::zero());
        self.b_out.fill(T::zero());
    }

    pub fn groups(&self) -> Vec<&[T]> {
        vec![self.w_in.as_slice(), &self.b_in, self.w_out.as_slice(), &self.b_out]
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w_in.as_mut_slice(),
            &mut self.b_in,
            self.w_out.as_mut_slice(),
            &mut self.b_out,
        ]
    }
}

/// One-hidden-layer MLP with biases: `y = W_out f(W_inᵀ x + b_in) + b_out`.
/// `w_in` is `n × r`, `w_out` is `o × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBaseline<T> {
    pub w_in: DenseMatrix<T>,
    pub b_in: Vec<T>,
    pub w_out: DenseMatrix<T>,
    pub b_out: Vec<T>,
    pub activation: Activation,
    pub dropout_rate: f64,
    seed: u64,
}

impl<T: Real> MlpBaseline<T> {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn new(n: usize, r: usize, o: usize, activation: Activation, dropout_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(BaselineError::InvalidConfig(format!(
                "dropout rate {dropout_rate} not in [0, 1)"
            )));
        }
        if let Activation::TopKMask(k) | Activation::TopKSubtract(k) = activation {
            if k == 0 || k > r {
                return Err(BaselineError::InvalidConfig(format!("k = {k} must be in 1..={r}")));
            }
        }
        let root = Rng::new(seed);
        let mut rng = root.fork(0);
        let lim_in = 1.0 / (n as f64).sqrt();
        let lim_out = 1.0 / (r as f64).sqrt();
        let w_in = DenseMatrix::from_fn(n, r, |_, _| T::of(rng.uniform_range(-lim_in, lim_in)));
        let b_in = (0..r).map(|_| T::of(rng.uniform_range(-lim_in, lim_in))).collect();
        let mut rng = root.fork(1);
        let w_out = DenseMatrix::from_fn(o, r, |_, _| T::of(rng.uniform_range(-lim_out, lim_out)));
        let b_out = (0..o).map(|_| T::of(rng.uniform_range(-lim_out, lim_out))).collect();
        Ok(Self {
            w_in,
            b_in,
            w_out,
            b_out,
            activation,
            dropout_rate,
            seed,
        })
    }

    pub fn zeros(n: usize, r: usize, o: usize, activation: Activation) -> Self {
        Self {
            w_in: DenseMatrix::zeros(n, r),
            b_in: vec![T::zero(); r],
            w_out: DenseMatrix::zeros(o, r),
            b_out: vec![T::zero(); o],
            activation,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.w_in.rows()
    }

    pub fn r(&self) -> usize {
        self.w_in.cols()
    }

    pub fn o(&self) -> usize {
        self.w_out.rows()
    }

    pub fn param_groups(&self) -> Vec<&[T]> {
        vec![self.w_in.as_slice(), &self.b_in, self.w_out.as_slice(), &self.b_out]
    }

    pub fn gradients(&self) -> MlpGradients<T> {
        MlpGradients {
            w_in: DenseMatrix::zeros(self.n(), self.r()),
            b_in: vec![T::zero(); self.r()],
            w_out: DenseMatrix::zeros(self.o(), self.r()),
            b_out: vec![T::zero(); self.o()],
        }
    }

    /// Fresh output weights and biases.
    pub fn reset_output_weights(&mut self) {
        let mut rng = Rng::new(self.seed).fork(2);
        let lim = 1.0 / (self.r() as f64).sqrt();
        for v in self.w_out.as_mut_slice() {
            *v = T::of(rng.uniform_range(-lim, lim));
        }
        for v in &mut self.b_out {
            *v = T::of(rng.uniform_range(-lim, lim));
        }
    }

    /// Forward pass; dropout is applied only when `train_rng` is given.
    pub fn forward(&self, x: &[T], train_rng: Option<&mut Rng>) -> Result<MlpTrace<T>> {
        if x.len() != self.n() {
            return Err(BaselineError::ShapeMismatch {
                expected: self.n(),
                found: x.len(),
            });
        }
        let mut pre = self.b_in.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != T::zero() {
                crate::numerics::axpy(xi, self.w_in.row(i), &mut pre);
            }
        }
        let (mut hidden, active, runner_up) = match self.activation {
            Activation::Relu => {
                let h: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
                let active = (0..h.len()).filter(|&j| h[j] > T::zero()).collect();
                (h, active, None)
            }
            Activation::TopKMask(k) => {
                let inh = topk_mask(&pre, k);
                (inh.a_star, inh.active, None)
            }
            Activation::TopKSubtract(k) => {
                let inh = topk_subtract(&pre, k);
                (inh.a_star, inh.active, inh.runner_up)
            }
        };
        let dropout = match train_rng {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = T::of(1.0 / (1.0 - self.dropout_rate));
                let mask: Vec<T> = (0..hidden.len())
                    .map(|_| {
                        if rng.bernoulli(self.dropout_rate) {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                for (h, &m) in hidden.iter_mut().zip(&mask) {
                    *h *= m;
                }
                Some(mask)
            }
            _ => None,
        };
        let mut logits = self.b_out.clone();
        for (c, y) in logits.iter_mut().enumerate() {
            let row = self.w_out.row(c);
            for &j in &active {
                *y += row[j] * hidden[j];
            }
        }
        Ok(MlpTrace {
            x: x.to_vec(),
            pre,
            hidden,
            active,
            runner_up,
            dropout,
            logits,
        })
    }

    /// Gradient with respect to the pre-activations as `(unit, value)` pairs.
    pub fn hidden_deltas(&self, trace: &MlpTrace<T>, dy: &[T]) -> Vec<(usize, T)> {
        let mut delta = Vec::with_capacity(trace.active.len() + 1);
        let mut total = T::zero();
        for &j in &trace.active {
            let mut d = T::zero();
            for (c, &dc) in dy.iter().enumerate() {
                d += self.w_out[(c, j)] * dc;
            }
            if let Some(mask) = &trace.dropout {
                d *= mask[j];
            }
            total += d;
            delta.push((j, d));
        }
        if let Some(j) = trace.runner_up {
            delta.push((j, -total));
        }
        delta
    }

    /// Adds `scale ×` the parameter gradient for output derivative `dy` into `grads`.
    pub fn accumulate_backward(
        &self,
        trace: &MlpTrace<T>,
        dy: &[T],
        scale: T,
        grads: &mut MlpGradients<T>,
    ) -> Result<()> {
        if dy.len() != self.o() {
            return Err(BaselineError::ShapeMismatch {
                expected: self.o(),
                found: dy.len(),
            });
        }
        let dy: Vec<T> = dy.iter().map(|&v| v * scale).collect();
        for (c, &d) in dy.iter().enumerate() {
            grads.b_out[c] += d;
            let row = grads.w_out.row_mut(c);
            for &j in &trace.active {
                row[j] += d * trace.hidden[j];
            }
        }
        let delta = self.hidden_deltas(trace, &dy);
        for &(j, d) in &delta {
            grads.b_in[j] += d;
        }
        for (i, &xi) in trace.x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let row = grads.w_in.row_mut(i);
            for &(j, d) in &delta {
                row[j] += xi * d;
            }
        }
        Ok(())
    }

    /// Cross-entropy gradients for one sample.
    pub fn backward(&self, trace: &MlpTrace<T>, target: usize) -> Result<MlpGradients<T>> {
        let dy = ce_output_grad(&trace.logits, target, T::one())?;
        let mut grads = self.gradients();
        self.accumulate_backward(trace, &dy, T::one(), &mut grads)?;
        Ok(grads)
    }

    pub fn apply_gradients(&mut self, grads: &MlpGradients<T>, opt: &mut Optimizer<T>) -> Result<()> {
        opt.begin_step();
        opt.step_group(0, self.w_in.as_mut_slice(), grads.w_in.as_slice())?;
        opt.step_group(1, &mut self.b_in, &grads.b_in)?;
        opt.step_group(2, self.w_out.as_mut_slice(), grads.w_out.as_slice())?;
        opt.step_group(3, &mut self.b_out, &grads.b_out)?;
        Ok(())
    }

    pub fn train_epoch(
        &mut self,
        data: &LabeledDataset<T>,
        opt: &mut Optimizer<T>,
        batch_size: usize,
        rng: &mut Rng,
        mut hook: Option<&mut dyn StepHook<T>>,
    ) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(BaselineError::EmptyData);
        }
        if data.dim() != self.n() {
            return Err(BaselineError::ShapeMismatch {
                expected: self.n(),
                found: data.dim(),
            });
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut drop_rng = rng.fork(7);
        let mut grads = self.gradients();
        let (mut loss, mut correct, mut steps) = (0.0, 0usize, 0usize);
        for batch in order.chunks(batch_size.max(1)) {
            grads.clear();
            let scale = T::one() / T::of(batch.len() as f64);
            for &i in batch {
                let (x, y) = data.sample(i);
                if y >= self.o() {
                    return Err(BaselineError::TargetOutOfRange {
                        target: y,
                        classes: self.o(),
                    });
                }
                let trace = self.forward(x, Some(&mut drop_rng))?;
                let probs = softmax(&trace.logits)?;
                loss += cross_entropy(&probs, y)?.as_f64();
                correct += (argmax(&trace.logits) == y) as usize;
                let mut dy = probs.into_inner();
                dy[y] -= T::one();
                self.accumulate_backward(&trace, &dy, scale, &mut grads)?;
            }
            if let Some(h) = hook.as_deref_mut() {
                let params = self.param_groups();
                h.before_step(&params, &mut grads.groups_mut());
            }
            self.apply_gradients(&grads, opt)?;
            if let Some(h) = hook.as_deref_mut() {
                h.after_step(&self.param_groups());
            }
            steps += 1;
        }
        let k = match self.activation {
            Activation::Relu => self.r(),
            Activation::TopKMask(k) | Activation::TopKSubtract(k) => k,
        };
        Ok(EpochStats {
            loss: loss / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            k,
            steps,
            dead_column_resets: 0,
        })
    }

    pub fn predict(&self, x: &[T]) -> Result<usize> {
        Ok(argmax(&self.forward(x, None)?.logits))
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
}

/// Models whose per-sample parameter gradients can be enumerated sparsely.
pub trait GradientModel<T: Real> {
    fn param_groups(&self) -> Vec<&[T]>;

    fn logits(&self, x: &[T]) -> Result<Vec<T>>;

    /// Calls `visit(group, index, value)` for every possibly-nonzero entry of
    /// the gradient of a loss whose derivative with respect to the logits is
    /// `output_grad(logits)`. Runs in evaluation mode.
    fn visit_gradient(
        &self,
        x: &[T],
        output_grad: &dyn Fn(&[T]) -> Result<Vec<T>>,
        visit: &mut dyn FnMut(usize, usize, T),
    ) -> Result<()>;
}

impl<T: Real> GradientModel<T> for MlpBaseline<T> {
    fn param_groups(&self) -> Vec<&[T]> {
        MlpBaseline::param_groups(self)
    }

    fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(x, None)?.logits)
    }

    fn visit_gradient(
        &self,
        x: &[T],
        output_grad: &dyn Fn(&[T]) -> Result<Vec<T>>,
        visit: &mut dyn FnMut(usize, usize, T),
    ) -> Result<()> {
        let trace = self.forward(x, None)?;
        let dy = output_grad(&trace.logits)?;
        let r = self.r();
        for (c, &d) in dy.iter().enumerate() {
            visit(3, c, d);
            for &j in &trace.active {
                visit(2, c * r + j, d * trace.hidden[j]);
            }
        }
        let delta = self.hidden_deltas(&trace, &dy);
        for &(j, d) in &delta {
            visit(1, j, d);
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi != T::zero() {
                for &(j, d) in &delta {
                    visit(0, i * r + j, xi * d);
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> GradientModel<T> for SdmlpModel<T> {
    fn param_groups(&self) -> Vec<&[T]> {
        SdmlpModel::param_groups(self)
    }

    fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(x)?.logits)
    }

    fn visit_gradient(
        &self,
        x: &[T],
        output_grad: &dyn Fn(&[T]) -> Result<Vec<T>>,
        visit: &mut dyn FnMut(usize, usize, T),
    ) -> Result<()> {
        let trace = self.forward(x)?;
        let dy = output_grad(&trace.logits)?;
        let r = self.r();
        for (c, &d) in dy.iter().enumerate() {
            for &j in &trace.active {
                visit(1, c * r + j, d * trace.a_star[j]);
            }
        }
        let delta = self.hidden_deltas(&trace, &dy);
        let mut group = 2;
        if self.hidden_bias().is_some() {
            for &(j, d) in &delta {
                visit(group, j, d);
            }
            group += 1;
        }
        if self.output_bias().is_some() {
            for (c, &d) in dy.iter().enumerate() {
                visit(group, c, d);
            }
        }
        for &i in &trace.nonzero {
            let xi = trace.x_hat[i];
            for &(j, d) in &delta {
                visit(0, i * r + j, xi * d);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    Ewc,
    Mas,
    Si,
    #[serde(alias = "l2anchor")]
    L2,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ewc => "ewc",
            Self::Mas => "mas",
            Self::Si => "si",
            Self::L2 => "l2",
        }
    }
}

pub const SI_DAMPING: f64 = 1e-3;

/// Per-parameter importance of the current model on `data`.
///
/// EWC: mean squared gradient of `−ln softmax(β·y)[label]`.
/// MAS: mean absolute gradient of `‖y‖²` (labels unused).
/// SI and L2 are not data-driven and yield zeros here.
pub fn estimate_importance<T: Real, M: GradientModel<T> + ?Sized>(
    kind: RegularizerKind,
    model: &M,
    data: &LabeledDataset<T>,
    beta: f64,
) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Err(BaselineError::EmptyData);
    }
    let mut acc: Vec<Vec<f64>> = model.param_groups().iter().map(|g| vec![0.0; g.len()]).collect();
    if matches!(kind, RegularizerKind::Si | RegularizerKind::L2) {
        return Ok(acc);
    }
    // entries of one sample's gradient can repeat (bias rows); sum them first
    let mut scratch: Vec<Vec<f64>> = acc.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut touched: Vec<(usize, usize)> = Vec::new();
    let beta_t = T::of(beta);
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        let out: Box<dyn Fn(&[T]) -> Result<Vec<T>>> = match kind {
            RegularizerKind::Ewc => Box::new(move |logits: &[T]| Ok(ce_output_grad(logits, y, beta_t)?)),
            _ => Box::new(|logits: &[T]| Ok(logits.iter().map(|&v| v + v).collect())),
        };
        model.visit_gradient(x, out.as_ref(), &mut |g, idx, v| {
            if scratch[g][idx] == 0.0 {
                touched.push((g, idx));
            }
            scratch[g][idx] += v.as_f64();
        })?;
        for &(g, idx) in &touched {
            let v = scratch[g][idx];
            acc[g][idx] += match kind {
                RegularizerKind::Ewc => v * v,
                _ => v.abs(),
            };
            scratch[g][idx] = 0.0;
        }
        touched.clear();
    }
    let inv = 1.0 / data.len() as f64;
    for g in &mut acc {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(acc)
}

/// Quadratic penalty `λ Σ Ωᵢ (θᵢ − θ*ᵢ)²` with importance accumulated across
/// task boundaries and the anchor moved to the latest boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub kind: RegularizerKind,
    pub strength: f64,
    /// Softmax temperature used only when estimating EWC importance.
    pub beta: f64,
    pub damping: f64,
    pub omega: Vec<Vec<f64>>,
    pub anchor: Option<Vec<Vec<f64>>>,
    path: Vec<Vec<f64>>,
    task_start: Vec<Vec<f64>>,
    pending_grads: Vec<Vec<f64>>,
    prev_params: Vec<Vec<f64>>,
    boundaries: usize,
}

fn to_f64<T: Real>(groups: &[&[T]]) -> Vec<Vec<f64>> {
    groups.iter().map(|g| g.iter().map(|v| v.as_f64()).collect()).collect()
}

impl ImportanceState {
    pub fn new<T: Real>(kind: RegularizerKind, strength: f64, beta: f64, params: &[&[T]]) -> Result<Self> {
        if !(strength >= 0.0 && strength.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
            return Err(BaselineError::InvalidConfig(format!(
                "strength {strength} must be >= 0 and beta {beta} > 0"
            )));
        }
        let zeros: Vec<Vec<f64>> = params.iter().map(|g| vec![0.0; g.len()]).collect();
        Ok(Self {
            kind,
            strength,
            beta,
            damping: SI_DAMPING,
            omega: zeros.clone(),
            anchor: None,
            path: zeros.clone(),
            task_start: to_f64(params),
            pending_grads: zeros,
            prev_params: Vec::new(),
            boundaries: 0,
        })
    }

    pub fn boundaries(&self) -> usize {
        self.boundaries
    }

    /// `λ Σ Ωᵢ (θᵢ − θ*ᵢ)²`; zero before the first boundary.
    pub fn penalty<T: Real>(&self, params: &[&[T]]) -> f64 {
        let Some(anchor) = &self.anchor else {
            return 0.0;
        };
        let mut total = 0.0;
        for ((p, a), w) in params.iter().zip(anchor).zip(&self.omega) {
            for ((&p, &a), &w) in p.iter().zip(a).zip(w) {
                let d = p.as_f64() - a;
                total += w * d * d;
            }
        }
        self.strength * total
    }

    pub fn regularized_loss<T: Real>(&self, base_loss: f64, params: &[&[T]]) -> f64 {
        base_loss + self.penalty(params)
    }

    /// Adds `2λΩ(θ − θ*)` to `grads`.
    pub fn add_penalty_gradient<T: Real>(&self, params: &[&[T]], grads: &mut [&mut [T]]) {
        let Some(anchor) = &self.anchor else {
            return;
        };
        let two_l = 2.0 * self.strength;
        for (((p, a), w), g) in params.iter().zip(anchor).zip(&self.omega).zip(grads.iter_mut()) {
            for i in 0..p.len() {
                if w[i] != 0.0 {
                    g[i] += T::of(two_l * w[i] * (p[i].as_f64() - a[i]));
                }
            }
        }
    }

    /// Called at the end of a task: accumulates this task's importance and
    /// moves the anchor to the current parameters.
    pub fn consolidate<T: Real, M: GradientModel<T> + ?Sized>(
        &mut self,
        model: &M,
        data: &LabeledDataset<T>,
    ) -> Result<()> {
        let params = model.param_groups();
        let current = to_f64(&params);
        match self.kind {
            RegularizerKind::Ewc | RegularizerKind::Mas => {
                let add = estimate_importance(self.kind, model, data, self.beta)?;
                for (o, a) in self.omega.iter_mut().zip(add) {
                    o.iter_mut().zip(a).for_each(|(o, a)| *o += a);
                }
            }
            RegularizerKind::Si => {
                for g in 0..self.omega.len() {
                    for i in 0..self.omega[g].len() {
                        let moved = current[g][i] - self.task_start[g][i];
                        self.omega[g][i] += (self.path[g][i] / (moved * moved + self.damping)).max(0.0);
                    }
                    self.path[g].fill(0.0);
                }
            }
            RegularizerKind::L2 => self.omega.iter_mut().for_each(|o| o.fill(1.0)),
        }
        self.task_start = current.clone();
        self.anchor = Some(current);
        self.boundaries += 1;
        Ok(())
    }
}

impl<T: Real> StepHook<T> for ImportanceState {
    fn before_step(&mut self, params: &[&[T]], grads: &mut [&mut [T]]) {
        if self.kind == RegularizerKind::Si {
            for (dst, g) in self.pending_grads.iter_mut().zip(grads.iter()) {
                dst.iter_mut().zip(g.iter()).for_each(|(d, g)| *d = g.as_f64());
            }
            self.prev_params = to_f64(params);
        }
        self.add_penalty_gradient(params, grads);
    }

    fn after_step(&mut self, params: &[&[T]]) {
        if self.kind != RegularizerKind::Si || self.prev_params.is_empty() {
            return;
        }
        for g in 0..params.len() {
            for (i, &p) in params[g].iter().enumerate() {
                let step = p.as_f64() - self.prev_params[g][i];
                self.path[g][i] -= self.pending_grads[g][i] * step;
            }
        }
    }
}

/// Random-projection classifier: fixed sparse binary projection to
/// `r_kc` units, binary top-k, and one-pass additive Hebbian output weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlyModel {
    n: usize,
    /// Input indices feeding each unit; each has exactly `fan_in` entries.
    projection: Vec<Vec<usize>>,
    pub k: usize,
    /// `o × r_kc` row-major.
    pub v: Vec<f64>,
    pub o: usize,
    pub lr: f64,
    /// Also shrink the other classes' weights on active units by `(1 − lr)`.
    pub decay: bool,
}

pub const FLY_DEFAULT_FAN_IN: usize = 32;
pub const FLY_DEFAULT_LR: f64 = 0.005;

impl FlyModel {
    pub fn new(n: usize, r_kc: usize, o: usize, fan_in: usize, k: usize, lr: f64, seed: u64) -> Result<Self> {
        if fan_in == 0 || fan_in > n || k == 0 || k > r_kc || !(lr > 0.0) {
            return Err(BaselineError::InvalidConfig(format!(
                "need 1 <= fan_in ({fan_in}) <= n ({n}), 1 <= k ({k}) <= r_kc ({r_kc}), lr > 0"
            )));
        }
        let mut rng = Rng::new(seed).fork(0);
        let projection = (0..r_kc)
            .map(|_| {
                let mut idx = rng.sample_indices(n, fan_in);
                idx.sort_unstable();
                idx
            })
            .collect();
        Ok(Self {
            n,
            projection,
            k,
            v: vec![0.0; o * r_kc],
            o,
            lr,
            decay: false,
        })
    }

    /// Default k: 64 for up to 1000 units, 32 above.
    pub fn default_k(r_kc: usize) -> usize {
        if r_kc <= 1000 {
            64
        } else {
            32
        }
    }

    pub fn r_kc(&self) -> usize {
        self.projection.len()
    }

    pub fn projection_matrix(&self) -> DenseMatrix<f64> {
        let mut m = DenseMatrix::zeros(self.r_kc(), self.n);
        for (j, idx) in self.projection.iter().enumerate() {
            for &i in idx {
                m.row_mut(j)[i] = 1.0;
            }
        }
        m
    }

    /// Indices of the k most driven units (ascending), ties to lower index.
    pub fn active_units<T: Real>(&self, x: &[T]) -> Result<Vec<usize>> {
        if x.len() != self.n {
            return Err(BaselineError::ShapeMismatch {
                expected: self.n,
                found: x.len(),
            });
        }
        let raw: Vec<f64> = self
            .projection
            .iter()
            .map(|idx| idx.iter().map(|&i| x[i].as_f64()).sum())
            .collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[b].partial_cmp(&raw[a]).unwrap().then(a.cmp(&b)));
        order.truncate(self.k);
        order.sort_unstable();
        Ok(order)
    }

    pub fn train_sample<T: Real>(&mut self, x: &[T], label: usize) -> Result<()> {
        if label >= self.o {
            return Err(BaselineError::TargetOutOfRange {
                target: label,
                classes: self.o,
            });
        }
        let r = self.r_kc();
        for j in self.active_units(x)? {
            self.v[label * r + j] += self.lr;
            if self.decay {
                for c in (0..self.o).filter(|&c| c != label) {
                    self.v[c * r + j] *= 1.0 - self.lr;
                }
            }
        }
        Ok(())
    }

    /// One pass over `data` in order.
    pub fn train<T: Real>(&mut self, data: &LabeledDataset<T>) -> Result<()> {
        for i in 0..data.len() {
            let (x, y) = data.sample(i);
            self.train_sample(x, y)?;
        }
        Ok(())
    }

    pub fn scores<T: Real>(&self, x: &[T]) -> Result<Vec<f64>> {
        let r = self.r_kc();
        let active = self.active_units(x)?;
        Ok((0..self.o)
            .map(|c| active.iter().map(|&j| self.v[c * r + j]).sum())
            .collect())
    }

    pub fn predict<T: Real>(&self, x: &[T]) -> Result<usize> {
        Ok(argmax(&self.scores(x)?))
    }

    pub fn accuracy<T: Real>(&self, data: &LabeledDataset<T>) -> Result<f64> {
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
}
