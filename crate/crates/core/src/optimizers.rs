//! SGD, SGD with momentum, Adam and RMSProp written out by hand, plus a
//! single-weight probe that shows how their moving averages react to sparse
//! gradients.
//!
//! Parameters are passed as groups of flat slices. Each group keeps its own
//! buffers, sized lazily on first use.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("shape mismatch in parameter group {group}: {params} parameters, {grads} gradients")]
    ShapeMismatch { group: usize, params: usize, grads: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("invalid injection schedule: {0}")]
    InvalidSchedule(String),
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Sgdm,
    Adam,
    Rmsprop,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [Self::Sgd, Self::Sgdm, Self::Adam, Self::Rmsprop];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Sgdm => "sgdm",
            Self::Adam => "adam",
            Self::Rmsprop => "rmsprop",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = OptimizerError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| OptimizerError::InvalidConfig(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub epsilon: f64,
    /// Leave parameters (and their buffers) alone when their gradient is exactly zero.
    pub sparse_mode: bool,
    /// Adam bias correction with `1 − βᵗ` instead of the constant `1 − β`.
    pub standard_adam: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            alpha: 0.99,
            epsilon: 1e-8,
            sparse_mode: false,
            standard_adam: false,
        }
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(OptimizerError::InvalidConfig(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("alpha", self.alpha),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(OptimizerError::InvalidConfig(format!(
                    "{name} = {v} must lie in (0, 1)"
                )));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(OptimizerError::InvalidConfig("epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct GroupState<T> {
    /// Momentum buffer (SGDM) or first moment (Adam).
    m: Vec<T>,
    /// Second moment (Adam, RMSProp).
    v: Vec<T>,
}

/// Scalar update rule shared by the dense and column-restricted paths.
#[derive(Debug, Clone, Copy)]
struct Rule<T> {
    kind: OptimizerKind,
    lr: T,
    momentum: T,
    beta1: T,
    beta2: T,
    alpha: T,
    eps: T,
    m_corr: T,
    v_corr: T,
}

/// Subnormal buffer values are flushed to zero; geometric decay of unused
/// entries otherwise lands there and is very slow on common hardware.
#[inline]
fn flush<T: Real>(x: T) -> T {
    if x.abs() < T::min_positive_value() {
        T::zero()
    } else {
        x
    }
}

impl<T: Real> Rule<T> {
    /// Updates the buffers in place and returns Δ (the step before scaling by the learning rate).
    #[inline]
    fn delta(&self, g: T, m: &mut T, v: &mut T) -> T {
        let one = T::one();
        match self.kind {
            OptimizerKind::Sgd => g,
            OptimizerKind::Sgdm => {
                *m = flush(self.momentum * *m + g);
                *m
            }
            OptimizerKind::Adam => {
                *m = flush(self.beta1 * *m + (one - self.beta1) * g);
                *v = flush(self.beta2 * *v + (one - self.beta2) * g * g);
                (*m / self.m_corr) / ((*v / self.v_corr).sqrt() + self.eps)
            }
            OptimizerKind::Rmsprop => {
                *v = flush(self.alpha * *v + (one - self.alpha) * g * g);
                g / (v.sqrt() + self.eps)
            }
        }
    }
}

/// Optimizer configuration together with its per-group buffers and step count.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    groups: Vec<GroupState<T>>,
    t: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            groups: Vec::new(),
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Forget all buffers (used when parameters are re-initialized).
    pub fn reset(&mut self) {
        self.groups.clear();
        self.t = 0;
    }

    /// True when untouched parameters provably do not move, so callers may
    /// restrict an update to the parameters that received gradient.
    pub fn skips_zero_gradients(&self) -> bool {
        self.cfg.kind == OptimizerKind::Sgd || self.cfg.sparse_mode
    }

    /// Momentum buffer (SGDM) or first moment (Adam) of one group, if allocated.
    pub fn first_moment(&self, group: usize) -> Option<&[T]> {
        self.groups.get(group).map(|g| g.m.as_slice())
    }

    pub fn second_moment(&self, group: usize) -> Option<&[T]> {
        self.groups.get(group).map(|g| g.v.as_slice())
    }

    fn rule(&self) -> Rule<T> {
        let c = &self.cfg;
        let (m_corr, v_corr) = if c.standard_adam {
            let t = self.t.max(1) as i32;
            (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t))
        } else {
            (1.0 - c.beta1, 1.0 - c.beta2)
        };
        Rule {
            kind: c.kind,
            lr: T::of(c.learning_rate),
            momentum: T::of(c.momentum),
            beta1: T::of(c.beta1),
            beta2: T::of(c.beta2),
            alpha: T::of(c.alpha),
            eps: T::of(c.epsilon),
            m_corr: T::of(m_corr),
            v_corr: T::of(v_corr),
        }
    }

    fn group_state(&mut self, group: usize, len: usize) -> &mut GroupState<T> {
        if self.groups.len() <= group {
            self.groups.resize_with(group + 1, GroupState::default);
        }
        let st = &mut self.groups[group];
        if st.m.len() != len {
            st.m = vec![T::zero(); len];
            st.v = vec![T::zero(); len];
        }
        st
    }

    /// Advances the step counter. Call once per optimizer step, before updating groups.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one parameter group: `θ ← θ − λ·Δ`.
    pub fn step_group(&mut self, group: usize, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(OptimizerError::ShapeMismatch {
                group,
                params: params.len(),
                grads: grads.len(),
            });
        }
        let rule = self.rule();
        let sparse = self.cfg.sparse_mode;
        let st = self.group_state(group, params.len());
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
            if sparse && g == T::zero() {
                continue;
            }
            *p -= rule.lr * rule.delta(g, m, v);
        }
        Ok(())
    }

    /// Updates only the listed columns of a row-major `rows × cols` group.
    /// Only valid when [`Self::skips_zero_gradients`] holds and every other
    /// column has zero gradient.
    pub fn step_group_columns(
        &mut self,
        group: usize,
        params: &mut [T],
        grads: &[T],
        cols: usize,
        columns: &[usize],
    ) -> Result<()> {
        if params.len() != grads.len() || cols == 0 || params.len() % cols != 0 {
            return Err(OptimizerError::ShapeMismatch {
                group,
                params: params.len(),
                grads: grads.len(),
            });
        }
        debug_assert!(self.skips_zero_gradients());
        let rule = self.rule();
        let sparse = self.cfg.sparse_mode;
        let st = self.group_state(group, params.len());
        for row in 0..params.len() / cols {
            let base = row * cols;
            for &j in columns {
                let idx = base + j;
                let g = grads[idx];
                if sparse && g == T::zero() {
                    continue;
                }
                params[idx] -= rule.lr * rule.delta(g, &mut st.m[idx], &mut st.v[idx]);
            }
        }
        Ok(())
    }
}

/// Observer around each optimizer step of a training loop, used by importance
/// regularizers. Parameter and gradient groups arrive in the same order.
pub trait StepHook<T> {
    /// Sees the batch gradient before the update and may add penalty terms to it.
    fn before_step(&mut self, params: &[&[T]], grads: &mut [&mut [T]]);
    /// Sees the parameters after the update and projection.
    fn after_step(&mut self, params: &[&[T]]);
}

/// Gradient injections for a single scalar weight; every other step sees zero gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSchedule {
    pub injections: Vec<(usize, f64)>,
    pub total_steps: usize,
}

impl InjectionSchedule {
    pub fn new(injections: Vec<(usize, f64)>, total_steps: usize) -> Result<Self> {
        let s = Self {
            injections,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.injections.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(OptimizerError::InvalidSchedule(format!(
                    "step indices must strictly increase ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(last, _)) = self.injections.last() {
            if last >= self.total_steps {
                return Err(OptimizerError::InvalidSchedule(format!(
                    "injection at step {last} beyond total of {}",
                    self.total_steps
                )));
            }
        }
        Ok(())
    }

    /// Bursts of consecutive injections of `gradient`, each followed by `quiet` zero-gradient steps.
    pub fn bursts(burst_lengths: &[usize], gradient: f64, quiet: usize) -> Self {
        let mut injections = Vec::new();
        let mut step = 0;
        for &len in burst_lengths {
            for _ in 0..len {
                injections.push((step, gradient));
                step += 1;
            }
            step += quiet;
        }
        Self {
            injections,
            total_steps: step,
        }
    }

    /// Two injections, then four, then one and one, separated by quiet periods.
    pub fn standard_bursts(gradient: f64) -> Self {
        Self::bursts(&[2, 4, 1, 1], gradient, 25)
    }

    pub fn gradient_at(&self, step: usize) -> f64 {
        self.injections
            .binary_search_by_key(&step, |&(s, _)| s)
            .map_or(0.0, |i| self.injections[i].1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub gradient: f64,
    pub delta: f64,
    pub m: f64,
    pub v: f64,
}

/// Runs one scalar weight through the schedule and records Δ and the buffers
/// at every step. Δ does not depend on the learning rate.
pub fn stale_momentum_probe(cfg: &OptimizerConfig, schedule: &InjectionSchedule) -> Result<Vec<ProbeRecord>> {
    schedule.validate()?;
    let mut opt = Optimizer::<f64>::new(OptimizerConfig {
        learning_rate: 1.0,
        ..*cfg
    })?;
    let mut theta = [0.0f64];
    let mut out = Vec::with_capacity(schedule.total_steps);
    for step in 0..schedule.total_steps {
        let g = schedule.gradient_at(step);
        let before = theta[0];
        opt.begin_step();
        opt.step_group(0, &mut theta, &[g])?;
        out.push(ProbeRecord {
            step,
            gradient: g,
            delta: before - theta[0],
            m: opt.first_moment(0).map_or(0.0, |m| m[0]),
            v: opt.second_moment(0).map_or(0.0, |v| v[0]),
        });
    }
    Ok(out)
}
