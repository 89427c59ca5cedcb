//! Class-incremental split-task harness: task partitions, the
//! pretrain → output reset → per-task training loop, evaluation over all
//! classes, and neuron diagnostics (dead units, activation entropy).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{Activation, BaselineError, FlyModel, ImportanceState, MlpBaseline, RegularizerKind};
use crate::data_io::LabeledDataset;
use crate::numerics::{NumericsError, Real, Rng};
use crate::optimizers::{Optimizer, OptimizerConfig, OptimizerError, StepHook};
use crate::sdmlp::{Ablations, SdmlpError, SdmlpModel, TopKConfig};

#[derive(Debug, Error)]
pub enum ContinualError {
    #[error("{classes} classes cannot be split into tasks of {per_task}")]
    IndivisibleClasses { classes: usize, per_task: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("task {0} has no training samples")]
    EmptyTask(usize),
    #[error("training data for task {task} contains class {class}")]
    ForeignClass { task: usize, class: usize },
    #[error(transparent)]
    Sdmlp(#[from] SdmlpError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ContinualError>;

/// Ordered disjoint class subsets covering every class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub partition: Vec<Vec<usize>>,
    pub seed: Option<u64>,
}

impl TaskStream {
    /// Classes in label order: `{0,1}, {2,3}, …`.
    pub fn ordered(num_classes: usize, classes_per_task: usize) -> Result<Self> {
        check_divisible(num_classes, classes_per_task)?;
        let classes: Vec<usize> = (0..num_classes).collect();
        Ok(Self {
            partition: classes.chunks(classes_per_task).map(|c| c.to_vec()).collect(),
            seed: None,
        })
    }

    /// Classes shuffled with `seed`, then chunked.
    pub fn shuffled(num_classes: usize, classes_per_task: usize, seed: u64) -> Result<Self> {
        check_divisible(num_classes, classes_per_task)?;
        let mut classes: Vec<usize> = (0..num_classes).collect();
        Rng::new(seed).fork(11).shuffle(&mut classes);
        Ok(Self {
            partition: classes
                .chunks(classes_per_task)
                .map(|c| {
                    let mut c = c.to_vec();
                    c.sort_unstable();
                    c
                })
                .collect(),
            seed: Some(seed),
        })
    }

    /// One task holding every class.
    pub fn single(num_classes: usize) -> Self {
        Self {
            partition: vec![(0..num_classes).collect()],
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.partition.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partition.is_empty()
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.partition.iter().position(|t| t.contains(&class))
    }

    pub fn task_data<T: Real>(&self, data: &LabeledDataset<T>, task: usize) -> LabeledDataset<T> {
        data.subset_by_classes(&self.partition[task])
    }
}

fn check_divisible(classes: usize, per_task: usize) -> Result<()> {
    if per_task == 0 || classes == 0 || classes % per_task != 0 {
        return Err(ContinualError::IndivisibleClasses { classes, per_task });
    }
    Ok(())
}

/// Seeded split of the dataset's classes into tasks of `classes_per_task`.
pub fn split_dataset<T: Real>(data: &LabeledDataset<T>, classes_per_task: usize, seed: u64) -> Result<TaskStream> {
    TaskStream::shuffled(data.num_classes, classes_per_task, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Sdmlp {
        neurons: usize,
        topk: TopKConfig,
        #[serde(default)]
        ablations: Ablations,
    },
    Mlp {
        neurons: usize,
        #[serde(default = "relu")]
        activation: Activation,
        #[serde(default)]
        dropout: f64,
    },
    Fly {
        neurons: usize,
        k: usize,
        #[serde(default = "fly_fan_in")]
        fan_in: usize,
        #[serde(default = "fly_lr")]
        lr: f64,
        #[serde(default)]
        decay: bool,
    },
}

fn relu() -> Activation {
    Activation::Relu
}

fn fly_fan_in() -> usize {
    crate::baselines::FLY_DEFAULT_FAN_IN
}

fn fly_lr() -> f64 {
    crate::baselines::FLY_DEFAULT_LR
}

impl ModelSpec {
    pub fn neurons(&self) -> usize {
        match *self {
            Self::Sdmlp { neurons, .. } | Self::Mlp { neurons, .. } | Self::Fly { neurons, .. } => neurons,
        }
    }

    /// Active-unit budget: `k_target`, the Top-K k, or the layer width for ReLU.
    pub fn k(&self) -> usize {
        match self {
            Self::Sdmlp { topk, .. } => topk.k_target,
            Self::Mlp {
                activation, neurons, ..
            } => match *activation {
                Activation::Relu => *neurons,
                Activation::TopKMask(k) | Activation::TopKSubtract(k) => k,
            },
            Self::Fly { k, .. } => *k,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Sdmlp { topk, .. } => format!("sdmlp-{:?}", topk.mode).to_lowercase(),
            Self::Mlp {
                activation, dropout, ..
            } => {
                let base = match activation {
                    Activation::Relu => "relu".to_string(),
                    Activation::TopKMask(k) => format!("topk-mask-{k}"),
                    Activation::TopKSubtract(k) => format!("topk-subtract-{k}"),
                };
                if *dropout > 0.0 {
                    format!("{base}-dropout")
                } else {
                    base
                }
            }
            Self::Fly { .. } => "flymodel".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub strength: f64,
    #[serde(default = "one")]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

fn default_batch() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualConfig {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub regularizer: Option<RegularizerConfig>,
    #[serde(default = "two")]
    pub classes_per_task: usize,
    pub epochs_per_task: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Shuffle class order with the seed; otherwise tasks follow label order.
    #[serde(default)]
    pub shuffle_classes: bool,
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// Train a single task holding every class.
    #[serde(default)]
    pub oracle: bool,
    /// Evaluate every this many epochs; the last epoch of each task is always evaluated.
    #[serde(default = "one_usize")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Accumulate per-neuron class activation counts over training data.
    #[serde(default)]
    pub track_activity: bool,
}

fn one_usize() -> usize {
    1
}

impl ContinualConfig {
    pub fn new(model: ModelSpec, optimizer: OptimizerConfig, epochs_per_task: usize) -> Self {
        Self {
            model,
            optimizer,
            regularizer: None,
            classes_per_task: 2,
            epochs_per_task,
            batch_size: default_batch(),
            shuffle_classes: false,
            pretrain_epochs: 0,
            oracle: false,
            eval_every: 1,
            seed: 0,
            track_activity: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(ContinualError::InvalidConfig(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        if self.model.neurons() == 0 {
            return Err(ContinualError::InvalidConfig("model needs at least one neuron".into()));
        }
        if matches!(self.model, ModelSpec::Fly { .. }) && self.regularizer.is_some() {
            return Err(ContinualError::InvalidConfig(
                "the fly model takes no regularizer".into(),
            ));
        }
        Ok(())
    }

    pub fn method_name(&self) -> String {
        let mut name = self.model.label();
        if let Some(reg) = &self.regularizer {
            name.push('+');
            name.push_str(reg.kind.name());
        }
        if !matches!(self.model, ModelSpec::Fly { .. }) {
            name.push('-');
            name.push_str(self.optimizer.kind.name());
        }
        if self.oracle {
            name.push_str("-oracle");
        }
        name
    }

    pub fn stream(&self, num_classes: usize) -> Result<TaskStream> {
        if self.oracle {
            Ok(TaskStream::single(num_classes))
        } else if self.shuffle_classes {
            TaskStream::shuffled(num_classes, self.classes_per_task, self.seed)
        } else {
            TaskStream::ordered(num_classes, self.classes_per_task)
        }
    }
}

/// Units active for one input, for every model kind.
pub trait ActiveUnits<T> {
    fn units(&self) -> usize;
    fn active_units(&self, x: &[T]) -> Result<Vec<usize>>;
}

impl<T: Real> ActiveUnits<T> for SdmlpModel<T> {
    fn units(&self) -> usize {
        self.r()
    }

    fn active_units(&self, x: &[T]) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.active)
    }
}

impl<T: Real> ActiveUnits<T> for MlpBaseline<T> {
    fn units(&self) -> usize {
        self.r()
    }

    fn active_units(&self, x: &[T]) -> Result<Vec<usize>> {
        Ok(self.forward(x, None)?.active)
    }
}

impl<T: Real> ActiveUnits<T> for FlyModel {
    fn units(&self) -> usize {
        self.r_kc()
    }

    fn active_units(&self, x: &[T]) -> Result<Vec<usize>> {
        Ok(FlyModel::active_units(self, x)?)
    }
}

/// Fraction of units never active on any sample of `data`.
pub fn dead_neuron_fraction<T: Real, M: ActiveUnits<T> + ?Sized>(model: &M, data: &LabeledDataset<T>) -> Result<f64> {
    let r = model.units();
    if r == 0 {
        return Ok(0.0);
    }
    let mut seen = vec![false; r];
    for i in 0..data.len() {
        for j in model.active_units(data.sample(i).0)? {
            seen[j] = true;
        }
    }
    Ok(seen.iter().filter(|&&s| !s).count() as f64 / r as f64)
}

/// `r × o` counts of how often each unit was active for each class.
pub fn class_activation_counts<T: Real, M: ActiveUnits<T> + ?Sized>(
    model: &M,
    data: &LabeledDataset<T>,
) -> Result<Vec<Vec<u64>>> {
    let mut counts = vec![vec![0u64; data.num_classes]; model.units()];
    add_class_activations(model, data, &mut counts)?;
    Ok(counts)
}

fn add_class_activations<T: Real, M: ActiveUnits<T> + ?Sized>(
    model: &M,
    data: &LabeledDataset<T>,
    counts: &mut [Vec<u64>],
) -> Result<()> {
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        for j in model.active_units(x)? {
            counts[j][y] += 1;
        }
    }
    Ok(())
}

/// Entropy in nats of the distribution proportional to `counts`; 0 for all zeros.
pub fn entropy_nats(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        + 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronEntropy {
    pub entropy: f64,
    /// This unit's share of all activations.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub neurons: Vec<NeuronEntropy>,
    /// Share-weighted mean entropy; never-active units carry no weight.
    pub weighted_mean: f64,
}

pub fn entropy_report_from_counts(counts: &[Vec<u64>]) -> EntropyReport {
    let totals: Vec<u64> = counts.iter().map(|c| c.iter().sum()).collect();
    let grand: u64 = totals.iter().sum();
    let neurons: Vec<NeuronEntropy> = counts
        .iter()
        .zip(&totals)
        .map(|(c, &t)| NeuronEntropy {
            entropy: entropy_nats(c),
            share: if grand == 0 { 0.0 } else { t as f64 / grand as f64 },
        })
        .collect();
    let weighted_mean = neurons.iter().map(|n| n.share * n.entropy).sum();
    EntropyReport { neurons, weighted_mean }
}

pub fn activation_entropy_report<T: Real, M: ActiveUnits<T> + ?Sized>(
    model: &M,
    data: &LabeledDataset<T>,
) -> Result<EntropyReport> {
    Ok(entropy_report_from_counts(&class_activation_counts(model, data)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub task: usize,
    /// Epoch within the task, from 1.
    pub epoch: usize,
    pub global_epoch: usize,
    pub k: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    /// Accuracy over the full validation set (every class).
    pub overall_accuracy: f64,
    /// Validation accuracy restricted to each task's classes.
    pub per_task_accuracy: Vec<f64>,
    pub dead_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub neurons: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub final_acc_mean: f64,
    pub final_acc_sem: f64,
    #[serde(default)]
    pub final_accs: Vec<f64>,
}

impl RunSummary {
    /// Mean and standard error (sample standard deviation over √n) across seeds.
    pub fn aggregate(logs: &[MetricsLog]) -> Option<Self> {
        let first = logs.first()?;
        let accs: Vec<f64> = logs.iter().map(|l| l.final_accuracy()).collect();
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let sem = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Some(Self {
            method: first.method.clone(),
            neurons: first.neurons,
            k: first.k,
            seeds: logs.iter().map(|l| l.seed).collect(),
            final_acc_mean: mean,
            final_acc_sem: sem,
            final_accs: accs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub method: String,
    pub neurons: usize,
    pub k: usize,
    pub seed: u64,
    pub tasks: Vec<Vec<usize>>,
    pub records: Vec<EpochRecord>,
    /// Validation per-task accuracy right after each task finished.
    pub after_task: Vec<Vec<f64>>,
    /// `r × o` active counts over training samples (empty unless tracked).
    pub class_counts: Vec<Vec<u64>>,
    pub dead_column_resets: usize,
}

impl MetricsLog {
    pub fn empty(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            neurons: 0,
            k: 0,
            seed: 0,
            tasks: Vec::new(),
            records: Vec::new(),
            after_task: Vec::new(),
            class_counts: Vec::new(),
            dead_column_resets: 0,
        }
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Overall accuracy of the last record, 0 for an empty log.
    pub fn final_accuracy(&self) -> f64 {
        self.final_record().map_or(0.0, |r| r.overall_accuracy)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary::aggregate(std::slice::from_ref(self)).expect("one log")
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("phase,task,epoch,global_epoch,k,loss,train_accuracy,overall_accuracy,dead_fraction");
        for t in 0..self.tasks.len() {
            out.push_str(&format!(",task{t}_accuracy"));
        }
        out.push('\n');
        for r in &self.records {
            let phase = match r.phase {
                Phase::Pretrain => "pretrain",
                Phase::Task => "task",
            };
            out.push_str(&format!(
                "{phase},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.task, r.epoch, r.global_epoch, r.k, r.loss, r.train_accuracy, r.overall_accuracy, r.dead_fraction
            ));
            for a in &r.per_task_accuracy {
                out.push_str(&format!(",{a:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Method / neurons / k / accuracy rows, one per summary.
pub fn summary_table_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from("method,neurons,k,seeds,final_acc_mean,final_acc_sem\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4}\n",
            s.method,
            s.neurons,
            s.k,
            s.seeds.len(),
            s.final_acc_mean,
            s.final_acc_sem
        ));
    }
    out
}

/// A model of any supported kind, as built by [`ModelSpec`].
#[derive(Debug, Clone)]
pub enum AnyModel<T> {
    Sdmlp(SdmlpModel<T>),
    Mlp(MlpBaseline<T>),
    Fly(FlyModel),
}

impl<T: Real> AnyModel<T> {
    pub fn build(spec: &ModelSpec, n: usize, o: usize, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Sdmlp {
                neurons,
                topk,
                ablations,
            } => Self::Sdmlp(SdmlpModel::new(n, *neurons, o, *topk, *ablations, seed)?),
            ModelSpec::Mlp {
                neurons,
                activation,
                dropout,
            } => Self::Mlp(MlpBaseline::new(n, *neurons, o, *activation, *dropout, seed)?),
            ModelSpec::Fly {
                neurons,
                k,
                fan_in,
                lr,
                decay,
            } => {
                let mut fly = FlyModel::new(n, *neurons, o, *fan_in, *k, *lr, seed)?;
                fly.decay = *decay;
                Self::Fly(fly)
            }
        })
    }

    pub fn param_groups(&self) -> Vec<&[T]> {
        match self {
            Self::Sdmlp(m) => m.param_groups(),
            Self::Mlp(m) => m.param_groups(),
            Self::Fly(_) => Vec::new(),
        }
    }

    pub fn reset_output_weights(&mut self) {
        match self {
            Self::Sdmlp(m) => m.reset_output_weights(),
            Self::Mlp(m) => m.reset_output_weights(),
            Self::Fly(f) => f.v.fill(0.0),
        }
    }

    pub fn train_epoch(
        &mut self,
        data: &LabeledDataset<T>,
        opt: &mut Optimizer<T>,
        batch_size: usize,
        rng: &mut Rng,
        hook: Option<&mut dyn StepHook<T>>,
    ) -> Result<crate::sdmlp::EpochStats> {
        Ok(match self {
            Self::Sdmlp(m) => m.train_epoch(data, opt, batch_size, rng, hook)?,
            Self::Mlp(m) => m.train_epoch(data, opt, batch_size, rng, hook)?,
            Self::Fly(f) => {
                f.train(data)?;
                crate::sdmlp::EpochStats {
                    loss: 0.0,
                    train_accuracy: f.accuracy(data)?,
                    k: f.k,
                    steps: data.len(),
                    dead_column_resets: 0,
                }
            }
        })
    }

    pub fn predict(&self, x: &[T]) -> Result<usize> {
        Ok(match self {
            Self::Sdmlp(m) => m.predict(x)?,
            Self::Mlp(m) => m.predict(x)?,
            Self::Fly(f) => f.predict(x)?,
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

    /// Prediction and active set for one input in a single forward pass.
    fn predict_with_units(&self, x: &[T]) -> Result<(usize, Vec<usize>)> {
        Ok(match self {
            Self::Sdmlp(m) => {
                let t = m.forward(x)?;
                (crate::numerics::argmax(&t.logits), t.active)
            }
            Self::Mlp(m) => {
                let t = m.forward(x, None)?;
                (crate::numerics::argmax(&t.logits), t.active)
            }
            Self::Fly(f) => {
                let active = f.active_units(x)?;
                (f.predict(x)?, active)
            }
        })
    }

    fn importance_consolidate(&self, imp: &mut ImportanceState, data: &LabeledDataset<T>) -> Result<()> {
        match self {
            Self::Sdmlp(m) => imp.consolidate(m, data)?,
            Self::Mlp(m) => imp.consolidate(m, data)?,
            Self::Fly(_) => {}
        }
        Ok(())
    }
}

impl<T: Real> ActiveUnits<T> for AnyModel<T> {
    fn units(&self) -> usize {
        match self {
            Self::Sdmlp(m) => m.r(),
            Self::Mlp(m) => m.r(),
            Self::Fly(f) => f.r_kc(),
        }
    }

    fn active_units(&self, x: &[T]) -> Result<Vec<usize>> {
        Ok(self.predict_with_units(x)?.1)
    }
}

/// Validation accuracy per task, overall accuracy and dead fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub overall: f64,
    pub per_task: Vec<f64>,
    pub dead_fraction: f64,
}

pub fn evaluate<T: Real>(model: &AnyModel<T>, stream: &TaskStream, valid: &LabeledDataset<T>) -> Result<Evaluation> {
    let tasks = stream.len();
    let mut correct = vec![0usize; tasks];
    let mut seen = vec![0usize; tasks];
    let mut alive = vec![false; model.units()];
    let mut total_correct = 0;
    for i in 0..valid.len() {
        let (x, y) = valid.sample(i);
        let (pred, active) = model.predict_with_units(x)?;
        for j in active {
            alive[j] = true;
        }
        let hit = (pred == y) as usize;
        total_correct += hit;
        if let Some(t) = stream.task_of(y) {
            correct[t] += hit;
            seen[t] += 1;
        }
    }
    let per_task = correct
        .iter()
        .zip(&seen)
        .map(|(&c, &s)| if s == 0 { 0.0 } else { c as f64 / s as f64 })
        .collect();
    let overall = if valid.is_empty() {
        0.0
    } else {
        total_correct as f64 / valid.len() as f64
    };
    let dead_fraction = if alive.is_empty() {
        0.0
    } else {
        alive.iter().filter(|&&a| !a).count() as f64 / alive.len() as f64
    };
    Ok(Evaluation {
        overall,
        per_task,
        dead_fraction,
    })
}

/// Runs the full protocol and returns the trained model alongside its log.
pub fn run_continual_with_model<T: Real>(
    cfg: &ContinualConfig,
    train: &LabeledDataset<T>,
    valid: &LabeledDataset<T>,
    pretrain: Option<&LabeledDataset<T>>,
) -> Result<(MetricsLog, AnyModel<T>)> {
    cfg.validate()?;
    if train.dim() != valid.dim() {
        return Err(ContinualError::InvalidConfig(format!(
            "train dim {} differs from validation dim {}",
            train.dim(),
            valid.dim()
        )));
    }
    let classes = train.num_classes.max(valid.num_classes);
    let stream = cfg.stream(classes)?;
    let mut model = AnyModel::<T>::build(&cfg.model, train.dim(), classes, cfg.seed)?;
    let mut opt = Optimizer::<T>::new(cfg.optimizer)?;
    let mut rng = Rng::new(cfg.seed).fork(3);
    let mut importance = match &cfg.regularizer {
        Some(reg) => Some(ImportanceState::new(
            reg.kind,
            reg.strength,
            reg.beta,
            &model.param_groups(),
        )?),
        None => None,
    };
    let mut log = MetricsLog {
        method: cfg.method_name(),
        neurons: cfg.model.neurons(),
        k: cfg.model.k(),
        seed: cfg.seed,
        tasks: stream.partition.clone(),
        records: Vec::new(),
        after_task: Vec::new(),
        class_counts: if cfg.track_activity {
            vec![vec![0; classes]; cfg.model.neurons()]
        } else {
            Vec::new()
        },
        dead_column_resets: 0,
    };
    let mut global_epoch = 0;

    if let Some(pre) = pretrain.filter(|_| cfg.pretrain_epochs > 0) {
        if pre.dim() != train.dim() {
            return Err(ContinualError::InvalidConfig(
                "pretraining data has a different dimension".into(),
            ));
        }
        for epoch in 1..=cfg.pretrain_epochs {
            let stats = model.train_epoch(pre, &mut opt, cfg.batch_size, &mut rng, None)?;
            global_epoch += 1;
            log.dead_column_resets += stats.dead_column_resets;
            if epoch % cfg.eval_every == 0 || epoch == cfg.pretrain_epochs {
                let ev = evaluate(&model, &stream, valid)?;
                log.records
                    .push(record(Phase::Pretrain, 0, epoch, global_epoch, &stats, ev));
            }
        }
        model.reset_output_weights();
        opt.reset();
    }

    for (task, classes_t) in stream.partition.iter().enumerate() {
        let data = stream.task_data(train, task);
        if data.is_empty() {
            return Err(ContinualError::EmptyTask(task));
        }
        if let Some(&class) = data.labels.iter().find(|l| !classes_t.contains(l)) {
            return Err(ContinualError::ForeignClass { task, class });
        }
        for epoch in 1..=cfg.epochs_per_task {
            let hook = importance.as_mut().map(|h| h as &mut dyn StepHook<T>);
            let stats = model.train_epoch(&data, &mut opt, cfg.batch_size, &mut rng, hook)?;
            global_epoch += 1;
            log.dead_column_resets += stats.dead_column_resets;
            if cfg.track_activity {
                add_class_activations(&model, &data, &mut log.class_counts)?;
            }
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs_per_task {
                let ev = evaluate(&model, &stream, valid)?;
                log.records
                    .push(record(Phase::Task, task, epoch, global_epoch, &stats, ev));
            }
        }
        if cfg.epochs_per_task == 0 {
            let ev = evaluate(&model, &stream, valid)?;
            let stats = crate::sdmlp::EpochStats {
                loss: 0.0,
                train_accuracy: 0.0,
                k: cfg.model.k(),
                steps: 0,
                dead_column_resets: 0,
            };
            log.records.push(record(Phase::Task, task, 0, global_epoch, &stats, ev));
        }
        log.after_task.push(
            log.records
                .last()
                .map(|r| r.per_task_accuracy.clone())
                .unwrap_or_default(),
        );
        if let Some(imp) = importance.as_mut() {
            model.importance_consolidate(imp, &data)?;
        }
    }
    Ok((log, model))
}

pub fn run_continual<T: Real>(
    cfg: &ContinualConfig,
    train: &LabeledDataset<T>,
    valid: &LabeledDataset<T>,
    pretrain: Option<&LabeledDataset<T>>,
) -> Result<MetricsLog> {
    Ok(run_continual_with_model(cfg, train, valid, pretrain)?.0)
}

fn record(
    phase: Phase,
    task: usize,
    epoch: usize,
    global_epoch: usize,
    stats: &crate::sdmlp::EpochStats,
    ev: Evaluation,
) -> EpochRecord {
    EpochRecord {
        phase,
        task,
        epoch,
        global_epoch,
        k: stats.k,
        loss: stats.loss,
        train_accuracy: stats.train_accuracy,
        overall_accuracy: ev.overall,
        per_task_accuracy: ev.per_task,
        dead_fraction: ev.dead_fraction,
    }
}
