//! Classic Sparse Distributed Memory, the circle-intersection numerics behind
//! its attention approximation, and the excitatory/inhibitory interneuron
//! dynamics that approximate Top-K.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, l2_normalize, matvec, transpose_matvec, DenseMatrix, DenseVector, NumericsError, Rng};

/// Unit-norm checks use this tolerance.
pub const NORM_TOL: f64 = 1e-9;

/// Largest bit dimension accepted by [`intersection_curve`].
pub const MAX_INTERSECTION_N: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdmError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("column {index} is not unit norm (norm {norm})")]
    NotNormalized { index: usize, norm: f64 },
    #[error("no neuron is active for this query")]
    NoActiveNeurons,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, SdmError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActivationRule {
    /// Active when the cosine similarity is at least `c`.
    CosineThreshold(f64),
    /// The `k` most similar neurons are active.
    TopK(usize),
}

/// Associative memory with `r` neurons: addresses `x_a` (n×r, unit columns)
/// and storage `x_v` (o×r).
#[derive(Debug, Clone, PartialEq)]
pub struct SdmMemory {
    pub x_a: DenseMatrix<f64>,
    pub x_v: DenseMatrix<f64>,
    pub rule: ActivationRule,
}

fn check_unit_columns(m: &DenseMatrix<f64>) -> Result<()> {
    for (index, norm) in m.column_norms().into_iter().enumerate() {
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(SdmError::NotNormalized { index, norm });
        }
    }
    Ok(())
}

fn check_rule(rule: ActivationRule, r: usize) -> Result<()> {
    match rule {
        ActivationRule::CosineThreshold(c) if !(-1.0..=1.0).contains(&c) => Err(SdmError::InvalidParameter(format!(
            "cosine threshold {c} outside [-1, 1]"
        ))),
        ActivationRule::TopK(k) if k == 0 || k > r => {
            Err(SdmError::InvalidParameter(format!("k = {k} must be in 1..={r}")))
        }
        _ => Ok(()),
    }
}

impl SdmMemory {
    pub fn new(x_a: DenseMatrix<f64>, o: usize, rule: ActivationRule) -> Result<Self> {
        check_unit_columns(&x_a)?;
        check_rule(rule, x_a.cols())?;
        let r = x_a.cols();
        Ok(Self {
            x_a,
            x_v: DenseMatrix::zeros(o, r),
            rule,
        })
    }

    /// `r` neurons with uniformly random unit-norm addresses and empty storage.
    pub fn random(n: usize, r: usize, o: usize, rule: ActivationRule, rng: &mut Rng) -> Result<Self> {
        let mut x_a = DenseMatrix::zeros(n, r);
        for j in 0..r {
            let col: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            x_a.set_column(j, &l2_normalize(&col)?);
        }
        Self::new(x_a, o, rule)
    }

    pub fn n(&self) -> usize {
        self.x_a.rows()
    }

    pub fn r(&self) -> usize {
        self.x_a.cols()
    }

    pub fn o(&self) -> usize {
        self.x_v.rows()
    }

    /// The {0,1} activation pattern of every neuron for one unit-norm vector.
    pub fn activations(&self, v: &[f64]) -> Result<Vec<bool>> {
        let cos = transpose_matvec(&self.x_a, v)?;
        Ok(match self.rule {
            ActivationRule::CosineThreshold(c) => cos.iter().map(|&e| e >= c).collect(),
            ActivationRule::TopK(k) => {
                let mut order: Vec<usize> = (0..cos.len()).collect();
                order.sort_by(|&i, &j| cos[j].total_cmp(&cos[i]).then(i.cmp(&j)));
                let mut active = vec![false; cos.len()];
                for &i in order.iter().take(k.min(cos.len())) {
                    active[i] = true;
                }
                active
            }
        })
    }

    /// Writes patterns (columns of `p_a`, n×m) with values (columns of `p_v`, o×m)
    /// into every activated neuron. Writes superpose additively.
    pub fn write(&mut self, p_a: &DenseMatrix<f64>, p_v: &DenseMatrix<f64>) -> Result<()> {
        if p_a.rows() != self.n() {
            return Err(SdmError::DimensionMismatch {
                expected: self.n(),
                found: p_a.rows(),
            });
        }
        if p_v.rows() != self.o() || p_v.cols() != p_a.cols() {
            return Err(SdmError::DimensionMismatch {
                expected: self.o() * p_a.cols(),
                found: p_v.rows() * p_v.cols(),
            });
        }
        check_unit_columns(p_a)?;
        for m in 0..p_a.cols() {
            let active = self.activations(&p_a.column(m))?;
            let value = p_v.column(m);
            for (j, _) in active.iter().enumerate().filter(|(_, &on)| on) {
                for (i, &v) in value.iter().enumerate() {
                    self.x_v[(i, j)] += v;
                }
            }
        }
        Ok(())
    }

    /// Sums the storage columns of the neurons activated by `query`.
    pub fn read(&self, query: &[f64], renormalize: bool) -> Result<DenseVector<f64>> {
        if query.len() != self.n() {
            return Err(SdmError::DimensionMismatch {
                expected: self.n(),
                found: query.len(),
            });
        }
        let qn = dot(query, query).sqrt();
        if (qn - 1.0).abs() > NORM_TOL {
            return Err(SdmError::NotNormalized { index: 0, norm: qn });
        }
        let active = self.activations(query)?;
        if !active.iter().any(|&a| a) {
            return Err(SdmError::NoActiveNeurons);
        }
        let b: Vec<f64> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        let y = matvec(&self.x_v, &b)?;
        if renormalize {
            Ok(l2_normalize(&y)?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightType {
    Binary,
    Linear,
    Exp { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectionQuery {
    pub n: usize,
    pub d: usize,
    pub d_v: usize,
    pub weight: WeightType,
}

/// Pascal's triangle up to row `n`, exact.
struct Binomials {
    rows: Vec<Vec<BigUint>>,
}

impl Binomials {
    fn new(n: usize) -> Self {
        let mut rows: Vec<Vec<BigUint>> = Vec::with_capacity(n + 1);
        rows.push(vec![BigUint::one()]);
        for m in 1..=n {
            let prev = &rows[m - 1];
            let mut row = Vec::with_capacity(m + 1);
            row.push(BigUint::one());
            for k in 1..m {
                row.push(&prev[k - 1] + &prev[k]);
            }
            row.push(BigUint::one());
            rows.push(row);
        }
        Self { rows }
    }

    fn get(&self, m: usize, k: usize) -> Option<&BigUint> {
        self.rows.get(m).and_then(|row| row.get(k))
    }
}

fn weight_of(weight: WeightType, n: usize, d_v: usize, a: usize, c: usize) -> f64 {
    let nf = n as f64;
    let (a, c, d_v) = (a as f64, c as f64, d_v as f64);
    match weight {
        WeightType::Binary => 1.0,
        WeightType::Linear => (a + c) / nf * ((a + d_v - c) / nf),
        WeightType::Exp { beta } => (-beta * (nf - (a + c))).exp() * (-beta * (nf - (a + (d_v - c)))).exp(),
    }
}

fn weighted_sum_with(table: &Binomials, q: &IntersectionQuery) -> f64 {
    let IntersectionQuery { n, d, d_v, weight } = *q;
    if d_v > n || d > n {
        return 0.0;
    }
    let nd = n as i64 - d as i64;
    let a_lo = (nd - (d_v / 2) as i64).max(0) as usize;
    let a_hi = n - d_v;
    let mut exact = BigUint::zero();
    let mut total = 0.0;
    for a in a_lo..=a_hi {
        let Some(ca) = table.get(n - d_v, a) else {
            continue;
        };
        let need = nd - a as i64;
        let c_lo = need.max(0);
        let c_hi = d_v as i64 - need;
        if c_hi < c_lo {
            continue;
        }
        for c in c_lo as usize..=(c_hi as usize).min(d_v) {
            let Some(cc) = table.get(d_v, c) else {
                continue;
            };
            let count = ca * cc;
            match weight {
                WeightType::Binary => exact += count,
                _ => {
                    let w = weight_of(weight, n, d_v, a, c);
                    total += w * count.to_f64().unwrap_or(f64::INFINITY);
                }
            }
        }
    }
    match weight {
        WeightType::Binary => exact.to_f64().unwrap_or(f64::INFINITY),
        _ => total,
    }
}

/// Weighted count of binary addresses inside both Hamming balls of radius `d`
/// around two vectors `d_v` bits apart.
pub fn intersection_weighted_sum(q: &IntersectionQuery) -> f64 {
    let table = Binomials::new(q.n);
    weighted_sum_with(&table, q)
}

/// Exact intersection size as a big integer (Binary weight).
pub fn intersection_count(n: usize, d: usize, d_v: usize) -> BigUint {
    let table = Binomials::new(n);
    let mut exact = BigUint::zero();
    if d_v > n || d > n {
        return exact;
    }
    let nd = n as i64 - d as i64;
    let a_lo = (nd - (d_v / 2) as i64).max(0) as usize;
    for a in a_lo..=n - d_v {
        let need = nd - a as i64;
        let (c_lo, c_hi) = (need.max(0), d_v as i64 - need);
        if c_hi < c_lo {
            continue;
        }
        for c in c_lo as usize..=(c_hi as usize).min(d_v) {
            if let (Some(x), Some(y)) = (table.get(n - d_v, a), table.get(d_v, c)) {
                exact += x * y;
            }
        }
    }
    exact
}

/// Intersection values for `d_v = 0..=n`, each divided by the `d_v = 0` value.
pub fn intersection_curve(n: usize, d: usize, weight: WeightType) -> Result<Vec<(usize, f64)>> {
    if n > MAX_INTERSECTION_N {
        return Err(SdmError::InvalidParameter(format!(
            "n = {n} exceeds {MAX_INTERSECTION_N}"
        )));
    }
    if d > n {
        return Err(SdmError::InvalidParameter(format!("d = {d} exceeds n = {n}")));
    }
    if let WeightType::Exp { beta } = weight {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(SdmError::InvalidParameter(format!("beta = {beta} must be positive")));
        }
    }
    let table = Binomials::new(n);
    let raw: Vec<f64> = (0..=n)
        .map(|d_v| weighted_sum_with(&table, &IntersectionQuery { n, d, d_v, weight }))
        .collect();
    let base = raw[0];
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(d_v, v)| (d_v, if base > 0.0 { v / base } else { 0.0 }))
        .collect())
}

/// How the inhibitory population feeds back onto the excitatory one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EiCoupling {
    /// `p_a = e⁰ − W_IE i`
    #[default]
    Inhibitory,
    /// `p_a = e⁰ + W_IE i`
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EiDynamicsConfig {
    pub r_e: usize,
    pub r_i: usize,
    pub tau_a: f64,
    pub tau_i: f64,
    pub l: f64,
    /// Per-neuron firing threshold (length r_e).
    pub b: Vec<f64>,
    pub b_i: f64,
    /// Excitatory to inhibitory, r_i×r_e.
    pub w_ei: DenseMatrix<f64>,
    /// Inhibitory to excitatory, r_e×r_i, nonnegative.
    pub w_ie: DenseMatrix<f64>,
    /// Input weights, n×r_e.
    pub w_inp: DenseMatrix<f64>,
    pub dt: f64,
    pub max_steps: usize,
    pub tol: f64,
    pub coupling: EiCoupling,
}

impl EiDynamicsConfig {
    /// Random fixed connectivity: each E→I and I→E synapse exists with
    /// probability `p` (strength 1 and 1/(p r_i) respectively). Input weights are
    /// `max(U(−1,1), 0)` with unit-norm columns.
    pub fn random(n: usize, r_e: usize, r_i: usize, p: f64, rng: &mut Rng) -> Self {
        let w_ei = DenseMatrix::from_fn(r_i, r_e, |_, _| if rng.bernoulli(p) { 1.0 } else { 0.0 });
        let strength = 1.0 / (p * r_i as f64);
        let w_ie = DenseMatrix::from_fn(r_e, r_i, |_, _| if rng.bernoulli(p) { strength } else { 0.0 });
        let mut w_inp = DenseMatrix::from_fn(n, r_e, |_, _| rng.uniform_range(-1.0, 1.0).max(0.0));
        let norms = w_inp.column_norms();
        for i in 0..n {
            for (v, &nrm) in w_inp.row_mut(i).iter_mut().zip(&norms) {
                if nrm > 0.0 {
                    *v /= nrm;
                }
            }
        }
        Self {
            r_e,
            r_i,
            tau_a: 1.0,
            tau_i: 1.0,
            l: 1.0,
            b: vec![0.0; r_e],
            b_i: 0.0,
            w_ei,
            w_ie,
            w_inp,
            dt: 0.1,
            max_steps: 10_000,
            tol: 1e-6,
            coupling: EiCoupling::Inhibitory,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(SdmError::InvalidParameter(what.to_string()));
        if !(self.tau_a > 0.0 && self.tau_i > 0.0) {
            return bad("time constants must be positive");
        }
        if !(self.l > 0.0 && self.dt > 0.0) {
            return bad("L and the step size must be positive");
        }
        let shapes = [
            (self.w_ei.shape(), (self.r_i, self.r_e)),
            (self.w_ie.shape(), (self.r_e, self.r_i)),
            ((self.w_inp.cols(), self.b.len()), (self.r_e, self.r_e)),
        ];
        for (found, expected) in shapes {
            if found != expected {
                return Err(SdmError::DimensionMismatch {
                    expected: expected.0 * expected.1,
                    found: found.0 * found.1,
                });
            }
        }
        Ok(())
    }
}

/// Rate below which an excitatory unit counts as silent.
pub const EI_ACTIVE_THRESHOLD: f64 = 1e-3;

/// Nonnegative unit-norm input where each coordinate is nonzero with
/// probability `density`. At least one coordinate is always set.
pub fn sparse_unit_input(n: usize, density: f64, rng: &mut Rng) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n)
        .map(|_| if rng.bernoulli(density) { rng.uniform() } else { 0.0 })
        .collect();
    if n > 0 && x.iter().all(|&v| v == 0.0) {
        x[rng.below(n)] = 1.0;
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct EiOutcome {
    pub e: DenseVector<f64>,
    pub i: DenseVector<f64>,
    pub steps: usize,
    pub converged: bool,
}

impl EiOutcome {
    pub fn active_count(&self, threshold: f64) -> usize {
        self.e.iter().filter(|&&v| v > threshold).count()
    }
}

/// Euler-integrates the excitatory/inhibitory rate equations from
/// `e = W_inpᵀ x`, `i = 0` until the largest per-step change falls below the
/// tolerance. Running out of steps is reported through `converged`.
pub fn simulate_ei_dynamics(cfg: &EiDynamicsConfig, input: &[f64]) -> Result<EiOutcome> {
    cfg.validate()?;
    if input.len() != cfg.w_inp.rows() {
        return Err(SdmError::DimensionMismatch {
            expected: cfg.w_inp.rows(),
            found: input.len(),
        });
    }
    let e0 = transpose_matvec(&cfg.w_inp, input)?;
    let mut e = e0.clone();
    let mut i = DenseVector::<f64>::zeros(cfg.r_i);
    let sign = match cfg.coupling {
        EiCoupling::Inhibitory => -1.0,
        EiCoupling::AsPrinted => 1.0,
    };
    let mut steps = 0;
    let mut converged = false;
    while steps < cfg.max_steps {
        steps += 1;
        let fb = matvec(&cfg.w_ie, &i)?;
        let p_i = matvec(&cfg.w_ei, &e)?;
        let mut change: f64 = 0.0;
        let mut next_e = e.clone();
        for j in 0..cfg.r_e {
            let p_a = e0[j] + sign * fb[j];
            let drive = ((p_a - cfg.b[j]) / cfg.l).max(0.0).tanh();
            let delta = cfg.dt * (drive - e[j]) / cfg.tau_a;
            next_e[j] += delta;
            change = change.max(delta.abs());
        }
        for (k, &p) in p_i.iter().enumerate() {
            let delta = cfg.dt * ((p - cfg.b_i).max(0.0) - i[k]) / cfg.tau_i;
            i[k] += delta;
            change = change.max(delta.abs());
        }
        e = next_e;
        if !change.is_finite() {
            return Err(SdmError::Numerics(NumericsError::NonFinite));
        }
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EiOutcome { e, i, steps, converged })
}
