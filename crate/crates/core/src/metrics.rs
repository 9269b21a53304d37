//! Input-impact and output-error functions.
//!
//! Notation follows the store: for each element `x` is its current state and
//! `x'` its reference state, `m` counts modified elements and `n` all
//! elements of the change set.
//!
//! | function        | value                                              |
//! |-----------------|----------------------------------------------------|
//! | [`impact_abs`]  | `Σ_m |x − x'| · m`                                  |
//! | [`impact_rel`]  | `Σ_m |x − x'| · m / (Σ_m max(x, x') · n)`, in [0,1] |
//! | [`error_rel`]   | `Σ_m |x − x'| · m / (Σ_n x' · n)`, in [0,1]         |
//! | [`error_rmse`]  | `sqrt(Σ_m (x − x')² / m)`                           |
//!
//! All four are exactly zero when nothing changed in magnitude. The two
//! relative forms return 1 when there is a change but the denominator is
//! not positive (an all-zero baseline).
//!
//! User metrics plug in through [`CustomMetric`]: `process_element` maps
//! each element to a small tuple, `aggregate` folds tuples as they are
//! produced and `compute` turns the final accumulator into the value. The
//! built-ins are available in that form from [`hooks`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use smallvec::SmallVec;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::store::{ChangeSet, ElementChange};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("metric evaluation failed at key `{key}`: {reason}")]
    Evaluation { key: String, reason: String },
    #[error("metric compute step failed: {0}")]
    Compute(String),
    #[error("accumulate called on a {0} impact state")]
    ModeMisuse(AccumulationMode),
    #[error("unknown custom metric `{0}`")]
    UnknownCustom(String),
    #[error("invalid metric name `{0}`")]
    InvalidName(String),
}

struct Sums<T> {
    abs_delta: T,
    sq_delta: T,
    max_modified: T,
    previous_all: T,
    m: usize,
    n: usize,
}

fn sums<T: Scalar, C: ChangeSet<T>>(set: &C) -> Sums<T> {
    let mut s = Sums {
        abs_delta: T::zero(),
        sq_delta: T::zero(),
        max_modified: T::zero(),
        previous_all: T::zero(),
        m: 0,
        n: 0,
    };
    for c in set.changes() {
        s.n += 1;
        s.previous_all += c.previous;
        if c.modified {
            let d = c.current - c.previous;
            s.m += 1;
            s.abs_delta += d.abs();
            s.sq_delta += d * d;
            s.max_modified += c.current.max(c.previous);
        }
    }
    s
}

/// `num / den` clamped to [0,1], with the zero-change and degenerate
/// denominator rules applied.
fn relative<T: Scalar>(numerator: T, denominator: T) -> T {
    if numerator <= T::zero() {
        T::zero()
    } else if denominator <= T::zero() || !denominator.is_finite() {
        T::one()
    } else {
        (numerator / denominator).min(T::one())
    }
}

pub fn impact_abs<T: Scalar, C: ChangeSet<T>>(set: &C) -> T {
    let s = sums(set);
    s.abs_delta * T::of_count(s.m)
}

pub fn impact_rel<T: Scalar, C: ChangeSet<T>>(set: &C) -> T {
    let s = sums(set);
    relative(
        s.abs_delta * T::of_count(s.m),
        s.max_modified * T::of_count(s.n),
    )
}

pub fn error_rel<T: Scalar, C: ChangeSet<T>>(set: &C) -> T {
    let s = sums(set);
    relative(
        s.abs_delta * T::of_count(s.m),
        s.previous_all * T::of_count(s.n),
    )
}

pub fn error_rmse<T: Scalar, C: ChangeSet<T>>(set: &C) -> T {
    let s = sums(set);
    if s.m == 0 {
        return T::zero();
    }
    (s.sq_delta / T::of_count(s.m)).sqrt()
}

/// Geometric mean of per-predecessor impacts.
pub fn combine_predecessors<T: Scalar>(impacts: &[T]) -> Result<T, MetricError> {
    if impacts.is_empty() {
        return Err(MetricError::InvalidArgument(
            "cannot combine an empty list of impacts".into(),
        ));
    }
    if let Some(bad) = impacts.iter().find(|v| v.is_nan() || **v < T::zero()) {
        return Err(MetricError::InvalidArgument(format!(
            "impacts must be non-negative, got {bad}"
        )));
    }
    if impacts.len() == 1 {
        return Ok(impacts[0]);
    }
    if impacts.iter().any(|v| v.is_zero()) {
        return Ok(T::zero());
    }
    // Log domain keeps long products of large impacts finite.
    let mean_log = impacts.iter().map(|v| v.ln()).sum::<T>() / T::of_count(impacts.len());
    let lo = impacts.iter().copied().fold(T::infinity(), T::min);
    let hi = impacts.iter().copied().fold(T::neg_infinity(), T::max);
    Ok(mean_log.exp().max(lo).min(hi))
}

/// Tuple passed between the custom-metric hooks.
pub type Tuple<T> = SmallVec<[T; 4]>;

/// User-defined impact or error function.
///
/// `process_element` is called for every element of the change set, with
/// `modified` telling whether it counts towards `m`. Hooks must be pure;
/// element order is unspecified.
pub trait CustomMetric<T: Scalar>: Send + Sync {
    fn process_element(&self, change: &ElementChange<'_, T>) -> Result<Tuple<T>, String>;

    /// Folds one processed tuple into the accumulator, which starts empty.
    fn aggregate(&self, acc: Tuple<T>, item: Tuple<T>) -> Tuple<T>;

    fn compute(&self, acc: &Tuple<T>, n: usize, m: usize) -> Result<T, String>;
}

/// Streams every element through the hooks without buffering them.
pub fn run_custom<T: Scalar, C: ChangeSet<T>>(
    metric: &dyn CustomMetric<T>,
    set: &C,
) -> Result<T, MetricError> {
    let mut acc = Tuple::new();
    let (mut n, mut m) = (0, 0);
    for change in set.changes() {
        n += 1;
        if change.modified {
            m += 1;
        }
        let item = metric
            .process_element(&change)
            .map_err(|reason| MetricError::Evaluation {
                key: change.key.to_owned(),
                reason,
            })?;
        acc = metric.aggregate(acc, item);
    }
    metric.compute(&acc, n, m).map_err(MetricError::Compute)
}

/// Element-wise sum, padding the shorter side with zeros.
pub fn add_elementwise<T: Scalar>(mut acc: Tuple<T>, item: Tuple<T>) -> Tuple<T> {
    if acc.len() < item.len() {
        acc.resize(item.len(), T::zero());
    }
    for (a, b) in acc.iter_mut().zip(item) {
        *a += b;
    }
    acc
}

type ProcessFn<T> = dyn Fn(&ElementChange<'_, T>) -> Result<Tuple<T>, String> + Send + Sync;
type AggregateFn<T> = dyn Fn(Tuple<T>, Tuple<T>) -> Tuple<T> + Send + Sync;
type ComputeFn<T> = dyn Fn(&Tuple<T>, usize, usize) -> Result<T, String> + Send + Sync;

/// A [`CustomMetric`] assembled from three closures.
pub struct HookMetric<T> {
    process: Box<ProcessFn<T>>,
    aggregate: Box<AggregateFn<T>>,
    compute: Box<ComputeFn<T>>,
}

impl<T: Scalar> HookMetric<T> {
    pub fn new(
        process: impl Fn(&ElementChange<'_, T>) -> Result<Tuple<T>, String> + Send + Sync + 'static,
        aggregate: impl Fn(Tuple<T>, Tuple<T>) -> Tuple<T> + Send + Sync + 'static,
        compute: impl Fn(&Tuple<T>, usize, usize) -> Result<T, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            process: Box::new(process),
            aggregate: Box::new(aggregate),
            compute: Box::new(compute),
        }
    }
}

impl<T: Scalar> CustomMetric<T> for HookMetric<T> {
    fn process_element(&self, change: &ElementChange<'_, T>) -> Result<Tuple<T>, String> {
        (self.process)(change)
    }

    fn aggregate(&self, acc: Tuple<T>, item: Tuple<T>) -> Tuple<T> {
        (self.aggregate)(acc, item)
    }

    fn compute(&self, acc: &Tuple<T>, n: usize, m: usize) -> Result<T, String> {
        (self.compute)(acc, n, m)
    }
}

/// The built-in functions written against the hook API.
pub mod hooks {
    use super::*;
    use smallvec::smallvec;

    fn slot<T: Scalar>(acc: &Tuple<T>, i: usize) -> T {
        acc.get(i).copied().unwrap_or_else(T::zero)
    }

    fn modified_delta<T: Scalar>(c: &ElementChange<'_, T>) -> T {
        if c.modified {
            (c.current - c.previous).abs()
        } else {
            T::zero()
        }
    }

    pub fn abs_magnitude<T: Scalar>() -> HookMetric<T> {
        HookMetric::new(
            |c| Ok(smallvec![modified_delta(c)]),
            add_elementwise,
            |acc, _n, m| Ok(slot(acc, 0) * T::of_count(m)),
        )
    }

    pub fn relative_impact<T: Scalar>() -> HookMetric<T> {
        HookMetric::new(
            |c: &ElementChange<'_, T>| {
                let max = if c.modified {
                    c.current.max(c.previous)
                } else {
                    T::zero()
                };
                Ok(smallvec![modified_delta(c), max])
            },
            add_elementwise,
            |acc, n, m| {
                Ok(relative(
                    slot(acc, 0) * T::of_count(m),
                    slot(acc, 1) * T::of_count(n),
                ))
            },
        )
    }

    pub fn relative_error<T: Scalar>() -> HookMetric<T> {
        HookMetric::new(
            |c| Ok(smallvec![modified_delta(c), c.previous]),
            add_elementwise,
            |acc, n, m| {
                Ok(relative(
                    slot(acc, 0) * T::of_count(m),
                    slot(acc, 1) * T::of_count(n),
                ))
            },
        )
    }

    pub fn rmse<T: Scalar>() -> HookMetric<T> {
        HookMetric::new(
            |c| {
                let d = modified_delta(c);
                Ok(smallvec![d * d])
            },
            add_elementwise,
            |acc, _n, m| {
                if m == 0 {
                    Ok(T::zero())
                } else {
                    Ok((slot(acc, 0) / T::of_count(m)).sqrt())
                }
            },
        )
    }
}

/// Impact function selected in a workflow file: `abs`, `rel` or `custom:<id>`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ImpactMetric {
    Abs,
    #[default]
    Rel,
    Custom(String),
}

/// Error function selected in a workflow file: `rel`, `rmse` or `custom:<id>`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ErrorMetric {
    #[default]
    Rel,
    Rmse,
    Custom(String),
}

fn custom_id(text: &str) -> Option<Result<String, MetricError>> {
    text.strip_prefix("custom:").map(|id| {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            Err(MetricError::InvalidName(text.to_owned()))
        } else {
            Ok(id.to_owned())
        }
    })
}

impl FromStr for ImpactMetric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abs" => Ok(Self::Abs),
            "rel" => Ok(Self::Rel),
            other => match custom_id(other) {
                Some(id) => id.map(Self::Custom),
                None => Err(MetricError::InvalidName(other.to_owned())),
            },
        }
    }
}

impl FromStr for ErrorMetric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rel" => Ok(Self::Rel),
            "rmse" => Ok(Self::Rmse),
            other => match custom_id(other) {
                Some(id) => id.map(Self::Custom),
                None => Err(MetricError::InvalidName(other.to_owned())),
            },
        }
    }
}

impl fmt::Display for ImpactMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Abs => f.write_str("abs"),
            Self::Rel => f.write_str("rel"),
            Self::Custom(id) => write!(f, "custom:{id}"),
        }
    }
}

impl fmt::Display for ErrorMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rel => f.write_str("rel"),
            Self::Rmse => f.write_str("rmse"),
            Self::Custom(id) => write!(f, "custom:{id}"),
        }
    }
}

/// Custom metrics available to workflows by id.
pub struct MetricRegistry<T> {
    metrics: BTreeMap<String, Arc<dyn CustomMetric<T>>>,
}

impl<T> Default for MetricRegistry<T> {
    fn default() -> Self {
        Self {
            metrics: BTreeMap::new(),
        }
    }
}

impl<T> Clone for MetricRegistry<T> {
    fn clone(&self) -> Self {
        Self {
            metrics: self.metrics.clone(),
        }
    }
}

impl<T: Scalar> MetricRegistry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: impl Into<String>, metric: impl CustomMetric<T> + 'static) {
        self.metrics.insert(id.into(), Arc::new(metric));
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn CustomMetric<T>>, MetricError> {
        self.metrics
            .get(id)
            .cloned()
            .ok_or_else(|| MetricError::UnknownCustom(id.to_owned()))
    }
}

/// A metric resolved against a registry, ready to evaluate.
#[derive(Clone)]
pub enum MetricFn<T> {
    AbsMagnitude,
    RelativeImpact,
    RelativeError,
    Rmse,
    Custom(Arc<dyn CustomMetric<T>>),
}

impl<T> fmt::Debug for MetricFn<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AbsMagnitude => f.write_str("AbsMagnitude"),
            Self::RelativeImpact => f.write_str("RelativeImpact"),
            Self::RelativeError => f.write_str("RelativeError"),
            Self::Rmse => f.write_str("Rmse"),
            Self::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl<T: Scalar> MetricFn<T> {
    pub fn for_impact(
        sel: &ImpactMetric,
        registry: &MetricRegistry<T>,
    ) -> Result<Self, MetricError> {
        Ok(match sel {
            ImpactMetric::Abs => Self::AbsMagnitude,
            ImpactMetric::Rel => Self::RelativeImpact,
            ImpactMetric::Custom(id) => Self::Custom(registry.get(id)?),
        })
    }

    pub fn for_error(sel: &ErrorMetric, registry: &MetricRegistry<T>) -> Result<Self, MetricError> {
        Ok(match sel {
            ErrorMetric::Rel => Self::RelativeError,
            ErrorMetric::Rmse => Self::Rmse,
            ErrorMetric::Custom(id) => Self::Custom(registry.get(id)?),
        })
    }

    pub fn evaluate<C: ChangeSet<T>>(&self, set: &C) -> Result<T, MetricError> {
        match self {
            Self::AbsMagnitude => Ok(impact_abs(set)),
            Self::RelativeImpact => Ok(impact_rel(set)),
            Self::RelativeError => Ok(error_rel(set)),
            Self::Rmse => Ok(error_rmse(set)),
            Self::Custom(metric) => run_custom(metric.as_ref(), set),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccumulationMode {
    Cumulative,
    #[default]
    Cancellation,
}

impl fmt::Display for AccumulationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cumulative => "cumulative",
            Self::Cancellation => "cancellation",
        })
    }
}

impl FromStr for AccumulationMode {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cumulative" => Ok(Self::Cumulative),
            "cancellation" => Ok(Self::Cancellation),
            other => Err(MetricError::InvalidName(other.to_owned())),
        }
    }
}

/// Running input impact of one step since its last execution.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactState<T> {
    pub step: String,
    pub mode: AccumulationMode,
    pub accumulated: T,
    pub per_predecessor: BTreeMap<String, T>,
}

impl<T: Scalar> ImpactState<T> {
    pub fn new(step: impl Into<String>, mode: AccumulationMode) -> Self {
        Self {
            step: step.into(),
            mode,
            accumulated: T::zero(),
            per_predecessor: BTreeMap::new(),
        }
    }

    /// Called when the owning step executes.
    pub fn reset(&mut self) {
        self.accumulated = T::zero();
        self.per_predecessor.clear();
    }
}

/// Adds one wave's impact to a cumulative state.
pub fn accumulate<T: Scalar>(
    mut state: ImpactState<T>,
    wave_impact: T,
) -> Result<ImpactState<T>, MetricError> {
    if state.mode != AccumulationMode::Cumulative {
        return Err(MetricError::ModeMisuse(state.mode));
    }
    state.accumulated += wave_impact;
    Ok(state)
}
