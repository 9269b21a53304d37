//! Workflow DAG and the wave loop.
//!
//! Each wave feeds new records to the source steps and then walks the
//! steps in topological order. In synchronous mode every step runs and the
//! engine records, for each tolerant step, the input impact it would have
//! seen and whether a virtually skipped copy of its output would have
//! exceeded the bound. In asynchronous mode a [`TriggerPolicy`] (usually a
//! trained [`Predictor`]) decides which eligible tolerant steps run.
//!
//! Every step keeps its own reference points on its input containers, so
//! several consumers of one container never interfere with each other.

mod history;
mod workflow;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use log::debug;
use thiserror::Error;

pub use history::{trigger_eligible, ExecutionHistory, LastRun};
pub use workflow::{load_workflow, StepSpec, WorkflowError, WorkflowSpec};

use crate::learn::{KnowledgeBase, LearnError, Predictor, TrainingExample};
use crate::metrics::{
    accumulate, combine_predecessors, AccumulationMode, ImpactState, MetricError, MetricFn,
    MetricRegistry,
};
use crate::scalar::Scalar;
use crate::store::{
    ColumnStore, DataContainer, Divergence, Reference, SinceReference, StoreError, Union,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("no action registered for step `{0}`")]
    MissingAction(String),
    #[error("step `{step}` failed at wave {wave}: {reason}")]
    StepFailed {
        step: String,
        wave: u64,
        reason: String,
    },
    #[error("no trained model available")]
    NotTrained,
    #[error("model expects {expected} features, workflow has {actual} tolerant steps")]
    Shape { expected: usize, actual: usize },
    #[error("trigger policy failed: {0}")]
    Policy(String),
}

/// Failure reported by a step action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionError(pub String);

impl fmt::Display for ActionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ActionError {}

impl From<StoreError> for ActionError {
    fn from(e: StoreError) -> Self {
        Self(e.to_string())
    }
}

impl From<String> for ActionError {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl From<&str> for ActionError {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// One input record of a wave, addressed to a feed channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedRecord<T> {
    pub channel: String,
    pub key: String,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WaveInput<T> {
    pub wave: u64,
    pub records: Vec<FeedRecord<T>>,
}

/// What an action sees: the wave's feed, its input containers (read-only)
/// and its output containers.
pub struct StepContext<'a, T> {
    wave: u64,
    step: &'a StepSpec,
    store: &'a mut ColumnStore<T>,
    feed: &'a [FeedRecord<T>],
}

impl<'a, T: Scalar> StepContext<'a, T> {
    pub fn wave(&self) -> u64 {
        self.wave
    }

    pub fn step(&self) -> &StepSpec {
        self.step
    }

    pub fn feed(&self) -> &[FeedRecord<T>] {
        self.feed
    }

    fn readable(&self, name: &str) -> bool {
        self.step
            .inputs
            .iter()
            .chain(&self.step.outputs)
            .any(|c| c == name)
    }

    /// An input or output container of this step.
    pub fn container(&self, name: &str) -> Result<&DataContainer<T>, ActionError> {
        if !self.readable(name) {
            return Err(ActionError(format!(
                "step `{}` does not bind container `{name}`",
                self.step.id
            )));
        }
        Ok(self.store.container(name)?)
    }

    pub fn get(&self, container: &str, key: &str) -> Result<T, ActionError> {
        Ok(self
            .container(container)?
            .get(key)
            .ok_or_else(|| StoreError::KeyNotFound {
                container: container.to_owned(),
                key: key.to_owned(),
            })?)
    }

    pub fn get_or(&self, container: &str, key: &str, default: T) -> Result<T, ActionError> {
        Ok(self.container(container)?.get(key).unwrap_or(default))
    }

    /// Writes to one of this step's output containers.
    pub fn put(&mut self, container: &str, key: &str, value: T) -> Result<(), ActionError> {
        if !self.step.outputs.iter().any(|c| c == container) {
            return Err(ActionError(format!(
                "step `{}` cannot write `{container}`: not an output",
                self.step.id
            )));
        }
        Ok(self.store.put(container, key, value)?)
    }
}

/// A step's computation. Actions keep no state of their own; anything that
/// must persist between waves lives in the step's output containers.
pub type StepAction<T> =
    Arc<dyn Fn(&mut StepContext<'_, T>) -> Result<(), ActionError> + Send + Sync>;

pub struct ActionRegistry<T> {
    actions: BTreeMap<String, StepAction<T>>,
}

impl<T> Default for ActionRegistry<T> {
    fn default() -> Self {
        Self {
            actions: BTreeMap::new(),
        }
    }
}

impl<T> Clone for ActionRegistry<T> {
    fn clone(&self) -> Self {
        Self {
            actions: self.actions.clone(),
        }
    }
}

impl<T: Scalar> ActionRegistry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, step: impl Into<String>, action: F) -> &mut Self
    where
        F: Fn(&mut StepContext<'_, T>) -> Result<(), ActionError> + Send + Sync + 'static,
    {
        self.actions.insert(step.into(), Arc::new(action));
        self
    }

    pub fn get(&self, step: &str) -> Option<&StepAction<T>> {
        self.actions.get(step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EngineConfig {
    /// Force a tolerant step after this many consecutive eligible skips.
    pub force_after: Option<u32>,
    /// Append a training example per synchronous wave.
    pub record_knowledge: bool,
}

impl EngineConfig {
    pub fn training() -> Self {
        Self {
            force_after: None,
            record_knowledge: true,
        }
    }
}

/// Which steps ran in a wave.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Decision {
    pub wave: u64,
    pub execute: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveResult<T> {
    pub decision: Decision,
    pub eligible: BTreeMap<String, bool>,
    /// Steps executed by the forced-execution rule or by `TriggerPolicy::force`.
    pub forced: Vec<String>,
    /// Input impact of each tolerant step whose impact was computed.
    pub iota: BTreeMap<String, T>,
    /// Error metric of the step's inputs against their state at its last execution.
    pub predicted_error: BTreeMap<String, T>,
    /// Synchronous mode only: error of the virtually skipped output.
    pub simulated_error: BTreeMap<String, T>,
    /// Synchronous mode only: steps that ran in the simulated skipping
    /// run, where tolerant steps execute only when their label is set.
    pub virtual_runs: BTreeSet<String>,
    pub example: Option<TrainingExample<T>>,
}

impl<T> WaveResult<T> {
    pub fn wave(&self) -> u64 {
        self.decision.wave
    }

    pub fn executed(&self, step: &str) -> bool {
        self.decision.execute.get(step).copied().unwrap_or(false)
    }
}

/// Information handed to a policy for one tolerant step.
#[derive(Debug)]
pub struct DecisionContext<'a, T> {
    pub wave: u64,
    pub step: &'a StepSpec,
    /// Position of the step among the tolerant steps (the label index).
    pub label: usize,
    pub eligible: bool,
    /// Latest input impact of every tolerant step.
    pub features: &'a [T],
    pub iota: Option<T>,
    pub predicted_error: Option<T>,
    /// Consecutive eligible waves the step has been skipped.
    pub skip_streak: u32,
}

/// Decides which tolerant steps run in asynchronous mode.
pub trait TriggerPolicy<T> {
    /// Called for eligible tolerant steps.
    fn decide(&mut self, ctx: &DecisionContext<'_, T>) -> Result<bool, EngineError>;

    /// Called for ineligible non-source steps; returning true runs the step
    /// anyway on its predecessors' current output.
    fn force(&mut self, _ctx: &DecisionContext<'_, T>) -> Result<bool, EngineError> {
        Ok(false)
    }
}

/// Runs every eligible step.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysExecute;

impl<T> TriggerPolicy<T> for AlwaysExecute {
    fn decide(&mut self, _ctx: &DecisionContext<'_, T>) -> Result<bool, EngineError> {
        Ok(true)
    }
}

/// Asks a trained classifier.
pub struct ModelPolicy<'a, T> {
    model: &'a dyn Predictor<T>,
}

impl<'a, T> ModelPolicy<'a, T> {
    pub fn new(model: &'a dyn Predictor<T>) -> Self {
        Self { model }
    }
}

impl<T: Scalar> TriggerPolicy<T> for ModelPolicy<'_, T> {
    fn decide(&mut self, ctx: &DecisionContext<'_, T>) -> Result<bool, EngineError> {
        Ok(self.model.predict_label(ctx.features, ctx.label)?)
    }
}

/// Reference points and impact state over a step's inputs.
#[derive(Debug, Clone)]
struct Tracker<T> {
    state: ImpactState<T>,
    /// Input state at the last (real or virtual) execution.
    anchor: Vec<Reference<T>>,
    /// Input state at the last observation; cumulative mode only.
    last_seen: Vec<Reference<T>>,
}

fn capture<T: Scalar>(
    store: &ColumnStore<T>,
    names: &[String],
) -> Result<Vec<Reference<T>>, StoreError> {
    names.iter().map(|n| store.reference(n)).collect()
}

fn since_all<'a, T: Scalar>(
    store: &'a ColumnStore<T>,
    names: &[String],
    refs: &'a [Reference<T>],
    pick: impl Iterator<Item = usize>,
) -> Result<Vec<SinceReference<'a, T>>, StoreError> {
    pick.map(|i| Ok(SinceReference::new(store.container(&names[i])?, &refs[i])))
        .collect()
}

impl<T: Scalar> Tracker<T> {
    fn new(step: &StepSpec) -> Self {
        let empty: Vec<_> = step.inputs.iter().map(Reference::empty).collect();
        Self {
            state: ImpactState::new(step.id.clone(), step.mode),
            anchor: empty.clone(),
            last_seen: empty,
        }
    }

    fn reset(&mut self, store: &ColumnStore<T>, inputs: &[String]) -> Result<(), StoreError> {
        self.anchor = capture(store, inputs)?;
        self.last_seen = self.anchor.clone();
        self.state.reset();
        Ok(())
    }

    fn observe(
        &mut self,
        store: &ColumnStore<T>,
        inputs: &[String],
        groups: &[(String, Vec<usize>)],
        impact: &MetricFn<T>,
    ) -> Result<T, EngineError> {
        let refs = match self.state.mode {
            AccumulationMode::Cumulative => &self.last_seen,
            AccumulationMode::Cancellation => &self.anchor,
        };
        let mut per = BTreeMap::new();
        let mut values = Vec::with_capacity(groups.len());
        for (pred, members) in groups {
            let views = since_all(store, inputs, refs, members.iter().copied())?;
            let value = impact.evaluate(&Union(&views))?;
            per.insert(pred.clone(), value);
            values.push(value);
        }
        let combined = if values.is_empty() {
            T::zero()
        } else {
            combine_predecessors(&values)?
        };
        match self.state.mode {
            AccumulationMode::Cancellation => self.state.accumulated = combined,
            AccumulationMode::Cumulative => {
                let state = std::mem::replace(
                    &mut self.state,
                    ImpactState::new(String::new(), AccumulationMode::Cumulative),
                );
                self.state = accumulate(state, combined)?;
                self.last_seen = capture(store, inputs)?;
            }
        }
        self.state.per_predecessor = per;
        Ok(self.state.accumulated)
    }

    fn input_error(
        &self,
        store: &ColumnStore<T>,
        inputs: &[String],
        error: &MetricFn<T>,
    ) -> Result<T, EngineError> {
        let views = since_all(store, inputs, &self.anchor, 0..inputs.len())?;
        Ok(error.evaluate(&Union(&views))?)
    }
}

#[derive(Debug, Clone)]
struct StepRuntime<T> {
    impact: MetricFn<T>,
    error: MetricFn<T>,
    max_error: T,
    /// Input container indices grouped by the predecessor that writes them.
    groups: Vec<(String, Vec<usize>)>,
    /// Relative to the last real execution.
    live: Tracker<T>,
    /// Relative to the last virtual execution (synchronous mode).
    shadow: Tracker<T>,
    /// Output state at the last virtual execution.
    virtual_out: Vec<Reference<T>>,
    skip_streak: u32,
    /// Label index for tolerant steps.
    label: Option<usize>,
}

/// Mutable state that a failed wave rolls back.
#[derive(Clone)]
struct Runtime<T> {
    steps: Vec<StepRuntime<T>>,
    history: ExecutionHistory,
    /// Executions of the simulated skipping run.
    virtual_history: ExecutionHistory,
    features: Vec<T>,
}

pub struct Engine<T> {
    spec: WorkflowSpec,
    order: Vec<usize>,
    actions: Vec<StepAction<T>>,
    tolerant: Vec<String>,
    rt: Runtime<T>,
    store: ColumnStore<T>,
    knowledge: KnowledgeBase<T>,
    /// Simulated executions per recorded example.
    virtual_runs: Vec<BTreeSet<String>>,
    config: EngineConfig,
}

impl<T: Scalar> Engine<T> {
    pub fn new(
        spec: WorkflowSpec,
        actions: &ActionRegistry<T>,
        metrics: &MetricRegistry<T>,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        spec.validate()?;
        let order = spec.topological_order()?;
        let mut store = ColumnStore::new();
        let mut writer = BTreeMap::new();
        for step in &spec.steps {
            for out in &step.outputs {
                store.create_container(out);
                writer.insert(out.clone(), step.id.clone());
            }
        }
        let step_actions = spec
            .steps
            .iter()
            .map(|s| {
                actions
                    .get(&s.id)
                    .cloned()
                    .ok_or_else(|| EngineError::MissingAction(s.id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tolerant: Vec<String> = order
            .iter()
            .map(|&i| &spec.steps[i])
            .filter(|s| s.is_tolerant())
            .map(|s| s.id.clone())
            .collect();
        let mut steps = Vec::with_capacity(spec.steps.len());
        for step in &spec.steps {
            let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
            for pred in &step.predecessors {
                let members: Vec<usize> = step
                    .inputs
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| writer.get(*c) == Some(pred))
                    .map(|(i, _)| i)
                    .collect();
                if !members.is_empty() {
                    groups.push((pred.clone(), members));
                }
            }
            steps.push(StepRuntime {
                impact: MetricFn::for_impact(&step.impact, metrics)?,
                error: MetricFn::for_error(&step.error, metrics)?,
                max_error: T::of(step.max_error),
                groups,
                live: Tracker::new(step),
                shadow: Tracker::new(step),
                virtual_out: step.outputs.iter().map(Reference::empty).collect(),
                skip_streak: 0,
                label: tolerant.iter().position(|t| *t == step.id),
            });
        }
        let features = vec![T::zero(); tolerant.len()];
        Ok(Self {
            knowledge: KnowledgeBase::new(tolerant.clone()),
            virtual_runs: Vec::new(),
            spec,
            order,
            actions: step_actions,
            tolerant,
            rt: Runtime {
                steps,
                history: ExecutionHistory::new(),
                virtual_history: ExecutionHistory::new(),
                features,
            },
            store,
            config,
        })
    }

    pub fn spec(&self) -> &WorkflowSpec {
        &self.spec
    }

    pub fn store(&self) -> &ColumnStore<T> {
        &self.store
    }

    pub fn config(&self) -> EngineConfig {
        self.config
    }

    pub fn set_config(&mut self, config: EngineConfig) {
        self.config = config;
    }

    /// Tolerant step ids in feature/label order.
    pub fn tolerant_steps(&self) -> &[String] {
        &self.tolerant
    }

    pub fn history(&self) -> &ExecutionHistory {
        &self.rt.history
    }

    pub fn knowledge(&self) -> &KnowledgeBase<T> {
        &self.knowledge
    }

    pub fn take_knowledge(&mut self) -> KnowledgeBase<T> {
        self.virtual_runs.clear();
        std::mem::replace(
            &mut self.knowledge,
            KnowledgeBase::new(self.tolerant.clone()),
        )
    }

    /// The recorded knowledge with lookahead labels. A skipped step only
    /// sees new input when a predecessor runs again, so its label at a wave
    /// is set when its plain label is set at that wave or at any later wave
    /// before one of its predecessors next runs in the simulated skipping
    /// run. Assumes the examples cover consecutive waves.
    pub fn lookahead_knowledge(&self) -> Result<KnowledgeBase<T>, EngineError> {
        let examples = self.knowledge.examples();
        let mut labels: Vec<Vec<bool>> = examples.iter().map(|e| e.labels.clone()).collect();
        for (l, id) in self.tolerant.iter().enumerate() {
            let preds = self.spec.step(id).map_or(&[][..], |s| &s.predecessors[..]);
            let mut carry = false;
            for i in (0..examples.len()).rev() {
                labels[i][l] |= carry;
                let fresh = preds.iter().any(|p| self.virtual_runs[i].contains(p));
                carry = !fresh && labels[i][l];
            }
        }
        let mut kb = KnowledgeBase::new(self.tolerant.clone());
        for (e, labels) in examples.iter().zip(labels) {
            kb.push(TrainingExample {
                wave: e.wave,
                features: e.features.clone(),
                labels,
            })?;
        }
        Ok(kb)
    }

    /// Latest input impact per tolerant step.
    pub fn features(&self) -> &[T] {
        &self.rt.features
    }

    /// Current accumulated impact of a step relative to its last execution.
    pub fn impact_state(&self, step: &str) -> Option<&ImpactState<T>> {
        self.spec
            .index_of(step)
            .map(|i| &self.rt.steps[i].live.state)
    }

    /// Error of this engine's output of `step` when `truth` holds the
    /// correct output, using the step's error function.
    pub fn output_error(&self, step: &str, truth: &ColumnStore<T>) -> Result<T, EngineError> {
        let i = self
            .spec
            .index_of(step)
            .ok_or_else(|| WorkflowError::UnknownStep(step.to_owned()))?;
        let outputs = &self.spec.steps[i].outputs;
        let mut views = Vec::with_capacity(outputs.len());
        for out in outputs {
            views.push(Divergence::new(
                truth.container(out)?,
                self.store.container(out)?,
            ));
        }
        Ok(self.rt.steps[i].error.evaluate(&Union(&views))?)
    }

    /// Whether any output element of `step` differs from `truth`.
    pub fn output_differs(&self, step: &str, truth: &ColumnStore<T>) -> Result<bool, EngineError> {
        let spec = self
            .spec
            .step(step)
            .ok_or_else(|| WorkflowError::UnknownStep(step.to_owned()))?;
        for out in &spec.outputs {
            let fresh = truth.container(out)?;
            let stale = self.store.container(out)?;
            if fresh.len() != stale.len() || fresh.values().any(|(k, v)| stale.get(k) != Some(v)) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn execute(
        &mut self,
        idx: usize,
        input: &WaveInput<T>,
        rt: &mut Runtime<T>,
    ) -> Result<(), EngineError> {
        let step = &self.spec.steps[idx];
        let mut ctx = StepContext {
            wave: input.wave,
            step,
            store: &mut self.store,
            feed: &input.records,
        };
        (self.actions[idx])(&mut ctx).map_err(|e| EngineError::StepFailed {
            step: step.id.clone(),
            wave: input.wave,
            reason: e.0,
        })?;
        rt.history.record(&step.id, input.wave);
        let srt = &mut rt.steps[idx];
        srt.live.reset(&self.store, &step.inputs)?;
        srt.skip_streak = 0;
        Ok(())
    }

    /// Runs `body` against a copy of the runtime, committing only on success.
    fn transactional(
        &mut self,
        body: impl FnOnce(&mut Self, &mut Runtime<T>) -> Result<WaveResult<T>, EngineError>,
    ) -> Result<WaveResult<T>, EngineError> {
        let checkpoint = self.store.checkpoint();
        let mut rt = self.rt.clone();
        match body(self, &mut rt) {
            Ok(result) => {
                self.rt = rt;
                Ok(result)
            }
            Err(e) => {
                self.store.restore(checkpoint);
                Err(e)
            }
        }
    }

    /// Training-phase wave: runs every step and records what skipping
    /// would have cost.
    pub fn run_wave_sync(&mut self, input: &WaveInput<T>) -> Result<WaveResult<T>, EngineError> {
        let result = self.transactional(|engine, rt| engine.sync_body(input, rt))?;
        if let Some(example) = &result.example {
            self.knowledge.push(example.clone())?;
            self.virtual_runs.push(result.virtual_runs.clone());
        }
        Ok(result)
    }

    fn sync_body(
        &mut self,
        input: &WaveInput<T>,
        rt: &mut Runtime<T>,
    ) -> Result<WaveResult<T>, EngineError> {
        let mut result = WaveResult {
            decision: Decision {
                wave: input.wave,
                execute: BTreeMap::new(),
            },
            eligible: BTreeMap::new(),
            forced: Vec::new(),
            iota: BTreeMap::new(),
            predicted_error: BTreeMap::new(),
            simulated_error: BTreeMap::new(),
            virtual_runs: BTreeSet::new(),
            example: None,
        };
        let mut features = vec![T::zero(); self.tolerant.len()];
        let mut labels = vec![false; self.tolerant.len()];
        for k in 0..self.order.len() {
            let idx = self.order[k];
            let step = &self.spec.steps[idx];
            let id = step.id.clone();
            result
                .eligible
                .insert(id.clone(), trigger_eligible(&self.spec, &id, &rt.history));
            let label = rt.steps[idx].label;
            if label.is_some() {
                let srt = &mut rt.steps[idx];
                let iota =
                    srt.shadow
                        .observe(&self.store, &step.inputs, &srt.groups, &srt.impact)?;
                let eps = srt
                    .shadow
                    .input_error(&self.store, &step.inputs, &srt.error)?;
                result.iota.insert(id.clone(), iota);
                result.predicted_error.insert(id.clone(), eps);
            }
            // A step's first execution sets the virtual baseline even when
            // its output is all zeros.
            let first = rt.history.last(&id).is_none();
            let mut simulated = step.is_source()
                || label.is_none() && trigger_eligible(&self.spec, &id, &rt.virtual_history);
            self.execute(idx, input, rt)?;
            result.decision.execute.insert(id.clone(), true);
            if let Some(l) = label {
                let step = &self.spec.steps[idx];
                let srt = &mut rt.steps[idx];
                let mut views = Vec::with_capacity(step.outputs.len());
                for (out, reference) in step.outputs.iter().zip(&srt.virtual_out) {
                    views.push(Divergence::new(self.store.container(out)?, reference));
                }
                let eps = srt.error.evaluate(&Union(&views))?;
                let trigger = eps > srt.max_error;
                features[l] = result.iota[&id];
                labels[l] = trigger;
                result.simulated_error.insert(id.clone(), eps);
                if trigger || first {
                    srt.shadow.reset(&self.store, &step.inputs)?;
                    srt.virtual_out = capture(&self.store, &step.outputs)?;
                    simulated = true;
                }
            }
            if simulated {
                rt.virtual_history.record(&id, input.wave);
                result.virtual_runs.insert(id);
            }
        }
        rt.features.iter_mut().for_each(|f| *f = T::zero());
        if self.config.record_knowledge {
            result.example = Some(TrainingExample {
                wave: input.wave,
                features,
                labels,
            });
        }
        Ok(result)
    }

    /// Application-phase wave driven by a trained model.
    pub fn run_wave_async(
        &mut self,
        input: &WaveInput<T>,
        model: Option<&dyn Predictor<T>>,
    ) -> Result<WaveResult<T>, EngineError> {
        let model = model.ok_or(EngineError::NotTrained)?;
        if model.dimension() != self.tolerant.len() {
            return Err(EngineError::Shape {
                expected: model.dimension(),
                actual: self.tolerant.len(),
            });
        }
        self.run_wave_with(input, &mut ModelPolicy::new(model))
    }

    /// Application-phase wave with an arbitrary policy.
    pub fn run_wave_with(
        &mut self,
        input: &WaveInput<T>,
        policy: &mut dyn TriggerPolicy<T>,
    ) -> Result<WaveResult<T>, EngineError> {
        self.transactional(|engine, rt| engine.async_body(input, policy, rt))
    }

    /// Runs a wave with `policy`, lets `inspect` look at the resulting
    /// store, then rolls the wave back. The runtime `inspect` sees is the
    /// pre-wave one.
    pub fn probe<R>(
        &mut self,
        input: &WaveInput<T>,
        policy: &mut dyn TriggerPolicy<T>,
        inspect: impl FnOnce(&Self, &WaveResult<T>) -> Result<R, EngineError>,
    ) -> Result<R, EngineError> {
        let checkpoint = self.store.checkpoint();
        let mut rt = self.rt.clone();
        let out = self
            .async_body(input, policy, &mut rt)
            .and_then(|result| inspect(self, &result));
        self.store.restore(checkpoint);
        out
    }

    fn async_body(
        &mut self,
        input: &WaveInput<T>,
        policy: &mut dyn TriggerPolicy<T>,
        rt: &mut Runtime<T>,
    ) -> Result<WaveResult<T>, EngineError> {
        let mut result = WaveResult {
            decision: Decision {
                wave: input.wave,
                execute: BTreeMap::new(),
            },
            eligible: BTreeMap::new(),
            forced: Vec::new(),
            iota: BTreeMap::new(),
            predicted_error: BTreeMap::new(),
            simulated_error: BTreeMap::new(),
            virtual_runs: BTreeSet::new(),
            example: None,
        };
        for k in 0..self.order.len() {
            let idx = self.order[k];
            let step = &self.spec.steps[idx];
            let id = step.id.clone();
            let eligible = trigger_eligible(&self.spec, &id, &rt.history);
            result.eligible.insert(id.clone(), eligible);
            let label = rt.steps[idx].label;
            let mut forced = false;
            let run = if step.is_source() {
                true
            } else if eligible {
                match label {
                    None => true,
                    Some(l) => {
                        let srt = &mut rt.steps[idx];
                        let iota = srt.live.observe(
                            &self.store,
                            &step.inputs,
                            &srt.groups,
                            &srt.impact,
                        )?;
                        let eps = srt
                            .live
                            .input_error(&self.store, &step.inputs, &srt.error)?;
                        rt.features[l] = iota;
                        result.iota.insert(id.clone(), iota);
                        result.predicted_error.insert(id.clone(), eps);
                        let ctx = DecisionContext {
                            wave: input.wave,
                            step,
                            label: l,
                            eligible,
                            features: &rt.features,
                            iota: Some(iota),
                            predicted_error: Some(eps),
                            skip_streak: rt.steps[idx].skip_streak,
                        };
                        let mut run = policy.decide(&ctx)?;
                        if !run
                            && self
                                .config
                                .force_after
                                .is_some_and(|f| rt.steps[idx].skip_streak >= f)
                        {
                            run = true;
                            forced = true;
                        }
                        if !run {
                            rt.steps[idx].skip_streak += 1;
                        }
                        run
                    }
                }
            } else {
                let ctx = DecisionContext {
                    wave: input.wave,
                    step,
                    label: label.unwrap_or(usize::MAX),
                    eligible,
                    features: &rt.features,
                    iota: None,
                    predicted_error: None,
                    skip_streak: rt.steps[idx].skip_streak,
                };
                forced = policy.force(&ctx)?;
                forced
            };
            if run {
                self.execute(idx, input, rt)?;
            }
            if forced {
                result.forced.push(id.clone());
            }
            result.decision.execute.insert(id, run);
        }
        for (l, id) in self.tolerant.iter().enumerate() {
            if result.decision.execute[id] {
                rt.features[l] = T::zero();
            }
        }
        debug!(
            "wave {}: executed {:?}",
            input.wave,
            result
                .decision
                .execute
                .iter()
                .filter(|(_, v)| **v)
                .map(|(k, _)| k.as_str())
                .collect::<Vec<_>>()
        );
        Ok(result)
    }
}

#[cfg(test)]
mod tests;
