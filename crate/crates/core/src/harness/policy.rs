use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::engine::{DecisionContext, Engine, EngineError, TriggerPolicy, WaveInput};
use crate::store::ColumnStore;

/// Application-phase policy for tolerant steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Trained classifier over input impacts.
    SmartFlux,
    /// Every eligible step runs.
    Sync,
    /// Each eligible tolerant step runs with probability 1/2.
    Random,
    /// Each tolerant step runs on every k-th eligible wave.
    Seq(u32),
    /// Runs exactly what keeps every output within its bound, using the
    /// ground-truth replica.
    Oracle,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SmartFlux => f.write_str("smartflux"),
            Self::Sync => f.write_str("sync"),
            Self::Random => f.write_str("random"),
            Self::Seq(k) => write!(f, "seq:{k}"),
            Self::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for Policy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smartflux" => Ok(Self::SmartFlux),
            "sync" => Ok(Self::Sync),
            "random" => Ok(Self::Random),
            "oracle" => Ok(Self::Oracle),
            _ => match s.strip_prefix("seq:").map(str::parse::<u32>) {
                Some(Ok(k)) if k >= 1 => Ok(Self::Seq(k)),
                _ => Err(HarnessError::Config(format!(
                    "unknown policy `{s}` (expected smartflux, sync, random, seq:<k> or oracle)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    probability: f64,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            probability: 0.5,
        }
    }
}

impl TriggerPolicy<f64> for RandomPolicy {
    fn decide(&mut self, _ctx: &DecisionContext<'_, f64>) -> Result<bool, EngineError> {
        Ok(self.rng.random_bool(self.probability))
    }
}

#[derive(Debug, Clone)]
pub struct SeqPolicy {
    every: u32,
    seen: BTreeMap<String, u32>,
}

impl SeqPolicy {
    pub fn new(every: u32) -> Self {
        Self {
            every: every.max(1),
            seen: BTreeMap::new(),
        }
    }
}

impl TriggerPolicy<f64> for SeqPolicy {
    fn decide(&mut self, ctx: &DecisionContext<'_, f64>) -> Result<bool, EngineError> {
        let n = self.seen.entry(ctx.step.id.clone()).or_insert(0);
        *n += 1;
        Ok(n.is_multiple_of(self.every))
    }
}

fn bound_of(main: &Engine<f64>, id: &str) -> f64 {
    main.spec().step(id).map_or(0.0, |s| s.max_error)
}

/// Executes the steps of one wave chosen by [`OraclePolicy::plan`].
#[derive(Debug, Clone, Default)]
pub struct OraclePolicy {
    execute: BTreeSet<String>,
}

impl OraclePolicy {
    /// Chooses the steps to run for `input` given the replica's state after
    /// the wave. A tolerant step runs when its stale output would exceed its
    /// bound. The choice is then tried on a rolled-back copy of the wave:
    /// while an executed tolerant step stays over its bound, or an added
    /// predecessor still differs from the replica, the nearest stale
    /// non-source ancestors that do not run yet are added.
    /// Requires pure actions.
    pub fn plan(
        main: &mut Engine<f64>,
        truth: &ColumnStore<f64>,
        input: &WaveInput<f64>,
    ) -> Result<Self, EngineError> {
        let mut execute = BTreeSet::new();
        for id in main.tolerant_steps() {
            if main.output_error(id, truth)? > bound_of(main, id) {
                execute.insert(id.clone());
            }
        }
        let mut added: BTreeSet<String> = BTreeSet::new();
        loop {
            let mut trial = Self {
                execute: execute.clone(),
            };
            let stale = main.probe(input, &mut trial, |engine, result| {
                let spec = engine.spec();
                let mut stale = BTreeSet::new();
                for step in &spec.steps {
                    let id = &step.id;
                    if !result.executed(id) {
                        continue;
                    }
                    let unfinished = if added.contains(id) {
                        engine.output_differs(id, truth)?
                    } else {
                        step.is_tolerant() && engine.output_error(id, truth)? > step.max_error
                    };
                    if !unfinished {
                        continue;
                    }
                    // Walk up through stale predecessors that already run.
                    let mut queue: Vec<&String> = step.predecessors.iter().collect();
                    let mut seen = BTreeSet::new();
                    while let Some(pred) = queue.pop() {
                        let Some(p) = spec.step(pred) else { continue };
                        if p.is_source()
                            || !seen.insert(pred)
                            || !engine.output_differs(pred, truth)?
                        {
                            continue;
                        }
                        if execute.contains(pred) {
                            queue.extend(&p.predecessors);
                        } else {
                            stale.insert(pred.clone());
                        }
                    }
                }
                Ok(stale)
            })?;
            if stale.is_empty() {
                return Ok(Self { execute });
            }
            execute.extend(stale.iter().cloned());
            added.extend(stale);
        }
    }

    pub fn steps(&self) -> &BTreeSet<String> {
        &self.execute
    }
}

impl TriggerPolicy<f64> for OraclePolicy {
    fn decide(&mut self, ctx: &DecisionContext<'_, f64>) -> Result<bool, EngineError> {
        Ok(self.execute.contains(&ctx.step.id))
    }

    fn force(&mut self, ctx: &DecisionContext<'_, f64>) -> Result<bool, EngineError> {
        Ok(self.execute.contains(&ctx.step.id))
    }
}
