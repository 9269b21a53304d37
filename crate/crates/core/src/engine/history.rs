use std::collections::BTreeMap;

use super::workflow::WorkflowSpec;

/// Execution record of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LastRun {
    /// Position in the global execution sequence; strictly increasing.
    pub tick: u64,
    pub wave: u64,
    pub count: u64,
}

/// Which steps ran, and in what global order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecutionHistory {
    runs: BTreeMap<String, LastRun>,
    next_tick: u64,
}

impl ExecutionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: &str, wave: u64) {
        self.next_tick += 1;
        let tick = self.next_tick;
        self.runs
            .entry(step.to_owned())
            .and_modify(|r| {
                r.tick = tick;
                r.wave = wave;
                r.count += 1;
            })
            .or_insert(LastRun {
                tick,
                wave,
                count: 1,
            });
    }

    pub fn last(&self, step: &str) -> Option<LastRun> {
        self.runs.get(step).copied()
    }

    pub fn count(&self, step: &str) -> u64 {
        self.runs.get(step).map_or(0, |r| r.count)
    }
}

/// Whether `step` may be triggered: source steps always; otherwise every
/// predecessor has run at least once, and more recently than `step`.
pub fn trigger_eligible(workflow: &WorkflowSpec, step: &str, history: &ExecutionHistory) -> bool {
    let Some(spec) = workflow.step(step) else {
        return false;
    };
    let own = history.last(step).map_or(0, |r| r.tick);
    spec.predecessors
        .iter()
        .all(|p| history.last(p).is_some_and(|r| r.tick > own))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::load_workflow;

    fn chain() -> WorkflowSpec {
        load_workflow("step a\nout x\n\nstep b\nafter a\nin x\nout y\nmax_error 0.1\n").unwrap()
    }

    #[test]
    fn first_wave_before_predecessor_ran() {
        let wf = chain();
        let h = ExecutionHistory::new();
        assert!(trigger_eligible(&wf, "a", &h));
        assert!(!trigger_eligible(&wf, "b", &h));
    }

    #[test]
    fn predecessor_ran_after_step() {
        let wf = chain();
        let mut h = ExecutionHistory::new();
        h.record("a", 0);
        h.record("b", 0);
        assert!(!trigger_eligible(&wf, "b", &h));
        h.record("a", 1);
        assert!(trigger_eligible(&wf, "b", &h));
        assert_eq!(h.count("a"), 2);
        assert_eq!(h.last("a").unwrap().wave, 1);
    }

    #[test]
    fn unknown_step_is_never_eligible() {
        assert!(!trigger_eligible(
            &chain(),
            "ghost",
            &ExecutionHistory::new()
        ));
    }
}
