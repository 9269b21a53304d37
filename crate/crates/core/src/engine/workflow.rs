//! Workflow description and its text format.
//!
//! ```text
//! # comment
//! workflow fire-risk
//!
//! step ingest
//! out sensors
//!
//! step areas
//! after ingest
//! in sensors
//! out areas
//! max_error 0.1
//! impact rel
//! error rel
//! mode cancellation
//! ```
//!
//! A file is a sequence of blocks separated by blank lines. `#` starts a
//! comment that runs to the end of the line. The optional first block is a
//! single `workflow <name>` line; every other block starts with
//! `step <id>` followed by at most one of each directive:
//!
//! | directive   | argument                               | default        |
//! |-------------|----------------------------------------|----------------|
//! | `after`     | space-separated step ids               | none (source)  |
//! | `in`        | comma-separated container names        | none           |
//! | `out`       | comma-separated container names        | required       |
//! | `max_error` | number in [0,1]                        | 0              |
//! | `impact`    | `abs`, `rel`, `custom:<id>`            | `rel`          |
//! | `error`     | `rel`, `rmse`, `custom:<id>`           | `rel`          |
//! | `mode`      | `cumulative`, `cancellation`           | `cancellation` |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::metrics::{AccumulationMode, ErrorMetric, ImpactMetric};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cyclic dependency among steps {0:?}")]
    Cycle(Vec<String>),
    #[error("wiring error: {0}")]
    Wiring(String),
    #[error("step `{step}`: max_error {value} outside [0,1]")]
    Range { step: String, value: f64 },
    #[error("duplicate step `{0}`")]
    DuplicateStep(String),
    #[error("unknown step `{0}`")]
    UnknownStep(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSpec {
    pub id: String,
    pub predecessors: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Zero means the step never tolerates staleness.
    pub max_error: f64,
    pub impact: ImpactMetric,
    pub error: ErrorMetric,
    pub mode: AccumulationMode,
}

impl StepSpec {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            predecessors: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            max_error: 0.0,
            impact: ImpactMetric::default(),
            error: ErrorMetric::default(),
            mode: AccumulationMode::default(),
        }
    }

    pub fn is_source(&self) -> bool {
        self.predecessors.is_empty()
    }

    /// A non-source step with a positive bound; only these may be skipped.
    pub fn is_tolerant(&self) -> bool {
        !self.is_source() && self.max_error > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowSpec {
    pub name: String,
    pub steps: Vec<StepSpec>,
}

impl WorkflowSpec {
    pub fn step(&self, id: &str) -> Option<&StepSpec> {
        self.steps.iter().find(|s| s.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.steps.iter().position(|s| s.id == id)
    }

    pub fn edge_count(&self) -> usize {
        self.steps.iter().map(|s| s.predecessors.len()).sum()
    }

    /// Replaces the bound of every tolerant step.
    pub fn with_bound(mut self, bound: f64) -> Self {
        for step in &mut self.steps {
            if step.is_tolerant() {
                step.max_error = bound;
            }
        }
        self
    }

    /// Checks ids, DAG shape, bounds and container wiring.
    pub fn validate(&self) -> Result<(), WorkflowError> {
        let mut ids = BTreeSet::new();
        for step in &self.steps {
            if !ids.insert(step.id.as_str()) {
                return Err(WorkflowError::DuplicateStep(step.id.clone()));
            }
        }
        let mut writer: BTreeMap<&str, &str> = BTreeMap::new();
        for step in &self.steps {
            if !(0.0..=1.0).contains(&step.max_error) {
                return Err(WorkflowError::Range {
                    step: step.id.clone(),
                    value: step.max_error,
                });
            }
            for pred in &step.predecessors {
                if !ids.contains(pred.as_str()) {
                    return Err(WorkflowError::UnknownStep(pred.clone()));
                }
            }
            if step.outputs.is_empty() {
                return Err(WorkflowError::Wiring(format!(
                    "step `{}` declares no output container",
                    step.id
                )));
            }
            for out in &step.outputs {
                if let Some(other) = writer.insert(out, &step.id) {
                    return Err(WorkflowError::Wiring(format!(
                        "container `{out}` is written by both `{other}` and `{}`",
                        step.id
                    )));
                }
            }
        }
        self.topological_order()?;
        for step in &self.steps {
            for input in &step.inputs {
                let fed = writer
                    .get(input.as_str())
                    .is_some_and(|w| step.predecessors.iter().any(|p| p == w));
                if !fed {
                    return Err(WorkflowError::Wiring(format!(
                        "input `{input}` of step `{}` is not an output of any of its predecessors",
                        step.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Step indices in dependency order, ties broken by id.
    pub fn topological_order(&self) -> Result<Vec<usize>, WorkflowError> {
        let index: BTreeMap<&str, usize> = self
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.steps.len()];
        let mut successors: Vec<Vec<usize>> = vec![Vec::new(); self.steps.len()];
        for (i, step) in self.steps.iter().enumerate() {
            for pred in &step.predecessors {
                let p = *index
                    .get(pred.as_str())
                    .ok_or_else(|| WorkflowError::UnknownStep(pred.clone()))?;
                indegree[i] += 1;
                successors[p].push(i);
            }
        }
        let mut ready: BTreeSet<(&str, usize)> = indegree
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == 0)
            .map(|(i, _)| (self.steps[i].id.as_str(), i))
            .collect();
        let mut order = Vec::with_capacity(self.steps.len());
        while let Some(next) = ready.pop_first() {
            order.push(next.1);
            for &s in &successors[next.1] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert((self.steps[s].id.as_str(), s));
                }
            }
        }
        if order.len() != self.steps.len() {
            let stuck = indegree
                .iter()
                .enumerate()
                .filter(|(_, d)| **d > 0)
                .map(|(i, _)| self.steps[i].id.clone())
                .collect();
            return Err(WorkflowError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Renders the workflow in the text format; parses back to an equal spec.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "workflow {}", self.name);
        for step in &self.steps {
            let _ = writeln!(out, "\nstep {}", step.id);
            if !step.predecessors.is_empty() {
                let _ = writeln!(out, "after {}", step.predecessors.join(" "));
            }
            if !step.inputs.is_empty() {
                let _ = writeln!(out, "in {}", step.inputs.join(","));
            }
            let _ = writeln!(out, "out {}", step.outputs.join(","));
            let _ = writeln!(out, "max_error {}", step.max_error);
            let _ = writeln!(out, "impact {}", step.impact);
            let _ = writeln!(out, "error {}", step.error);
            let _ = writeln!(out, "mode {}", step.mode);
        }
        out
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> WorkflowError {
    WorkflowError::Parse {
        line,
        message: message.into(),
    }
}

fn containers(line: usize, arg: &str) -> Result<Vec<String>, WorkflowError> {
    arg.split(',')
        .map(|c| {
            let c = c.trim();
            if c.is_empty() || c.contains(char::is_whitespace) {
                Err(parse_err(line, format!("invalid container list `{arg}`")))
            } else {
                Ok(c.to_owned())
            }
        })
        .collect()
}

/// Parses and validates a workflow description.
pub fn load_workflow(text: &str) -> Result<WorkflowSpec, WorkflowError> {
    let mut name = None;
    let mut steps: Vec<StepSpec> = Vec::new();
    // (line number, directive, argument) of the block being read.
    let mut block: Vec<(usize, String, String)> = Vec::new();
    let mut blocks = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            // Comment-only lines do not end a block.
            if raw.trim().is_empty() && !block.is_empty() {
                blocks.push(std::mem::take(&mut block));
            }
            continue;
        }
        let (directive, arg) = match content.split_once(char::is_whitespace) {
            Some((d, a)) => (d.to_owned(), a.trim().to_owned()),
            None => (content.to_owned(), String::new()),
        };
        block.push((line_no, directive, arg));
    }
    if !block.is_empty() {
        blocks.push(block);
    }

    for (b, block) in blocks.into_iter().enumerate() {
        let (line, head, arg) = &block[0];
        match head.as_str() {
            "workflow" => {
                if b != 0 || block.len() != 1 {
                    return Err(parse_err(
                        *line,
                        "`workflow` must be a block of its own at the top",
                    ));
                }
                if arg.is_empty() || arg.contains(char::is_whitespace) {
                    return Err(parse_err(*line, "`workflow` takes a single name"));
                }
                name = Some(arg.clone());
            }
            "step" => steps.push(parse_step(&block)?),
            other => {
                return Err(parse_err(
                    *line,
                    format!("block must start with `step`, found `{other}`"),
                ))
            }
        }
    }

    let spec = WorkflowSpec {
        name: name.unwrap_or_else(|| "workflow".to_owned()),
        steps,
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_step(block: &[(usize, String, String)]) -> Result<StepSpec, WorkflowError> {
    let (line, _, id) = &block[0];
    if id.is_empty() || id.contains(char::is_whitespace) {
        return Err(parse_err(*line, "`step` takes a single id"));
    }
    let mut step = StepSpec::new(id.clone());
    let mut seen = BTreeSet::new();
    for (line, directive, arg) in &block[1..] {
        let line = *line;
        if !seen.insert(directive.as_str()) {
            return Err(parse_err(line, format!("duplicate `{directive}`")));
        }
        if arg.is_empty() {
            return Err(parse_err(line, format!("`{directive}` needs an argument")));
        }
        match directive.as_str() {
            "after" => step.predecessors = arg.split_whitespace().map(str::to_owned).collect(),
            "in" => step.inputs = containers(line, arg)?,
            "out" => step.outputs = containers(line, arg)?,
            "max_error" => {
                step.max_error = arg
                    .parse::<f64>()
                    .map_err(|_| parse_err(line, format!("invalid number `{arg}`")))?;
                if !step.max_error.is_finite() {
                    return Err(parse_err(line, format!("invalid number `{arg}`")));
                }
            }
            "impact" => {
                step.impact = arg
                    .parse()
                    .map_err(|e: crate::metrics::MetricError| parse_err(line, e.to_string()))?
            }
            "error" => {
                step.error = arg
                    .parse()
                    .map_err(|e: crate::metrics::MetricError| parse_err(line, e.to_string()))?
            }
            "mode" => {
                step.mode = arg
                    .parse()
                    .map_err(|e: crate::metrics::MetricError| parse_err(line, e.to_string()))?
            }
            "step" => return Err(parse_err(line, "missing blank line before `step`")),
            other => return Err(parse_err(line, format!("unknown directive `{other}`"))),
        }
    }
    Ok(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN: &str = "\
workflow chain

step a
out x

step b   # consumer
after a
in x
out y
max_error 0.2
impact abs
error rmse
mode cumulative
";

    #[test]
    fn parses_two_step_chain() {
        let spec = load_workflow(CHAIN).unwrap();
        assert_eq!(spec.name, "chain");
        assert_eq!(spec.steps.len(), 2);
        assert_eq!(spec.edge_count(), 1);
        let b = spec.step("b").unwrap();
        assert_eq!(b.max_error, 0.2);
        assert_eq!(b.impact, ImpactMetric::Abs);
        assert_eq!(b.error, ErrorMetric::Rmse);
        assert_eq!(b.mode, AccumulationMode::Cumulative);
        assert!(b.is_tolerant());
        assert!(spec.step("a").unwrap().is_source());
    }

    #[test]
    fn text_round_trip() {
        let spec = load_workflow(CHAIN).unwrap();
        assert_eq!(load_workflow(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn self_loop_is_cyclic() {
        let text = "step a\nafter a\nout x\n";
        assert!(matches!(load_workflow(text), Err(WorkflowError::Cycle(_))));
        let text = "step s\nout z\n\nstep a\nafter b s\nout x\n\nstep b\nafter a\nout y\n";
        match load_workflow(text) {
            Err(WorkflowError::Cycle(steps)) => assert_eq!(steps, vec!["a", "b"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_input_is_wiring_error() {
        let text = "step a\nout x\n\nstep b\nafter a\nin q\nout y\n";
        assert!(matches!(load_workflow(text), Err(WorkflowError::Wiring(_))));
        let text = "step a\nin x\nout y\n";
        assert!(matches!(load_workflow(text), Err(WorkflowError::Wiring(_))));
    }

    #[test]
    fn shared_output_is_wiring_error() {
        let text = "step a\nout x\n\nstep b\nafter a\nout x\n";
        assert!(matches!(load_workflow(text), Err(WorkflowError::Wiring(_))));
    }

    #[test]
    fn bound_outside_unit_interval() {
        let text = "step a\nout x\n\nstep b\nafter a\nin x\nout y\nmax_error 1.5\n";
        assert_eq!(
            load_workflow(text),
            Err(WorkflowError::Range {
                step: "b".into(),
                value: 1.5
            })
        );
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let cases = [
            ("step a\nout x\nout y\n", 3),
            ("step a\nout x\nfrobnicate 1\n", 3),
            ("out x\n", 1),
            ("step a\nout x\nstep b\n", 3),
            ("step a\nout x\nimpact rmse\n", 3),
            ("step a\nout x\nmax_error lots\n", 3),
            ("step a\n\nworkflow w\n", 3),
        ];
        for (text, line) in cases {
            match load_workflow(text) {
                Err(WorkflowError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: unexpected {other:?}"),
            }
        }
        assert!(matches!(
            load_workflow("step a\nout x\n\nstep a\nout y\n"),
            Err(WorkflowError::DuplicateStep(_))
        ));
        assert!(matches!(
            load_workflow("step a\nafter ghost\nout x\n"),
            Err(WorkflowError::UnknownStep(_))
        ));
    }

    #[test]
    fn topological_ties_break_by_id() {
        let text = "step src\nout s\n\nstep zeta\nafter src\nout z\n\nstep alpha\nafter src\nout a\n\nstep mid\nafter zeta alpha\nout m\n";
        let spec = load_workflow(text).unwrap();
        let order: Vec<&str> = spec
            .topological_order()
            .unwrap()
            .into_iter()
            .map(|i| spec.steps[i].id.as_str())
            .collect();
        assert_eq!(order, ["src", "alpha", "zeta", "mid"]);
    }

    #[test]
    fn with_bound_only_touches_tolerant_steps() {
        let text = "step a\nout x\n\nstep b\nafter a\nin x\nout y\nmax_error 0.3\n\nstep c\nafter b\nin y\nout z\n";
        let spec = load_workflow(text).unwrap().with_bound(0.05);
        assert_eq!(spec.step("a").unwrap().max_error, 0.0);
        assert_eq!(spec.step("b").unwrap().max_error, 0.05);
        assert_eq!(spec.step("c").unwrap().max_error, 0.0);
    }
}
