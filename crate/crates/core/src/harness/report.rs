use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::HarnessError;
use crate::engine::Decision;

/// One tolerant step in one application wave.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: String,
    pub executed: bool,
    /// Input impact, when the step was eligible.
    pub iota: Option<f64>,
    /// The step's error function over its current inputs against their
    /// state at its last execution, when the step was eligible.
    pub eps_pred: Option<f64>,
    /// Output error against the synchronous replica after the wave.
    pub eps_meas: f64,
    /// Skipped and `eps_meas` above the step's bound.
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveReport {
    pub wave: u64,
    pub steps: Vec<StepRecord>,
    /// Tolerant steps executed.
    pub executions: usize,
    /// Tolerant steps the synchronous model runs.
    pub sync_executions: usize,
}

impl WaveReport {
    pub fn new(wave: u64, steps: Vec<StepRecord>) -> Self {
        Self {
            wave,
            executions: steps.iter().filter(|s| s.executed).count(),
            sync_executions: steps.len(),
            steps,
        }
    }

    pub fn decision(&self) -> Decision {
        Decision {
            wave: self.wave,
            execute: self
                .steps
                .iter()
                .map(|s| (s.step.clone(), s.executed))
                .collect(),
        }
    }

    pub fn has_violation(&self) -> bool {
        self.steps.iter().any(|s| s.violation)
    }
}

/// Fraction of waves so far without any violation.
pub fn confidence(reports: &[WaveReport]) -> Vec<f64> {
    let mut clean = 0usize;
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            clean += usize::from(!r.has_violation());
            clean as f64 / (i + 1) as f64
        })
        .collect()
}

/// Cumulative executed over cumulative synchronous executions per wave,
/// and the overall savings `1 - executed / sync`.
pub fn savings(reports: &[WaveReport]) -> (Vec<f64>, f64) {
    let (mut done, mut sync) = (0usize, 0usize);
    let curve: Vec<f64> = reports
        .iter()
        .map(|r| {
            done += r.executions;
            sync += r.sync_executions;
            if sync == 0 {
                1.0
            } else {
                done as f64 / sync as f64
            }
        })
        .collect();
    let total = if sync == 0 {
        0.0
    } else {
        1.0 - done as f64 / sync as f64
    };
    (curve, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepTotals {
    pub slots: usize,
    pub executions: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub confidence: Vec<f64>,
    pub normalized_executions: Vec<f64>,
    pub savings: f64,
    /// Step-waves in violation.
    pub violations: usize,
    /// Waves with at least one violation.
    pub violating_waves: usize,
    pub executions: usize,
    pub sync_executions: usize,
    pub per_step: BTreeMap<String, StepTotals>,
}

impl RunSummary {
    pub fn from_reports(reports: &[WaveReport]) -> Self {
        let (normalized_executions, savings) = savings(reports);
        let mut per_step: BTreeMap<String, StepTotals> = BTreeMap::new();
        for r in reports {
            for s in &r.steps {
                let t = per_step.entry(s.step.clone()).or_default();
                t.slots += 1;
                t.executions += usize::from(s.executed);
                t.violations += usize::from(s.violation);
            }
        }
        Self {
            confidence: confidence(reports),
            normalized_executions,
            savings,
            violations: per_step.values().map(|t| t.violations).sum(),
            violating_waves: reports.iter().filter(|r| r.has_violation()).count(),
            executions: reports.iter().map(|r| r.executions).sum(),
            sync_executions: reports.iter().map(|r| r.sync_executions).sum(),
            per_step,
        }
    }

    pub fn final_confidence(&self) -> f64 {
        self.confidence.last().copied().unwrap_or(1.0)
    }

    /// `metric,value` rows; per-step rows are `step.<id>.<field>`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        let rows = [
            ("waves", self.confidence.len().to_string()),
            ("final_confidence", self.final_confidence().to_string()),
            ("savings", self.savings.to_string()),
            ("violations", self.violations.to_string()),
            ("violating_waves", self.violating_waves.to_string()),
            ("executions", self.executions.to_string()),
            ("sync_executions", self.sync_executions.to_string()),
        ];
        for (k, v) in rows {
            w.write_record([k, v.as_str()])?;
        }
        for (id, t) in &self.per_step {
            for (field, v) in [
                ("slots", t.slots),
                ("executions", t.executions),
                ("violations", t.violations),
            ] {
                w.write_record([format!("step.{id}.{field}"), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `wave,confidence,normalized_executions` rows.
    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["wave", "confidence", "normalized_executions"])?;
        for (i, (c, n)) in self
            .confidence
            .iter()
            .zip(&self.normalized_executions)
            .enumerate()
        {
            w.write_record([i.to_string(), c.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

const REPORT_HEADER: [&str; 7] = [
    "wave",
    "step",
    "executed",
    "iota",
    "eps_pred",
    "eps_meas",
    "violation",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_reports_csv<W: Write>(reports: &[WaveReport], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        for s in &r.steps {
            w.write_record([
                r.wave.to_string(),
                s.step.clone(),
                u8::from(s.executed).to_string(),
                opt(s.iota),
                opt(s.eps_pred),
                s.eps_meas.to_string(),
                u8::from(s.violation).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads what [`write_reports_csv`] wrote. Rows of one wave must be
/// contiguous.
pub fn read_reports_csv<R: Read>(input: R) -> Result<Vec<WaveReport>, HarnessError> {
    let mut rdr = csv::Reader::from_reader(input);
    if rdr.headers()?.iter().ne(REPORT_HEADER) {
        return Err(HarnessError::Parse {
            line: 1,
            message: format!("expected header `{}`", REPORT_HEADER.join(",")),
        });
    }
    let mut out: Vec<(u64, Vec<StepRecord>)> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let err = |message: String| HarnessError::Parse { line, message };
        if row.len() != REPORT_HEADER.len() {
            return Err(err(format!("expected {} fields", REPORT_HEADER.len())));
        }
        let num = |idx: usize| -> Result<f64, HarnessError> {
            row[idx]
                .parse()
                .map_err(|_| err(format!("invalid {} `{}`", REPORT_HEADER[idx], &row[idx])))
        };
        let optional = |idx: usize| -> Result<Option<f64>, HarnessError> {
            if row[idx].is_empty() {
                Ok(None)
            } else {
                num(idx).map(Some)
            }
        };
        let flag = |idx: usize| match &row[idx] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(err(format!("invalid {} `{other}`", REPORT_HEADER[idx]))),
        };
        let wave: u64 = row[0]
            .parse()
            .map_err(|_| err(format!("invalid wave `{}`", &row[0])))?;
        let record = StepRecord {
            step: row[1].to_owned(),
            executed: flag(2)?,
            iota: optional(3)?,
            eps_pred: optional(4)?,
            eps_meas: num(5)?,
            violation: flag(6)?,
        };
        match out.last_mut() {
            Some((w, steps)) if *w == wave => steps.push(record),
            _ => out.push((wave, vec![record])),
        }
    }
    Ok(out
        .into_iter()
        .map(|(w, s)| WaveReport::new(w, s))
        .collect())
}
