//! Experiment runner. A run has a synchronous training phase and an
//! application phase. In the application phase a ground-truth replica runs
//! every step on the same inputs, so each skipped step's output error is
//! measured exactly.
//!
//! By default the forest trains on lookahead labels
//! ([`Engine::lookahead_knowledge`]), which also mark the waves before a
//! bound is crossed during which the skipped step would see no fresh input.

mod policy;
mod report;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use thiserror::Error;

use crate::engine::{AlwaysExecute, Engine, EngineConfig, EngineError, WaveInput, WaveResult};
use crate::learn::{
    cross_validate, quality_gate, train, EvalReport, ForestConfig, ForestModel, KnowledgeBase,
    LearnError,
};
use crate::metrics::MetricRegistry;
use crate::workloads::{Scenario, WorkloadError};

pub use policy::{OraclePolicy, Policy, RandomPolicy, SeqPolicy};
pub use report::{
    confidence, read_reports_csv, savings, write_reports_csv, RunSummary, StepRecord, StepTotals,
    WaveReport,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Bound applied to every tolerant step.
    pub bound: f64,
    pub train_waves: usize,
    /// Application waves.
    pub waves: usize,
    pub policy: Policy,
    /// Seeds the forest and the random baseline.
    pub seed: u64,
    pub forest: ForestConfig,
    /// Cross-validation folds after training; 0 skips it.
    pub cv_folds: usize,
    /// Minimum cross-validated (accuracy, recall). When missed, training
    /// continues for `train_waves / 4` more waves, at most three times.
    pub gate: Option<(f64, f64)>,
    pub force_after: Option<u32>,
    /// Train on lookahead labels rather than plain ones.
    pub lookahead: bool,
    /// Run the replica on its own thread with a barrier per wave. The
    /// oracle plans from the replica's wave, so it always runs in sequence.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bound: 0.05,
            train_waves: 168,
            waves: 384,
            policy: Policy::SmartFlux,
            seed: 0,
            forest: ForestConfig::default(),
            cv_folds: 10,
            gate: None,
            force_after: None,
            lookahead: true,
            parallel: false,
        }
    }
}

const GATE_ROUNDS: usize = 3;

impl ExperimentConfig {
    /// Stream waves a run may consume.
    pub fn required_waves(&self) -> usize {
        let extension = if self.gate.is_some() && self.policy == Policy::SmartFlux {
            GATE_ROUNDS * self.extension_waves()
        } else {
            0
        };
        self.train_waves + extension + self.waves
    }

    fn extension_waves(&self) -> usize {
        (self.train_waves / 4).max(1)
    }

    fn validate(&self, available: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(0.0..=1.0).contains(&self.bound) {
            return bad(format!("bound {} outside [0, 1]", self.bound));
        }
        if self.policy == Policy::SmartFlux && self.train_waves == 0 {
            return bad("smartflux needs at least one training wave".into());
        }
        if self.waves == 0 {
            return bad("no application waves".into());
        }
        if self.train_waves + self.waves > available {
            return bad(format!(
                "stream has {available} waves, run needs {}",
                self.train_waves + self.waves
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub reports: Vec<WaveReport>,
    pub knowledge: KnowledgeBase<f64>,
    pub model: Option<ForestModel<f64>>,
    pub cv: Option<EvalReport>,
    /// Training waves run, including gate extensions.
    pub train_waves: usize,
}

/// Trains on the synchronous examples and cross-validates.
fn fit(
    knowledge: &KnowledgeBase<f64>,
    cfg: &ExperimentConfig,
) -> Result<(ForestModel<f64>, Option<EvalReport>), HarnessError> {
    let forest = ForestConfig {
        seed: cfg.seed,
        ..cfg.forest
    };
    let model = train(knowledge.examples(), &forest)?;
    let cv = if cfg.cv_folds >= 2 && knowledge.len() >= cfg.cv_folds {
        Some(cross_validate(knowledge.examples(), cfg.cv_folds, &forest)?)
    } else {
        None
    };
    Ok((model, cv))
}

// Built once per run, so variant sizes do not matter.
#[allow(clippy::large_enum_variant)]
enum Runner {
    Model(ForestModel<f64>),
    Sync,
    Random(RandomPolicy),
    Seq(SeqPolicy),
    Oracle,
}

fn apply(
    main: &mut Engine<f64>,
    runner: &mut Runner,
    input: &WaveInput<f64>,
) -> Result<WaveResult<f64>, EngineError> {
    match runner {
        Runner::Model(m) => main.run_wave_async(input, Some(&*m)),
        Runner::Sync => main.run_wave_with(input, &mut AlwaysExecute),
        Runner::Random(p) => main.run_wave_with(input, p),
        Runner::Seq(p) => main.run_wave_with(input, p),
        Runner::Oracle => unreachable!("the oracle plans against the replica"),
    }
}

/// Runs one experiment on a scenario. The bound replaces every tolerant
/// step's own bound.
pub fn run_experiment(
    scenario: &Scenario,
    cfg: &ExperimentConfig,
) -> Result<RunOutput, HarnessError> {
    cfg.validate(scenario.stream.len())?;
    let started = Instant::now();
    let spec = scenario.spec.clone().with_bound(cfg.bound);
    let metrics = MetricRegistry::new();
    let mut main = Engine::new(
        spec.clone(),
        &scenario.actions,
        &metrics,
        EngineConfig::training(),
    )?;
    let mut replica = Engine::new(spec, &scenario.actions, &metrics, EngineConfig::default())?;
    let stream = &scenario.stream;

    let mut next = 0;
    let sync_until =
        |main: &mut Engine<f64>, replica: &mut Engine<f64>, next: &mut usize, end: usize| {
            while *next < end {
                main.run_wave_sync(&stream[*next])?;
                replica.run_wave_sync(&stream[*next])?;
                *next += 1;
            }
            Ok::<_, HarnessError>(())
        };
    sync_until(&mut main, &mut replica, &mut next, cfg.train_waves)?;

    let labelled = |main: &Engine<f64>| -> Result<KnowledgeBase<f64>, HarnessError> {
        if cfg.lookahead {
            Ok(main.lookahead_knowledge()?)
        } else {
            Ok(main.knowledge().clone())
        }
    };
    let mut model = None;
    let mut cv = None;
    let mut runner = match cfg.policy {
        Policy::SmartFlux => {
            let (mut m, mut report) = fit(&labelled(&main)?, cfg)?;
            if let Some((acc, rec)) = cfg.gate {
                let mut rounds = 0;
                while report.as_ref().is_some_and(|r| !quality_gate(r, acc, rec))
                    && rounds < GATE_ROUNDS
                {
                    let end = next + cfg.extension_waves();
                    if end + cfg.waves > stream.len() {
                        warn!("quality gate missed and the stream has no waves left to extend training");
                        break;
                    }
                    warn!("quality gate missed after {next} training waves; extending");
                    sync_until(&mut main, &mut replica, &mut next, end)?;
                    (m, report) = fit(&labelled(&main)?, cfg)?;
                    rounds += 1;
                }
            }
            model = Some(m.clone());
            cv = report;
            Runner::Model(m)
        }
        Policy::Sync => Runner::Sync,
        Policy::Random => Runner::Random(RandomPolicy::new(cfg.seed ^ 0x5eed)),
        Policy::Seq(k) => Runner::Seq(SeqPolicy::new(k)),
        Policy::Oracle => Runner::Oracle,
    };
    let train_waves = next;
    let knowledge = labelled(&main)?;
    main.take_knowledge();
    main.set_config(EngineConfig {
        force_after: cfg.force_after,
        record_knowledge: false,
    });
    info!("training: {train_waves} waves in {:.2?}", started.elapsed());

    let applied = Instant::now();
    let mut reports = Vec::with_capacity(cfg.waves);
    for input in &stream[train_waves..train_waves + cfg.waves] {
        let result: WaveResult<f64> = if let Runner::Oracle = runner {
            replica.run_wave_sync(input)?;
            let mut p = OraclePolicy::plan(&mut main, replica.store(), input)?;
            main.run_wave_with(input, &mut p)?
        } else if cfg.parallel {
            let (truth, result) = rayon::join(
                || replica.run_wave_sync(input),
                || apply(&mut main, &mut runner, input),
            );
            truth?;
            result?
        } else {
            replica.run_wave_sync(input)?;
            apply(&mut main, &mut runner, input)?
        };
        let mut steps = Vec::with_capacity(main.tolerant_steps().len());
        for id in main.tolerant_steps() {
            let executed = result.executed(id);
            let eps_meas = main.output_error(id, replica.store())?;
            let bound = main.spec().step(id).map_or(0.0, |s| s.max_error);
            steps.push(StepRecord {
                step: id.clone(),
                executed,
                iota: result.iota.get(id).copied(),
                eps_pred: result.predicted_error.get(id).copied(),
                eps_meas,
                violation: !executed && eps_meas > bound,
            });
        }
        reports.push(WaveReport::new(input.wave, steps));
    }
    info!(
        "application: {} waves in {:.2?}",
        cfg.waves,
        applied.elapsed()
    );
    Ok(RunOutput {
        summary: RunSummary::from_reports(&reports),
        reports,
        knowledge,
        model,
        cv,
        train_waves,
    })
}

/// Writes every artifact of a run into `dir`: `reports.csv`, `summary.csv`,
/// `confidence.csv`, `knowledge_base.csv`, `workflow.txt`, and `model.txt`
/// plus `cv.csv` when a model was trained.
pub fn emit(
    dir: &Path,
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    out: &RunOutput,
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<BufWriter<File>, HarnessError> {
        Ok(BufWriter::new(File::create(dir.join(name))?))
    };
    write_reports_csv(&out.reports, create("reports.csv")?)?;
    out.summary.write_csv(create("summary.csv")?)?;
    out.summary.write_curves_csv(create("confidence.csv")?)?;
    out.knowledge.write_csv(create("knowledge_base.csv")?)?;
    fs::write(
        dir.join("workflow.txt"),
        scenario.spec.clone().with_bound(cfg.bound).to_text(),
    )?;
    if let Some(model) = &out.model {
        fs::write(dir.join("model.txt"), model.to_text())?;
    }
    if let Some(cv) = &out.cv {
        write_cv_csv(cv, out.knowledge.steps(), create("cv.csv")?)?;
    }
    Ok(())
}

/// Per-label cross-validation scores, `step,accuracy,precision,recall,tp,fp,tn,fn`.
pub fn write_cv_csv<W: std::io::Write>(
    cv: &EvalReport,
    steps: &[String],
    out: W,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "accuracy",
        "precision",
        "recall",
        "tp",
        "fp",
        "tn",
        "fn",
    ])?;
    for (m, step) in cv.per_label.iter().zip(steps) {
        let c = m.confusion;
        w.write_record([
            step.clone(),
            m.accuracy.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
        ])?;
    }
    w.write_record([
        "macro".to_owned(),
        cv.accuracy.to_string(),
        cv.precision.to_string(),
        cv.recall.to_string(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    w.flush()?;
    Ok(())
}
