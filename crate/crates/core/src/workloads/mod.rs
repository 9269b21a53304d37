//! Seeded synthetic workloads: air quality, linear-road tolling and fire
//! risk. Each scenario bundles a workflow, its step actions and an input
//! stream; the same config always yields the same stream.
//!
//! Streams serialise to CSV as `wave,container,key,value` rows, where
//! `container` names the feed channel. The first line is a comment that
//! records the generator config, so a stream file can be replayed without
//! knowing how it was produced:
//!
//! ```text
//! # workload=aqhi seed=7 waves=552 size=5 expressways=2 vehicles=200 noise=0.003 drift=0 motion=1 flat=false
//! wave,container,key,value
//! 0,sensors,d0_0.o3,41.27
//! ```
//!
//! All non-source actions are pure functions of their input containers.
//! Anything a step needs to remember across waves (the LRB speed window,
//! say) is kept by the source step.

mod aqhi;
mod fire;
mod lrb;

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::engine::{
    load_workflow, ActionError, ActionRegistry, FeedRecord, StepContext, WaveInput, WorkflowSpec,
};

pub use aqhi::{gen_aqhi, index_class};
pub use fire::gen_fire;
pub use lrb::gen_lrb;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("stream line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Workflow(#[from] crate::engine::WorkflowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Workload {
    Aqhi,
    Lrb,
    Fire,
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Aqhi => "aqhi",
            Self::Lrb => "lrb",
            Self::Fire => "fire",
        })
    }
}

impl FromStr for Workload {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aqhi" => Ok(Self::Aqhi),
            "lrb" => Ok(Self::Lrb),
            "fire" => Ok(Self::Fire),
            other => Err(WorkloadError::Config(format!("unknown workload `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub waves: usize,
    /// Grid side for AQHI detectors and fire sensors; segments per
    /// expressway for LRB.
    pub size: usize,
    /// LRB only.
    pub expressways: usize,
    /// LRB vehicles per expressway.
    pub vehicles: usize,
    /// Innovation scale of the AR(1) noise, as a fraction of each signal's
    /// range.
    pub noise: f64,
    /// Linear trend per simulated week, as a fraction of each signal's level.
    pub drift: f64,
    /// LRB movement multiplier; 0 freezes every vehicle.
    pub motion: f64,
    /// Constant signals (AQHI and fire).
    pub flat: bool,
}

impl GeneratorConfig {
    /// Desk-scale defaults.
    pub fn new(workload: Workload, seed: u64, waves: usize) -> Self {
        let base = Self {
            seed,
            waves,
            size: 5,
            expressways: 2,
            vehicles: 200,
            noise: 0.003,
            drift: 0.0,
            motion: 1.0,
            flat: false,
        };
        match workload {
            Workload::Aqhi => base,
            Workload::Lrb => Self {
                size: 20,
                noise: 0.02,
                ..base
            },
            Workload::Fire => Self { size: 10, ..base },
        }
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Config(m.to_owned()));
        if self.waves == 0 {
            return bad("waves must be positive");
        }
        if self.size == 0 || self.expressways == 0 || self.vehicles == 0 {
            return bad("scale counts must be positive");
        }
        for (name, v) in [("noise", self.noise), ("motion", self.motion)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(WorkloadError::Config(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !self.drift.is_finite() {
            return bad("drift must be finite");
        }
        Ok(())
    }

    fn header(&self, workload: Workload) -> String {
        format!(
            "# workload={workload} seed={} waves={} size={} expressways={} vehicles={} noise={} drift={} motion={} flat={}",
            self.seed,
            self.waves,
            self.size,
            self.expressways,
            self.vehicles,
            self.noise,
            self.drift,
            self.motion,
            self.flat
        )
    }

    fn parse_header(line: &str) -> Result<(Workload, Self), WorkloadError> {
        let err = |message: String| WorkloadError::Parse { line: 1, message };
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| err("missing `# workload=...` header".into()))?;
        let mut workload = None;
        let mut cfg = Self::new(Workload::Aqhi, 0, 1);
        for pair in body.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found `{pair}`")))?;
            let bad = || err(format!("invalid value for `{k}`: `{v}`"));
            match k {
                "workload" => {
                    let w: Workload = v.parse().map_err(|_| bad())?;
                    let keep = cfg;
                    cfg = Self::new(w, keep.seed, keep.waves);
                    workload = Some(w);
                }
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "waves" => cfg.waves = v.parse().map_err(|_| bad())?,
                "size" => cfg.size = v.parse().map_err(|_| bad())?,
                "expressways" => cfg.expressways = v.parse().map_err(|_| bad())?,
                "vehicles" => cfg.vehicles = v.parse().map_err(|_| bad())?,
                "noise" => cfg.noise = v.parse().map_err(|_| bad())?,
                "drift" => cfg.drift = v.parse().map_err(|_| bad())?,
                "motion" => cfg.motion = v.parse().map_err(|_| bad())?,
                "flat" => cfg.flat = v.parse().map_err(|_| bad())?,
                _ => return Err(err(format!("unknown header key `{k}`"))),
            }
        }
        let workload = workload.ok_or_else(|| err("header names no workload".into()))?;
        Ok((workload, cfg))
    }
}

/// A workflow with its actions and input stream.
#[derive(Clone)]
pub struct Scenario {
    pub workload: Workload,
    pub config: GeneratorConfig,
    pub spec: WorkflowSpec,
    pub actions: ActionRegistry<f64>,
    pub stream: Vec<WaveInput<f64>>,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("workload", &self.workload)
            .field("config", &self.config)
            .field("spec", &self.spec.name)
            .field("waves", &self.stream.len())
            .finish()
    }
}

/// Builds the scenario for any workload.
pub fn generate(workload: Workload, config: &GeneratorConfig) -> Result<Scenario, WorkloadError> {
    match workload {
        Workload::Aqhi => gen_aqhi(config),
        Workload::Lrb => gen_lrb(config),
        Workload::Fire => gen_fire(config),
    }
}

fn workflow_parts(
    workload: Workload,
    config: &GeneratorConfig,
) -> Result<(WorkflowSpec, ActionRegistry<f64>), WorkloadError> {
    Ok(match workload {
        Workload::Aqhi => (load_workflow(aqhi::WORKFLOW)?, aqhi::actions(config)),
        Workload::Lrb => (load_workflow(lrb::WORKFLOW)?, lrb::actions(config)),
        Workload::Fire => (load_workflow(fire::WORKFLOW)?, fire::actions(config)),
    })
}

impl Scenario {
    fn assemble(
        workload: Workload,
        config: &GeneratorConfig,
        stream: Vec<WaveInput<f64>>,
    ) -> Result<Self, WorkloadError> {
        let (spec, actions) = workflow_parts(workload, config)?;
        Ok(Self {
            workload,
            config: *config,
            spec,
            actions,
            stream,
        })
    }

    /// Sets the bound of every tolerant step.
    pub fn with_bound(mut self, bound: f64) -> Self {
        self.spec = self.spec.with_bound(bound);
        self
    }

    pub fn write_stream_csv<W: Write>(&self, mut out: W) -> Result<(), WorkloadError> {
        writeln!(out, "{}", self.config.header(self.workload))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["wave", "container", "key", "value"])?;
        for wave in &self.stream {
            for r in &wave.records {
                w.write_record([
                    wave.wave.to_string(),
                    r.channel.clone(),
                    r.key.clone(),
                    r.value.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a scenario from a stream file. Waves with no records are
    /// kept as empty waves.
    pub fn read_stream_csv<R: Read>(input: R) -> Result<Self, WorkloadError> {
        let mut reader = BufReader::new(input);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let (workload, config) = GeneratorConfig::parse_header(first.trim_end())?;
        config.validate()?;
        let mut rows = csv::Reader::from_reader(reader);
        let header: Vec<String> = rows.headers()?.iter().map(str::to_owned).collect();
        if header != ["wave", "container", "key", "value"] {
            return Err(WorkloadError::Parse {
                line: 2,
                message: "expected header `wave,container,key,value`".into(),
            });
        }
        let mut stream: Vec<WaveInput<f64>> = (0..config.waves)
            .map(|w| WaveInput {
                wave: w as u64,
                records: Vec::new(),
            })
            .collect();
        for (i, row) in rows.records().enumerate() {
            let row = row?;
            let line = i + 3;
            let err = |message: String| WorkloadError::Parse { line, message };
            if row.len() != 4 {
                return Err(err("expected 4 fields".into()));
            }
            let wave: usize = row[0]
                .parse()
                .map_err(|_| err(format!("invalid wave `{}`", &row[0])))?;
            let value: f64 = row[3]
                .parse()
                .map_err(|_| err(format!("invalid value `{}`", &row[3])))?;
            let slot = stream
                .get_mut(wave)
                .ok_or_else(|| err(format!("wave {wave} beyond header's {}", config.waves)))?;
            slot.records.push(FeedRecord {
                channel: row[1].to_owned(),
                key: row[2].to_owned(),
                value,
            });
        }
        Self::assemble(workload, &config, stream)
    }
}

/// Mean-reverting noise `e' = phi * e + sigma * N(0,1)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ar1 {
    pub phi: f64,
    pub sigma: f64,
    pub state: f64,
}

impl Ar1 {
    pub fn new(phi: f64, sigma: f64) -> Self {
        Self {
            phi,
            sigma,
            state: 0.0,
        }
    }

    pub fn step<R: Rng>(&mut self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.state = self.phi * self.state + self.sigma * z;
        self.state
    }
}

/// Copies every feed record on `channel` into `container`.
pub(crate) fn ingest(
    ctx: &mut StepContext<'_, f64>,
    channel: &str,
    container: &str,
) -> Result<(), ActionError> {
    let records: Vec<(String, f64)> = ctx
        .feed()
        .iter()
        .filter(|r| r.channel == channel)
        .map(|r| (r.key.clone(), r.value))
        .collect();
    for (k, v) in records {
        ctx.put(container, &k, v)?;
    }
    Ok(())
}

/// Owned snapshot of a container's values, so the action can then write.
pub(crate) fn read_all(
    ctx: &StepContext<'_, f64>,
    container: &str,
) -> Result<Vec<(String, f64)>, ActionError> {
    Ok(ctx
        .container(container)?
        .values()
        .map(|(k, v)| (k.to_owned(), v))
        .collect())
}
