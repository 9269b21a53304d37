//! Air-quality health index over a square grid of detectors. Each grid row
//! is a zone. Detectors report ozone, fine particulate matter and nitrogen
//! dioxide once per simulated hour.

use std::f64::consts::TAU;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ingest, read_all, Ar1, GeneratorConfig, Scenario, Workload, WorkloadError};
use crate::engine::{ActionRegistry, FeedRecord, WaveInput};

pub(super) const WORKFLOW: &str = "\
workflow aqhi

step ingest
out sensors

step concentration
after ingest
in sensors
out concentration
max_error 0.1
impact rel
error rel

step zones
after concentration
in concentration
out zones
max_error 0.1
impact rel
error rel

step interpolation
after concentration
in concentration
out interpolation
max_error 0.1
impact rel
error rel

step hotspots
after zones
in zones
out hotspots
max_error 0.1
impact rel
error rel

step index
after hotspots
in hotspots
out index
max_error 0.1
impact rel
error rel
";

/// Zone concentration above which a zone is a hotspot.
pub const HOTSPOT_REFERENCE: f64 = 40.0;

const POLLUTANTS: [&str; 3] = ["o3", "pm", "no2"];
/// Hour of the daily pollution peak in the first column.
const PEAK_HOUR: f64 = 14.0;
const DIURNAL: f64 = 0.2;
const WEEKLY: f64 = 0.04;

/// Index class: low 1, moderate 2, high 3, very high 4.
pub fn index_class(index: f64) -> f64 {
    match index {
        i if i <= 3.0 => 1.0,
        i if i <= 6.0 => 2.0,
        i if i <= 10.0 => 3.0,
        _ => 4.0,
    }
}

fn detector(r: usize, c: usize) -> String {
    format!("d{r}_{c}")
}

pub(super) fn actions(config: &GeneratorConfig) -> ActionRegistry<f64> {
    let n = config.size;
    let mut a = ActionRegistry::new();
    a.register("ingest", |ctx| ingest(ctx, "sensors", "sensors"));
    a.register("concentration", move |ctx| {
        for r in 0..n {
            for c in 0..n {
                let d = detector(r, c);
                let mut product = 1.0;
                for p in POLLUTANTS {
                    product *= ctx.get_or("sensors", &format!("{d}.{p}"), 0.0)?;
                }
                ctx.put("concentration", &d, product.max(0.0).cbrt())?;
            }
        }
        Ok(())
    });
    a.register("zones", move |ctx| {
        for r in 0..n {
            let mut sum = 0.0;
            for c in 0..n {
                sum += ctx.get_or("concentration", &detector(r, c), 0.0)?;
            }
            ctx.put("zones", &format!("z{r}"), sum / n as f64)?;
        }
        Ok(())
    });
    a.register("interpolation", move |ctx| {
        let at = |ctx: &crate::engine::StepContext<'_, f64>, r, c| {
            ctx.get_or("concentration", &detector(r, c), 0.0)
        };
        for r in 0..n {
            for c in 0..n {
                if c + 1 < n {
                    let v = (at(ctx, r, c)? + at(ctx, r, c + 1)?) / 2.0;
                    ctx.put("interpolation", &format!("h{r}_{c}"), v)?;
                }
                if r + 1 < n {
                    let v = (at(ctx, r, c)? + at(ctx, r + 1, c)?) / 2.0;
                    ctx.put("interpolation", &format!("v{r}_{c}"), v)?;
                }
            }
        }
        Ok(())
    });
    // Only hot zones are stored; a zone that cools down is deleted.
    a.register("hotspots", |ctx| {
        for (zone, v) in read_all(ctx, "zones")? {
            if v > HOTSPOT_REFERENCE {
                ctx.put("hotspots", &zone, v)?;
            } else if ctx.container("hotspots")?.get(&zone).is_some() {
                ctx.put("hotspots", &zone, 0.0)?;
            }
        }
        Ok(())
    });
    a.register("index", |ctx| {
        let hot: Vec<f64> = read_all(ctx, "hotspots")?
            .into_iter()
            .map(|(_, v)| v)
            .filter(|&v| v > 0.0)
            .collect();
        let mean = if hot.is_empty() {
            0.0
        } else {
            hot.iter().sum::<f64>() / hot.len() as f64
        };
        let index = hot.len() as f64 + mean / 10.0;
        ctx.put("index", "value", index)?;
        ctx.put("index", "class", index_class(index))
    });
    a
}

/// Polluted zones sit well above the hotspot reference and clean zones well
/// below it, so hotspot membership is stable and the index changes smoothly.
pub fn gen_aqhi(config: &GeneratorConfig) -> Result<Scenario, WorkloadError> {
    config.validate()?;
    let n = config.size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let polluted_count = ((2 * n + 2) / 5).max(1);
    let polluted: Vec<usize> = sample(&mut rng, n, polluted_count).into_vec();
    let zone_base: Vec<f64> = (0..n)
        .map(|r| {
            if polluted.contains(&r) {
                rng.random_range(56.0..60.0)
            } else {
                rng.random_range(20.0..28.0)
            }
        })
        .collect();
    struct Signal {
        key: String,
        base: f64,
        peak: f64,
        noise: Ar1,
    }
    let mut signals = Vec::with_capacity(n * n * 3);
    for (r, &row_base) in zone_base.iter().enumerate() {
        for c in 0..n {
            for name in POLLUTANTS {
                let spread = rng.random_range(-0.08..0.08);
                signals.push(Signal {
                    key: format!("{}.{name}", detector(r, c)),
                    base: row_base * (1.0 + spread),
                    // Plumes drift east: later peaks further along the row.
                    peak: PEAK_HOUR + 0.25 * c as f64,
                    noise: Ar1::new(0.9, config.noise * 100.0),
                });
            }
        }
    }
    let mut stream = Vec::with_capacity(config.waves);
    for w in 0..config.waves {
        let t = w as f64;
        let records = signals
            .iter_mut()
            .map(|s| {
                let value = if config.flat {
                    s.base
                } else {
                    let diurnal = 1.0 + DIURNAL * (TAU * (t - s.peak) / 24.0 + TAU / 4.0).sin();
                    let weekly = 1.0 + WEEKLY * (TAU * t / 168.0).sin();
                    let trend = 1.0 + config.drift * t / 168.0;
                    s.base * diurnal * weekly * trend + s.noise.step(&mut rng)
                };
                FeedRecord {
                    channel: "sensors".to_owned(),
                    key: s.key.clone(),
                    value: value.clamp(0.0, 100.0),
                }
            })
            .collect();
        stream.push(WaveInput {
            wave: w as u64,
            records,
        });
    }
    Scenario::assemble(Workload::Aqhi, config, stream)
}
