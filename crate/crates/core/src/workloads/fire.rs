//! Forest fire risk over a square sensor grid. Sensors report temperature,
//! precipitation and wind every 30 minutes; areas are 2x2 blocks of
//! sensors. The satellite check and dispatch steps tolerate no error.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ingest, Ar1, GeneratorConfig, Scenario, Workload, WorkloadError};
use crate::engine::{ActionRegistry, FeedRecord, StepContext, WaveInput};

pub(super) const WORKFLOW: &str = "\
workflow fire

step ingest
out sensors

step areas
after ingest
in sensors
out areas
max_error 0.1
impact rel
error rel

step thermal
after ingest
in sensors
out thermal
max_error 0.1
impact rel
error rel

step risk
after areas
in areas
out risk
max_error 0.1
impact rel
error rel

step overall
after risk
in risk
out overall
max_error 0.1
impact rel
error rel

step satellite
after risk
in risk
out satellite

step dispatch
after satellite
in satellite
out dispatch
";

const WAVES_PER_DAY: f64 = 48.0;
const FIELDS: [&str; 3] = ["temp", "rain", "wind"];
/// Risk score from which an area is a hotspot and is checked by satellite.
const HOTSPOT_SCORE: f64 = 60.0;
const CONFIRM_SCORE: f64 = 70.0;

fn sensor(r: usize, c: usize) -> String {
    format!("s{r}_{c}")
}

fn area(r: usize, c: usize) -> String {
    format!("a{r}_{c}")
}

pub(super) fn actions(config: &GeneratorConfig) -> ActionRegistry<f64> {
    let n = config.size;
    let side = n.div_ceil(2);
    let mut a = ActionRegistry::new();
    a.register("ingest", |ctx| ingest(ctx, "sensors", "sensors"));
    a.register("areas", move |ctx| {
        for ar in 0..side {
            for ac in 0..side {
                for f in FIELDS {
                    let (mut sum, mut k) = (0.0, 0usize);
                    for r in 2 * ar..(2 * ar + 2).min(n) {
                        for c in 2 * ac..(2 * ac + 2).min(n) {
                            sum += ctx.get_or("sensors", &format!("{}.{f}", sensor(r, c)), 0.0)?;
                            k += 1;
                        }
                    }
                    ctx.put("areas", &format!("{}.{f}", area(ar, ac)), sum / k as f64)?;
                }
            }
        }
        Ok(())
    });
    a.register("thermal", move |ctx| {
        let temp = |ctx: &StepContext<'_, f64>, r: usize, c: usize| {
            ctx.get_or("sensors", &format!("{}.temp", sensor(r, c)), 0.0)
        };
        for r in 0..n {
            for c in 0..n {
                let (mut sum, mut k) = (0.0, 0usize);
                for rr in r.saturating_sub(1)..(r + 2).min(n) {
                    for cc in c.saturating_sub(1)..(c + 2).min(n) {
                        sum += temp(ctx, rr, cc)?;
                        k += 1;
                    }
                }
                ctx.put("thermal", &sensor(r, c), sum / k as f64)?;
            }
        }
        Ok(())
    });
    a.register("risk", move |ctx| {
        for ar in 0..side {
            for ac in 0..side {
                let id = area(ar, ac);
                let get = |f: &str| ctx.get_or("areas", &format!("{id}.{f}"), 0.0);
                let score = (2.0 * get("temp")? + 0.5 * get("wind")? - 4.0 * get("rain")?)
                    .clamp(0.0, 100.0);
                let level = (score / 20.0).floor().min(4.0);
                ctx.put("risk", &format!("{id}.score"), score)?;
                ctx.put("risk", &format!("{id}.level"), level)?;
            }
        }
        Ok(())
    });
    let scores = move |ctx: &StepContext<'_, f64>| -> Result<Vec<(String, f64)>, crate::engine::ActionError> {
        let mut out = Vec::with_capacity(side * side);
        for ar in 0..side {
            for ac in 0..side {
                let id = area(ar, ac);
                let s = ctx.get_or("risk", &format!("{id}.score"), 0.0)?;
                out.push((id, s));
            }
        }
        Ok(out)
    };
    a.register("overall", move |ctx| {
        let s = scores(ctx)?;
        let mean = s.iter().map(|(_, v)| v).sum::<f64>() / s.len() as f64;
        let max = s.iter().map(|&(_, v)| v).fold(0.0, f64::max);
        let hot = s.iter().filter(|&&(_, v)| v >= HOTSPOT_SCORE).count();
        ctx.put("overall", "mean", mean)?;
        ctx.put("overall", "max", max)?;
        ctx.put("overall", "hotspots", hot as f64)
    });
    a.register("satellite", move |ctx| {
        for (id, s) in scores(ctx)? {
            ctx.put("satellite", &id, f64::from(u8::from(s >= CONFIRM_SCORE)))?;
        }
        Ok(())
    });
    a.register("dispatch", move |ctx| {
        let mut units = 0.0;
        for ar in 0..side {
            for ac in 0..side {
                units += ctx.get_or("satellite", &area(ar, ac), 0.0)?;
            }
        }
        ctx.put("dispatch", "units", units)?;
        ctx.put("dispatch", "alert", f64::from(u8::from(units > 0.0)))
    });
    a
}

struct Sensor {
    prefix: String,
    temp: f64,
    rain_phase: f64,
    wind: f64,
    noise: [Ar1; 3],
}

/// Temperature and wind peak in the afternoon; rain follows a slower
/// three-day cycle.
pub fn gen_fire(config: &GeneratorConfig) -> Result<Scenario, WorkloadError> {
    config.validate()?;
    let n = config.size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sensors = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let gradient = (r + c) as f64 / (2 * n) as f64;
            sensors.push(Sensor {
                prefix: sensor(r, c),
                temp: 20.0 + 6.0 * gradient + rng.random_range(-1.0..1.0),
                rain_phase: TAU * gradient + rng.random_range(-0.2..0.2),
                wind: 12.0 + rng.random_range(-2.0..2.0),
                noise: [
                    Ar1::new(0.9, config.noise * 40.0),
                    Ar1::new(0.9, config.noise * 10.0),
                    Ar1::new(0.9, config.noise * 30.0),
                ],
            });
        }
    }
    let mut stream = Vec::with_capacity(config.waves);
    for w in 0..config.waves {
        let t = w as f64;
        let mut records = Vec::with_capacity(n * n * 3);
        for s in &mut sensors {
            let values = if config.flat {
                [s.temp, 2.0, s.wind]
            } else {
                let day = TAU * (t - 30.0) / WAVES_PER_DAY;
                let trend = 1.0 + config.drift * t / (7.0 * WAVES_PER_DAY);
                let temp = s.temp * trend + 7.0 * day.cos() + s.noise[0].step(&mut rng);
                let rain = 2.0
                    + 3.0 * (TAU * t / (3.0 * WAVES_PER_DAY) + s.rain_phase).sin()
                    + s.noise[1].step(&mut rng);
                let wind = s.wind + 6.0 * (day + 0.3).cos() + s.noise[2].step(&mut rng);
                [temp, rain.max(0.0), wind.max(0.0)]
            };
            for (f, value) in FIELDS.iter().zip(values) {
                records.push(FeedRecord {
                    channel: "sensors".to_owned(),
                    key: format!("{}.{f}", s.prefix),
                    value,
                });
            }
        }
        stream.push(WaveInput {
            wave: w as u64,
            records,
        });
    }
    Scenario::assemble(Workload::Fire, config, stream)
}
