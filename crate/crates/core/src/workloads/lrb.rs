//! Linear-road variable tolling. Vehicles circulate on one-mile segments of
//! circular expressways and report position and speed every 30 seconds.
//! Speeds follow a random walk pulled towards a density-dependent target,
//! and occasional accidents stop a vehicle for ten minutes.
//!
//! Only the vehicle count, toll and congestion steps tolerate error. A step
//! waits for all of its predecessors, so a skipped speed or accident step
//! would hold back the toll while counts keep changing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{GeneratorConfig, Scenario, Workload, WorkloadError};
use crate::engine::{ActionRegistry, FeedRecord, WaveInput};

pub(super) const WORKFLOW: &str = "\
workflow lrb

step ingest
out raw_positions, raw_queries

step positions
after ingest
in raw_positions
out positions

step queries
after ingest
in raw_queries
out answers

step speed
after positions
in positions
out speed

step count
after positions
in positions
out count
max_error 0.1
impact rel
error rel

step accidents
after positions
in positions
out accidents

step toll
after speed count accidents
in speed, count, accidents
out tolls
max_error 0.1
impact rel
error rel

step congestion
after toll
in tolls
out congestion
max_error 0.1
impact rel
error rel

step replies
after queries toll
in answers, tolls
out replies
";

/// Speed reports kept per vehicle: five minutes at 30-second waves.
pub const WINDOW: usize = 10;
const FREE_FLOW: f64 = 65.0;
const MAX_SPEED: f64 = 75.0;
const MIN_SPEED: f64 = 5.0;
/// Average speed under which a vehicle counts as stopped.
const STOPPED: f64 = 3.0;
const ACCIDENT_WAVES: u64 = 20;
const ACCIDENT_RATE: f64 = 0.02;
const QUERY_SLOTS: usize = 3;
/// Tolls apply below this segment speed and above this many vehicles.
const TOLL_SPEED: f64 = 55.0;
const TOLL_FREE_VEHICLES: f64 = 8.0;
const SEGMENTS_PER_AREA: usize = 5;

fn vehicle(x: usize, i: usize) -> String {
    format!("e{x}v{i:04}")
}

fn segment(x: usize, s: usize) -> String {
    format!("e{x}s{s:02}")
}

pub(super) fn actions(config: &GeneratorConfig) -> ActionRegistry<f64> {
    let (xways, segs, vehicles) = (config.expressways, config.size, config.vehicles);
    let areas = segs.div_ceil(SEGMENTS_PER_AREA);
    let mut a: ActionRegistry<f64> = ActionRegistry::new();
    // The source keeps the speed window: each report overwrites the slot of
    // its wave, and a new vehicle's window starts full.
    a.register("ingest", |ctx| {
        let wave = ctx.wave();
        let feed = ctx.feed().to_vec();
        for r in feed {
            match (r.channel.as_str(), r.key.strip_suffix(".v")) {
                ("position", Some(id)) => {
                    let slot = format!("{id}.v{}", wave % WINDOW as u64);
                    if ctx.container("raw_positions")?.get(&slot).is_none() {
                        for k in 0..WINDOW {
                            ctx.put("raw_positions", &format!("{id}.v{k}"), r.value)?;
                        }
                    } else {
                        ctx.put("raw_positions", &slot, r.value)?;
                    }
                }
                ("position", None) => ctx.put("raw_positions", &r.key, r.value)?,
                ("query", _) => ctx.put("raw_queries", &r.key, r.value)?,
                (other, _) => return Err(format!("unknown channel `{other}`").into()),
            }
        }
        Ok(())
    });
    a.register("positions", move |ctx| {
        for x in 0..xways {
            for i in 0..vehicles {
                let id = vehicle(x, i);
                let Some(pos) = ctx.container("raw_positions")?.get(&format!("{id}.x")) else {
                    continue;
                };
                let mut sum = 0.0;
                for k in 0..WINDOW {
                    sum += ctx.get("raw_positions", &format!("{id}.v{k}"))?;
                }
                let seg = (pos.floor() as usize).min(segs - 1);
                ctx.put("positions", &format!("{id}.seg"), seg as f64)?;
                ctx.put("positions", &format!("{id}.avg"), sum / WINDOW as f64)?;
            }
        }
        Ok(())
    });
    // Per expressway and segment: (vehicles, speed sum, stopped vehicles).
    let tally = move |ctx: &crate::engine::StepContext<'_, f64>| {
        let mut t = vec![vec![(0usize, 0.0f64, 0usize); segs]; xways];
        for (x, row) in t.iter_mut().enumerate() {
            for i in 0..vehicles {
                let id = vehicle(x, i);
                let p = ctx.container("positions")?;
                let (Some(seg), Some(avg)) =
                    (p.get(&format!("{id}.seg")), p.get(&format!("{id}.avg")))
                else {
                    continue;
                };
                let cell = &mut row[(seg as usize).min(segs - 1)];
                cell.0 += 1;
                cell.1 += avg;
                cell.2 += usize::from(avg < STOPPED);
            }
        }
        Ok::<_, crate::engine::ActionError>(t)
    };
    a.register("speed", move |ctx| {
        for (x, row) in tally(ctx)?.into_iter().enumerate() {
            for (s, (n, sum, _)) in row.into_iter().enumerate() {
                let v = if n == 0 { FREE_FLOW } else { sum / n as f64 };
                ctx.put("speed", &segment(x, s), v)?;
            }
        }
        Ok(())
    });
    a.register("count", move |ctx| {
        for (x, row) in tally(ctx)?.into_iter().enumerate() {
            for (s, (n, _, _)) in row.into_iter().enumerate() {
                ctx.put("count", &segment(x, s), n as f64)?;
            }
        }
        Ok(())
    });
    a.register("accidents", move |ctx| {
        for (x, row) in tally(ctx)?.into_iter().enumerate() {
            for (s, (_, _, stopped)) in row.into_iter().enumerate() {
                let seg = segment(x, s);
                ctx.put("accidents", &format!("{seg}.stopped"), stopped as f64)?;
                ctx.put(
                    "accidents",
                    &format!("{seg}.flag"),
                    f64::from(u8::from(stopped > 0)),
                )?;
            }
        }
        Ok(())
    });
    // Congestion grows with density and with the speed deficit. Slow, dense
    // segments are tolled by the square of their excess vehicles, except
    // with an accident at or up to two segments ahead.
    a.register("toll", move |ctx| {
        for x in 0..xways {
            for s in 0..segs {
                let seg = segment(x, s);
                let speed = ctx.get_or("speed", &seg, FREE_FLOW)?;
                let count = ctx.get_or("count", &seg, 0.0)?;
                let congestion = count * (1.0f64 - speed / FREE_FLOW).max(0.0);
                let mut accident = false;
                for ahead in 0..3 {
                    let next = segment(x, (s + ahead) % segs);
                    accident |= ctx.get_or("accidents", &format!("{next}.flag"), 0.0)? > 0.0;
                }
                let excess = count - TOLL_FREE_VEHICLES;
                let toll = if accident || speed >= TOLL_SPEED || excess <= 0.0 {
                    0.0
                } else {
                    2.0 * excess * excess
                };
                ctx.put("tolls", &format!("{seg}.congestion"), congestion)?;
                ctx.put("tolls", &format!("{seg}.toll"), toll)?;
            }
        }
        Ok(())
    });
    a.register("congestion", move |ctx| {
        for x in 0..xways {
            for area in 0..areas {
                let range = area * SEGMENTS_PER_AREA..((area + 1) * SEGMENTS_PER_AREA).min(segs);
                let len = range.len() as f64;
                let mut sum = 0.0;
                for s in range {
                    sum += ctx.get_or("tolls", &format!("{}.congestion", segment(x, s)), 0.0)?;
                }
                let level = match sum / len {
                    c if c < 2.0 => 1.0,
                    c if c < 4.0 => 2.0,
                    _ => 3.0,
                };
                ctx.put("congestion", &format!("e{x}a{area}"), level)?;
            }
        }
        Ok(())
    });
    a.register("queries", move |ctx| {
        for q in 0..QUERY_SLOTS * xways {
            let field = |f: &str| format!("q{q}.{f}");
            let active = ctx.get_or("raw_queries", &field("active"), 0.0)?;
            let x = ctx.get_or("raw_queries", &field("xway"), 0.0)?;
            let seg = ctx.get_or("raw_queries", &field("seg"), 0.0)?;
            let dist = ctx.get_or("raw_queries", &field("dist"), 0.0)?;
            let valid =
                active > 0.0 && (x as usize) < xways && (seg as usize) < segs && dist >= 1.0;
            ctx.put("answers", &field("active"), f64::from(u8::from(valid)))?;
            ctx.put("answers", &field("xway"), x)?;
            ctx.put("answers", &field("seg"), seg)?;
            ctx.put("answers", &field("dist"), dist.min(segs as f64))?;
        }
        Ok(())
    });
    // Journey cost and travel time over the queried segments, in minutes
    // at free flow inflated by congestion.
    a.register("replies", move |ctx| {
        for q in 0..QUERY_SLOTS * xways {
            let field = |f: &str| format!("q{q}.{f}");
            let (mut cost, mut time) = (0.0, 0.0);
            if ctx.get_or("answers", &field("active"), 0.0)? > 0.0 {
                let x = ctx.get("answers", &field("xway"))? as usize;
                let from = ctx.get("answers", &field("seg"))? as usize;
                let dist = ctx.get("answers", &field("dist"))? as usize;
                for k in 0..dist {
                    let seg = segment(x, (from + k) % segs);
                    cost += ctx.get_or("tolls", &format!("{seg}.toll"), 0.0)?;
                    let congestion = ctx.get_or("tolls", &format!("{seg}.congestion"), 0.0)?;
                    time += 60.0 / FREE_FLOW * (1.0 + congestion / 5.0);
                }
            }
            ctx.put("replies", &field("cost"), cost)?;
            ctx.put("replies", &field("time"), time)?;
        }
        Ok(())
    });
    a
}

struct Vehicle {
    x: f64,
    v: f64,
    stopped_until: u64,
}

pub fn gen_lrb(config: &GeneratorConfig) -> Result<Scenario, WorkloadError> {
    config.validate()?;
    let (xways, segs, per) = (config.expressways, config.size, config.vehicles);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fleet: Vec<Vec<Vehicle>> = (0..xways)
        .map(|_| {
            (0..per)
                .map(|_| Vehicle {
                    x: rng.random_range(0.0..segs as f64),
                    v: rng.random_range(40.0..FREE_FLOW),
                    stopped_until: 0,
                })
                .collect()
        })
        .collect();
    let jam = 2.5 * per as f64 / segs as f64;
    let sigma = config.noise * 100.0;
    let motion = config.motion;
    let mut stream = Vec::with_capacity(config.waves);
    for w in 0..config.waves as u64 {
        let mut records = Vec::new();
        for (x, cars) in fleet.iter_mut().enumerate() {
            let mut density = vec![0usize; segs];
            for car in cars.iter() {
                density[(car.x as usize).min(segs - 1)] += 1;
            }
            if w > 0 && rng.random_bool((ACCIDENT_RATE * motion).min(1.0)) {
                let victim = rng.random_range(0..per);
                cars[victim].stopped_until = w + ACCIDENT_WAVES;
            }
            for (i, car) in cars.iter_mut().enumerate() {
                if w > 0 {
                    let speed = if w < car.stopped_until {
                        0.0
                    } else {
                        let d = density[(car.x as usize).min(segs - 1)] as f64;
                        let target = FREE_FLOW * (1.0 - 0.7 * (d / jam).min(1.0));
                        let z: f64 = rng.sample(StandardNormal);
                        let next =
                            car.v.max(MIN_SPEED) + motion * (0.2 * (target - car.v) + sigma * z);
                        next.clamp(MIN_SPEED, MAX_SPEED)
                    };
                    car.v = speed;
                    car.x = (car.x + motion * speed * 30.0 / 3600.0).rem_euclid(segs as f64);
                }
                let id = vehicle(x, i);
                records.push(FeedRecord {
                    channel: "position".to_owned(),
                    key: format!("{id}.x"),
                    value: car.x,
                });
                records.push(FeedRecord {
                    channel: "position".to_owned(),
                    key: format!("{id}.v"),
                    value: car.v,
                });
            }
        }
        for q in 0..QUERY_SLOTS * xways {
            let active = rng.random_bool(0.5);
            let fields = [
                ("active", f64::from(u8::from(active))),
                ("xway", (q % xways) as f64),
                ("seg", rng.random_range(0..segs) as f64),
                ("dist", rng.random_range(1..=segs.min(5)) as f64),
            ];
            for (f, value) in fields {
                records.push(FeedRecord {
                    channel: "query".to_owned(),
                    key: format!("q{q}.{f}"),
                    value,
                });
            }
        }
        stream.push(WaveInput { wave: w, records });
    }
    Scenario::assemble(Workload::Lrb, config, stream)
}
