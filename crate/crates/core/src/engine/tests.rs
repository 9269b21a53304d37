use super::*;
use crate::learn::LearnError;

/// Predicts the same bit for every label.
struct Constant(bool, usize);

impl Predictor<f64> for Constant {
    fn dimension(&self) -> usize {
        self.1
    }

    fn predict(&self, _features: &[f64]) -> Result<Vec<bool>, LearnError> {
        Ok(vec![self.0; self.1])
    }
}

const PIPELINE: &str = "\
workflow pipe

step src
out x

step copy
after src
in x
out y
max_error 0.5
error rmse

step twice
after copy
in y
out z
max_error 0.5
error rmse

step sink
after twice
in z
out w
";

/// `src` writes the feed; the others transform their single input.
fn actions() -> ActionRegistry<f64> {
    let mut a = ActionRegistry::new();
    a.register("src", |ctx| {
        let feed: Vec<_> = ctx.feed().to_vec();
        for r in feed {
            ctx.put("x", &r.key, r.value)?;
        }
        Ok(())
    });
    let map = |from: &'static str, to: &'static str, f: fn(f64) -> f64| {
        move |ctx: &mut StepContext<'_, f64>| {
            let vals: Vec<(String, f64)> = ctx
                .container(from)?
                .values()
                .map(|(k, v)| (k.to_owned(), v))
                .collect();
            for (k, v) in vals {
                ctx.put(to, &k, f(v))?;
            }
            Ok(())
        }
    };
    a.register("copy", map("x", "y", |v| v));
    a.register("twice", map("y", "z", |v| 2.0 * v));
    a.register("sink", map("z", "w", |v| v + 1.0));
    a
}

fn engine(config: EngineConfig) -> Engine<f64> {
    let spec = load_workflow(PIPELINE).unwrap();
    Engine::new(spec, &actions(), &MetricRegistry::new(), config).unwrap()
}

fn wave(w: u64, value: f64) -> WaveInput<f64> {
    WaveInput {
        wave: w,
        records: vec![FeedRecord {
            channel: "in".into(),
            key: "k".into(),
            value,
        }],
    }
}

#[test]
fn constant_input_has_no_impact_after_first_wave() {
    let mut e = engine(EngineConfig::training());
    let first = e.run_wave_sync(&wave(0, 5.0)).unwrap();
    assert!(first.iota["copy"] > 0.0);
    for w in 1..5 {
        let r = e.run_wave_sync(&wave(w, 5.0)).unwrap();
        assert_eq!(r.iota["copy"], 0.0);
        assert_eq!(r.iota["twice"], 0.0);
        assert!(r.decision.execute.values().all(|&v| v));
    }
    assert_eq!(e.knowledge().len(), 5);
    assert_eq!(e.tolerant_steps(), ["copy", "twice"]);
}

#[test]
fn labels_are_error_over_bound_and_virtual_output_resets() {
    // With y = x and x growing by 0.3 per wave, a virtually skipped copy of
    // `copy` drifts 0.3 per wave from the last virtual trigger. The first
    // execution is the initial baseline.
    let mut e = engine(EngineConfig::training());
    let mut stale = 0.0;
    for w in 0..12 {
        let x = 0.3 * (w + 1) as f64;
        let r = e.run_wave_sync(&wave(w, x)).unwrap();
        let expected = (x - stale).abs();
        let eps = r.simulated_error["copy"];
        assert!(
            (eps - expected).abs() < 1e-12,
            "wave {w}: {eps} vs {expected}"
        );
        let label = r.example.as_ref().unwrap().labels[0];
        assert_eq!(label, eps > 0.5);
        if label || w == 0 {
            stale = x;
        }
    }
}

#[test]
fn always_true_model_matches_sync_decisions() {
    let mut sync = engine(EngineConfig::default());
    let mut asy = engine(EngineConfig::default());
    let model = Constant(true, 2);
    for w in 0..6 {
        let input = wave(w, (w * w) as f64);
        let a = sync.run_wave_sync(&input).unwrap();
        let b = asy.run_wave_async(&input, Some(&model)).unwrap();
        assert_eq!(a.decision, b.decision);
    }
    assert_eq!(
        sync.store()
            .container("w")
            .unwrap()
            .values()
            .collect::<Vec<_>>(),
        asy.store()
            .container("w")
            .unwrap()
            .values()
            .collect::<Vec<_>>()
    );
}

#[test]
fn always_false_model_runs_only_mandatory_steps() {
    let mut e = engine(EngineConfig::default());
    e.run_wave_sync(&wave(0, 1.0)).unwrap();
    let model = Constant(false, 2);
    for w in 1..5 {
        let r = e
            .run_wave_async(&wave(w, 1.0 + w as f64), Some(&model))
            .unwrap();
        assert!(r.executed("src"));
        assert!(!r.executed("copy"));
        // Skipped `copy` leaves its successors ineligible and unmeasured.
        assert!(!r.eligible["twice"]);
        assert!(!r.executed("twice"));
        assert!(!r.iota.contains_key("twice"));
        assert!(!r.executed("sink"));
        assert!(r.iota["copy"] > 0.0);
    }
}

#[test]
fn zero_tolerance_step_runs_when_eligible() {
    let mut e = engine(EngineConfig::default());
    e.run_wave_sync(&wave(0, 1.0)).unwrap();
    let r = e.run_wave_with(&wave(1, 2.0), &mut AlwaysExecute).unwrap();
    assert!(r.executed("sink"));
}

#[test]
fn impact_resets_on_execution() {
    let mut e = engine(EngineConfig::default());
    e.run_wave_sync(&wave(0, 1.0)).unwrap();
    let skip = Constant(false, 2);
    e.run_wave_async(&wave(1, 3.0), Some(&skip)).unwrap();
    assert!(e.impact_state("copy").unwrap().accumulated > 0.0);
    e.run_wave_async(&wave(2, 4.0), Some(&Constant(true, 2)))
        .unwrap();
    assert_eq!(e.impact_state("copy").unwrap().accumulated, 0.0);
    assert_eq!(e.features(), &[0.0, 0.0]);
}

#[test]
fn cancellation_and_cumulative_diverge_on_return() {
    let text = |mode: &str| {
        PIPELINE.replace(
            "error rmse\n\nstep twice",
            &format!("error rmse\nmode {mode}\nimpact abs\n\nstep twice"),
        )
    };
    let run = |mode: &str| {
        let spec = load_workflow(&text(mode)).unwrap();
        let mut e = Engine::new(
            spec,
            &actions(),
            &MetricRegistry::new(),
            EngineConfig::default(),
        )
        .unwrap();
        e.run_wave_sync(&wave(0, 1.0)).unwrap();
        let skip = Constant(false, 2);
        e.run_wave_async(&wave(1, 4.0), Some(&skip)).unwrap();
        let r = e.run_wave_async(&wave(2, 1.0), Some(&skip)).unwrap();
        r.iota["copy"]
    };
    assert_eq!(run("cancellation"), 0.0);
    assert_eq!(run("cumulative"), 6.0);
}

#[test]
fn forced_execution_after_streak() {
    let config = EngineConfig {
        force_after: Some(2),
        record_knowledge: false,
    };
    let mut e = engine(config);
    e.run_wave_sync(&wave(0, 1.0)).unwrap();
    let skip = Constant(false, 2);
    let ran: Vec<bool> = (1..8)
        .map(|w| {
            e.run_wave_async(&wave(w, w as f64), Some(&skip))
                .unwrap()
                .executed("copy")
        })
        .collect();
    assert_eq!(ran, [false, false, true, false, false, true, false]);
}

#[test]
fn lifecycle_errors() {
    let mut e = engine(EngineConfig::default());
    assert!(matches!(
        e.run_wave_async(&wave(0, 1.0), None),
        Err(EngineError::NotTrained)
    ));
    assert!(matches!(
        e.run_wave_async(&wave(0, 1.0), Some(&Constant(true, 3))),
        Err(EngineError::Shape {
            expected: 3,
            actual: 2
        })
    ));
    let spec = load_workflow(PIPELINE).unwrap();
    let mut partial = actions();
    partial.actions.remove("sink");
    assert!(matches!(
        Engine::new(spec, &partial, &MetricRegistry::new(), EngineConfig::default()),
        Err(EngineError::MissingAction(s)) if s == "sink"
    ));
}

#[test]
fn failed_wave_rolls_back() {
    let spec = load_workflow(PIPELINE).unwrap();
    let mut a = actions();
    a.register("sink", |ctx| {
        let v = ctx.get("z", "k")?;
        if v > 10.0 {
            return Err("overflow".into());
        }
        ctx.put("w", "k", v)
    });
    let mut e = Engine::new(spec, &a, &MetricRegistry::new(), EngineConfig::training()).unwrap();
    e.run_wave_sync(&wave(0, 1.0)).unwrap();
    let before_x = e.store().get("x", "k").unwrap();
    let history = e.history().clone();
    let err = e.run_wave_sync(&wave(1, 50.0)).unwrap_err();
    assert!(matches!(err, EngineError::StepFailed { ref step, wave: 1, .. } if step == "sink"));
    assert_eq!(e.store().get("x", "k").unwrap(), before_x);
    assert_eq!(e.history(), &history);
    assert_eq!(e.knowledge().len(), 1);
    e.run_wave_sync(&wave(1, 2.0)).unwrap();
}

#[test]
fn probe_shows_the_wave_and_rolls_it_back() {
    let mut e = engine(EngineConfig::training());
    e.run_wave_sync(&wave(0, 1.0)).unwrap();
    let history = e.history().clone();
    let seen = e
        .probe(&wave(1, 4.0), &mut AlwaysExecute, |e, r| {
            assert!(r.executed("copy"));
            Ok(e.store().get("x", "k").unwrap())
        })
        .unwrap();
    assert_eq!(seen, 4.0);
    assert_eq!(e.store().get("x", "k").unwrap(), 1.0);
    assert_eq!(e.history(), &history);
}

#[test]
fn actions_cannot_write_foreign_containers() {
    let spec = load_workflow(PIPELINE).unwrap();
    let mut a = actions();
    a.register("copy", |ctx| ctx.put("x", "k", 0.0));
    let mut e = Engine::new(spec, &a, &MetricRegistry::new(), EngineConfig::default()).unwrap();
    assert!(matches!(
        e.run_wave_sync(&wave(0, 1.0)),
        Err(EngineError::StepFailed { .. })
    ));
}

#[test]
fn replay_is_deterministic() {
    let run = || {
        let mut e = engine(EngineConfig::training());
        let mut out = Vec::new();
        for w in 0..10 {
            out.push(e.run_wave_sync(&wave(w, (w as f64).sin())).unwrap());
        }
        let model = Constant(false, 2);
        for w in 10..15 {
            out.push(
                e.run_wave_async(&wave(w, (w as f64).sin()), Some(&model))
                    .unwrap(),
            );
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn execution_respects_topological_order() {
    let mut e = engine(EngineConfig::default());
    e.run_wave_sync(&wave(0, 1.0)).unwrap();
    let ticks: Vec<u64> = ["src", "copy", "twice", "sink"]
        .iter()
        .map(|s| e.history().last(s).unwrap().tick)
        .collect();
    assert!(ticks.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn output_error_against_truth() {
    let mut truth = engine(EngineConfig::default());
    let mut stale = engine(EngineConfig::default());
    truth.run_wave_sync(&wave(0, 1.0)).unwrap();
    stale.run_wave_sync(&wave(0, 1.0)).unwrap();
    truth.run_wave_sync(&wave(1, 4.0)).unwrap();
    stale
        .run_wave_async(&wave(1, 4.0), Some(&Constant(false, 2)))
        .unwrap();
    assert_eq!(stale.output_error("copy", truth.store()).unwrap(), 3.0);
    assert!(stale.output_differs("copy", truth.store()).unwrap());
    assert!(!truth.output_differs("copy", truth.store()).unwrap());
    assert_eq!(truth.output_error("copy", truth.store()).unwrap(), 0.0);
}

#[test]
fn generic_over_f32() {
    let spec = load_workflow(PIPELINE).unwrap();
    let mut a: ActionRegistry<f32> = ActionRegistry::new();
    for (id, from, to) in [
        ("src", "", "x"),
        ("copy", "x", "y"),
        ("twice", "y", "z"),
        ("sink", "z", "w"),
    ] {
        a.register(id, move |ctx| {
            let v = if from.is_empty() {
                ctx.feed()[0].value
            } else {
                ctx.get(from, "k")?
            };
            ctx.put(to, "k", v)
        });
    }
    let mut e =
        Engine::<f32>::new(spec, &a, &MetricRegistry::new(), EngineConfig::training()).unwrap();
    let r = e
        .run_wave_sync(&WaveInput {
            wave: 0,
            records: vec![FeedRecord {
                channel: "in".into(),
                key: "k".into(),
                value: 2.5f32,
            }],
        })
        .unwrap();
    assert_eq!(r.simulated_error["copy"], 2.5f32);
}
