//! Closed-loop step response against a scalar recurrence written from
//! scratch (no calls into the controller module).

use std::time::Duration;

use proptest::prelude::*;

use otshadow_core::control::{ControllerSpec, ControllerTask, ServiceDescriptor, ServiceId, ServiceRole};
use otshadow_core::executor::{Binding, ClockMode, CycleSchedule, CyclicExecutor, Priority, TaskEntry};
use otshadow_core::plant::{Fieldbus, PlantConfig};
use otshadow_core::ring::Source;

const CYCLES: usize = 200;
const REL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
struct Loop {
    kp: f64,
    ki: f64,
    kd: f64,
    setpoint: f64,
    clamp: f64,
    a: f64,
    b: f64,
    x0: f64,
}

/// (x at cycle start, u applied) per cycle.
fn oracle(l: Loop) -> Vec<(f64, f64)> {
    let mut x = l.x0;
    let mut acc = 0.0f64;
    let mut last_e = 0.0f64;
    let mut out = Vec::with_capacity(CYCLES);
    for _ in 0..CYCLES {
        let e = l.setpoint - x;
        acc += e;
        if acc > l.clamp {
            acc = l.clamp;
        } else if acc < -l.clamp {
            acc = -l.clamp;
        }
        let u = l.kp * e + l.ki * acc + l.kd * (e - last_e);
        last_e = e;
        out.push((x, u));
        x = l.a * x + l.b * u;
    }
    out
}

fn runtime(l: Loop) -> Vec<(f64, f64)> {
    let schedule = CycleSchedule::new(Duration::from_millis(1), ClockMode::Deterministic);
    let field = Fieldbus::new(&[PlantConfig::first_order(l.a, l.b, l.x0)]);
    let mut ex = CyclicExecutor::with_capacity(schedule, 64, field).unwrap();
    let spec = ControllerSpec {
        integral_clamp: l.clamp,
        ..ControllerSpec::pid(l.kp, l.ki, l.kd, l.setpoint)
    };
    let descriptor = ServiceDescriptor {
        id: ServiceId(1),
        name: "A".into(),
        role: ServiceRole::Active,
        priority: Priority::P1,
        controller: spec,
        target_asset: 0,
    };
    ex.install(
        TaskEntry::controller("A@0", Priority::P1, Duration::from_micros(100)),
        Box::new(ControllerTask::new(descriptor, Source::A, Duration::from_micros(20))),
        Some(Binding {
            asset: 0,
            slot: Source::A,
            service: ServiceId(1),
        }),
    )
    .unwrap();
    ex.enable_frame_log();
    let mut applied = Vec::new();
    ex.run_with(CYCLES as u64, |r| applied.push(r.applied[0].value));
    let frames = ex.frame_log().unwrap();
    assert_eq!(frames.len(), CYCLES);
    frames.iter().map(|f| f.assets[0].x).zip(applied).collect()
}

fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}

fn worst(l: Loop) -> (f64, usize) {
    let want = oracle(l);
    let got = runtime(l);
    let mut worst = (0.0, 0);
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        let e = rel_err(g.0, w.0).max(rel_err(g.1, w.1));
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}

#[test]
fn step_response_matches_recurrence() {
    let l = Loop {
        kp: 2.0,
        ki: 0.5,
        kd: 0.1,
        setpoint: 1.0,
        clamp: 1.0e6,
        a: 0.9,
        b: 0.1,
        x0: 0.0,
    };
    let (err, at) = worst(l);
    assert!(err <= REL_TOL, "relative error {err:e} at cycle {at}");
    // The loop actually settles near the setpoint.
    let last = oracle(l)[CYCLES - 1].0;
    assert!((last - 1.0).abs() < 1e-3, "{last}");
}

#[test]
fn saturated_integrator_matches_recurrence() {
    let l = Loop {
        kp: 0.3,
        ki: 0.8,
        kd: 0.0,
        setpoint: 5.0,
        clamp: 0.75,
        a: 0.95,
        b: 0.05,
        x0: -2.0,
    };
    let (err, at) = worst(l);
    assert!(err <= REL_TOL, "relative error {err:e} at cycle {at}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_loops_match_recurrence(
        kp in 0.0f64..3.0,
        ki in 0.0f64..1.0,
        kd in 0.0f64..0.5,
        setpoint in -10.0f64..10.0,
        clamp in 0.1f64..100.0,
        a in 0.5f64..0.99,
        b in 0.01f64..0.5,
        x0 in -5.0f64..5.0,
    ) {
        let (err, at) = worst(Loop { kp, ki, kd, setpoint, clamp, a, b, x0 });
        prop_assert!(err <= REL_TOL, "relative error {:e} at cycle {}", err, at);
    }
}
