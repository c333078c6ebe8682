use proptest::prelude::*;

use otshadow_core::adaptation::{AbortReason, AdaptationState};
use otshadow_core::device::{run_scenario, CycleRow, Device};
use otshadow_core::ring::{Cycle, Source, TaskId};
use otshadow_core::scenario::{EventAction, Scenario, ScenarioEvent};
use otshadow_core::separation::OperationScope;

const AB_DEMO: &str = include_str!("../../../scenarios/ab_demo.toml");
const BUDGET_ABORT: &str = include_str!("../../../scenarios/budget_abort.toml");
const TWO_ASSETS: &str = include_str!("../../../scenarios/two_assets.toml");

fn scenario(toml: &str) -> Scenario {
    Scenario::from_toml_str(toml).unwrap()
}

fn event(at: Cycle, action: EventAction, asset: usize) -> ScenarioEvent {
    ScenarioEvent {
        at,
        action,
        asset,
        cycle: None,
        cost_us: None,
    }
}

fn rows(s: &Scenario) -> Vec<CycleRow> {
    let (device, summary) = run_scenario(s, true).unwrap();
    assert!(summary.success(), "{summary:?}");
    device.rows().to_vec()
}

/// Bit patterns of the plant side of one asset: state, measurement and the
/// value applied to the actuator.
fn plant_trace(rows: &[CycleRow], asset: usize, cycles: std::ops::Range<usize>) -> Vec<(u64, u64, u64)> {
    rows[cycles]
        .iter()
        .map(|r| {
            let a = &r.assets[asset];
            (a.x.to_bits(), a.y.to_bits(), a.u_applied.to_bits())
        })
        .collect()
}

fn without_events(s: &Scenario) -> Scenario {
    Scenario {
        events: Vec::new(),
        ..s.clone()
    }
}

#[test]
fn every_cycle_writes_exactly_once_across_deploy_and_promote() {
    let s = scenario(AB_DEMO);
    let (device, summary) = run_scenario(&s, true).unwrap();
    assert_eq!(summary.actuator_writes, vec![10_000]);
    assert_eq!(summary.integrity_faults, 0);
    assert!(device.rows().iter().all(|r| !r.overrun));
    // A missing or doubled write in any cycle would have been a fault.
    assert!(device.rows().iter().enumerate().all(|(i, r)| r.cycle == i as u64));
}

#[test]
fn shadow_does_not_perturb_the_plant_before_promotion() {
    let s = scenario(AB_DEMO);
    let with_b = rows(&s);
    let baseline = rows(&without_events(&s));
    assert_eq!(plant_trace(&with_b, 0, 0..6000), plant_trace(&baseline, 0, 0..6000));
    // B really ran: its output differs from A's.
    assert!(with_b[3000].assets[0].u_b.is_some());
    assert_ne!(with_b[3000].assets[0].u_b, with_b[3000].assets[0].u_a);
    // And the promotion is visible right at 6000.
    assert_ne!(
        plant_trace(&with_b, 0, 6000..6002),
        plant_trace(&baseline, 0, 6000..6002)
    );
}

#[test]
fn untargeted_asset_is_bit_identical_to_its_baseline() {
    for (target, other) in [(1, 0), (0, 1)] {
        let mut s = scenario(TWO_ASSETS);
        s.shadows[0].asset = target;
        for e in &mut s.events {
            e.asset = target;
        }
        let with_b = rows(&s);
        let baseline = rows(&without_events(&s));
        assert_eq!(
            plant_trace(&with_b, other, 0..6000),
            plant_trace(&baseline, other, 0..6000)
        );
        assert_eq!(with_b[5000].assets[target].source, Source::B);
        assert!(with_b
            .iter()
            .all(|r| r.assets[other].source == Source::A && r.assets[other].u_b.is_none()));
    }
}

fn switch_then_rollback(deploy: Cycle, k: Cycle, m: Cycle, cycles: Cycle) -> Vec<(Cycle, Source)> {
    let mut s = scenario(AB_DEMO);
    s.cycles = cycles;
    s.events = vec![
        event(deploy, EventAction::DeployShadow, 0),
        event(k, EventAction::Promote, 0),
        event(m, EventAction::Rollback, 0),
    ];
    let (_, summary) = run_scenario(&s, true).unwrap();
    assert!(summary.events.iter().all(|e| e.result.is_ok()), "{:?}", summary.events);
    assert_eq!(summary.actuator_writes, vec![cycles]);
    summary.switch_cycles[0].clone()
}

#[test]
fn switch_and_rollback_happen_exactly_at_their_cycles() {
    assert_eq!(
        switch_then_rollback(2000, 6000, 6500, 10_000),
        vec![(0, Source::A), (6000, Source::B), (6500, Source::A)]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn applied_source_is_a_step_function(deploy in 5u64..50, dk in 2u64..200, dm in 1u64..300) {
        let k = deploy + dk;
        let m = k + dm;
        let got = switch_then_rollback(deploy, k, m, m + 50);
        prop_assert_eq!(got, vec![(0, Source::A), (k, Source::B), (m, Source::A)]);
    }
}

/// Runs `s` manually and reports the first cycle whose preparation window
/// no longer saw `task` registered.
fn first_cycle_without(s: &Scenario, task: &str) -> (Device, Option<Cycle>) {
    let mut device = Device::from_scenario(s, "dev").unwrap();
    device.keep_rows();
    let id = TaskId::new(task);
    let mut gone_at = None;
    let mut seen = false;
    let events = s.events.clone();
    device
        .run_until(s.cycles, |d, c| {
            if let Some(prev) = c.checked_sub(1) {
                let present = d.executor().is_registered(&id);
                seen |= present;
                if seen && !present && gone_at.is_none() {
                    gone_at = Some(prev);
                }
            }
            for e in events.iter().filter(|e| e.at == c) {
                if e.action == EventAction::DeployShadow {
                    d.deploy_shadow(e.asset, s.deploy_spec(e.asset)).unwrap();
                }
            }
        })
        .unwrap();
    (device, gone_at)
}

#[test]
fn budget_violator_is_removed_within_threshold_plus_prep_latency() {
    let s = scenario(BUDGET_ABORT);
    let injected_from = 3000;
    let threshold = s.shadows[0].budget.violation_threshold as u64;
    // One cycle passes between the decision and the preparation window that
    // applies it.
    let prep_latency = 1;
    let (device, gone_at) = first_cycle_without(&s, "B@0");
    let gone_at = gone_at.expect("B was never removed");
    assert!(gone_at >= injected_from);
    assert!(
        gone_at <= injected_from + threshold + prep_latency,
        "removed at {gone_at}"
    );
    let status = device.manager().status(0).unwrap();
    assert_eq!(status.state, AdaptationState::Aborted);
    assert!(
        matches!(status.abort_reason, Some(AbortReason::BudgetViolation)),
        "{status:?}"
    );

    // The whole run keeps one write per cycle and the plant never notices.
    let (device, summary) = run_scenario(&s, true).unwrap();
    assert_eq!(summary.actuator_writes, vec![5000]);
    assert_eq!(summary.integrity_faults, 0);
    let baseline = rows(&without_events(&s));
    assert_eq!(
        plant_trace(device.rows(), 0, 0..5000),
        plant_trace(&baseline, 0, 0..5000)
    );
}

#[test]
fn arena_below_footprint_aborts_before_registration() {
    let mut s = scenario(AB_DEMO);
    s.shadows[0].budget.arena_limit_bytes = 0;
    let (device, summary) = run_scenario(&s, true).unwrap();
    let status = device.manager().status(0).unwrap();
    assert_eq!(status.state, AdaptationState::Aborted);
    assert_eq!(status.abort_reason, Some(AbortReason::AllocFailed));
    assert!(device.rows().iter().all(|r| r.assets[0].u_b.is_none()));
    // The scripted promote is refused, nothing switches.
    assert!(summary.events[1].result.is_err());
    assert_eq!(summary.switch_cycles[0], vec![(0, Source::A)]);
}

#[test]
fn rollback_after_retention_is_refused() {
    let mut s = scenario(AB_DEMO);
    let retention = s.manager.unwrap_or_default().retention_cycles;
    s.events.push(event(6000 + retention + 5, EventAction::Rollback, 0));
    let (device, summary) = run_scenario(&s, true).unwrap();
    let outcome = summary.events.last().unwrap();
    assert!(
        outcome.result.as_ref().is_err_and(|e| e.contains("retention")),
        "{outcome:?}"
    );
    assert_eq!(device.manager().state(0), Some(AdaptationState::Active));
    assert_eq!(summary.switch_cycles[0], vec![(0, Source::A), (6000, Source::B)]);
}

#[test]
fn terminal_states_refuse_further_commands() {
    let mut s = scenario(BUDGET_ABORT);
    s.events.push(event(4000, EventAction::Promote, 0));
    s.events.push(event(4001, EventAction::DeployShadow, 0));
    let (device, summary) = run_scenario(&s, true).unwrap();
    let n = summary.events.len();
    assert!(summary.events[n - 2].result.is_err());
    assert!(summary.events[n - 1].result.is_err());
    assert_eq!(device.manager().state(0), Some(AdaptationState::Aborted));
}

#[test]
fn promote_of_an_unhealthy_shadow_is_refused() {
    let mut s = scenario(BUDGET_ABORT);
    s.cycles = 3500;
    s.shadows[0].budget.violation_threshold = 1000;
    s.events.push(event(3100, EventAction::Promote, 0));
    let (device, summary) = run_scenario(&s, true).unwrap();
    let outcome = summary.events.last().unwrap();
    assert!(
        outcome.result.as_ref().is_err_and(|e| e.contains("unhealthy")),
        "{outcome:?}"
    );
    assert_eq!(device.manager().state(0), Some(AdaptationState::Shadow));
}

#[test]
fn management_calls_from_the_stage_path_are_flagged() {
    let s = scenario(AB_DEMO);
    let (device, _) = run_scenario(&s, false).unwrap();
    assert_eq!(device.snapshot().separation_violations, 0);

    let mut device = Device::from_scenario(&s, "dev").unwrap();
    device.run_until(10, |_, _| {}).unwrap();
    {
        let _scope = OperationScope::enter();
        let _ = device.abort(0);
    }
    assert_eq!(device.probe().violations(), 1);
    assert_eq!(device.probe().offenders(), vec!["abort"]);
}
