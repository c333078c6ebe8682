//! Controllers executed in stage 2, the software output gate and the
//! cycle-atomic switch.
//!
//! Every asset has at most two controller services: the baseline `A` and the
//! candidate `B`. Both may compute every cycle; the gate designates which of
//! the two reaches the actuator, per cycle. A switch is a new designation
//! taking effect at an agreed cycle `k`, so the change of source is atomic by
//! construction: stage 2 of cycle `k - 1` uses the old designation, stage 2
//! of cycle `k` the new one.

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{ClockMode, Priority, SyncTask, TaskContext, TaskFault};
use crate::plant::AssetId;
use crate::ring::{AssetSignals, Cycle, Source};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceId(pub u32);

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "svc{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceRole {
    Active,
    Shadow,
}

/// Discrete PID parameters. The sample time is the cycle period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub setpoint: f64,
    #[serde(default = "default_clamp")]
    pub integral_clamp: f64,
}

fn default_clamp() -> f64 {
    1.0e6
}

impl ControllerSpec {
    pub fn pid(kp: f64, ki: f64, kd: f64, setpoint: f64) -> Self {
        ControllerSpec {
            kp,
            ki,
            kd,
            setpoint,
            integral_clamp: default_clamp(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.kp, self.ki, self.kd, self.setpoint, self.integral_clamp];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("controller parameters must be finite".into());
        }
        if self.integral_clamp < 0.0 {
            return Err("integral_clamp must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
}

#[derive(Clone, Copy, Debug, Error, PartialEq)]
#[error("controller fault: non-finite measurement {measurement}")]
pub struct ControllerFault {
    pub measurement: f64,
}

/// One PID step:
/// `e = r - y; I = clamp(I + e); D = e - e_prev; u = kp*e + ki*I + kd*D`.
pub fn execute_controller(
    spec: &ControllerSpec,
    state: PidState,
    measurement: f64,
) -> Result<(f64, PidState), ControllerFault> {
    if !measurement.is_finite() {
        return Err(ControllerFault { measurement });
    }
    let error = spec.setpoint - measurement;
    let integral = (state.integral + error).clamp(-spec.integral_clamp, spec.integral_clamp);
    let derivative = error - state.prev_error;
    let u = spec.kp * error + spec.ki * integral + spec.kd * derivative;
    Ok((
        u,
        PidState {
            integral,
            prev_error: error,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub id: ServiceId,
    pub name: String,
    pub role: ServiceRole,
    pub priority: Priority,
    pub controller: ControllerSpec,
    pub target_asset: AssetId,
}

/// Extra per-cycle cost injected into a service from a given cycle on, used
/// to exercise budget monitoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInjection {
    pub from_cycle: Cycle,
    pub cost_us: u64,
}

/// Stage-2 task wrapping one controller service.
pub struct ControllerTask {
    descriptor: ServiceDescriptor,
    slot: Source,
    state: PidState,
    cost: Duration,
    injection: Option<CostInjection>,
}

impl ControllerTask {
    pub fn new(descriptor: ServiceDescriptor, slot: Source, cost: Duration) -> Self {
        assert!(slot != Source::Hold, "controller slot must be A or B");
        ControllerTask {
            descriptor,
            slot,
            state: PidState::default(),
            cost,
            injection: None,
        }
    }

    pub fn with_injection(mut self, injection: Option<CostInjection>) -> Self {
        self.injection = injection;
        self
    }

    pub fn descriptor(&self) -> &ServiceDescriptor {
        &self.descriptor
    }

    fn injected(&self, cycle: Cycle) -> Option<Duration> {
        self.injection
            .filter(|i| cycle >= i.from_cycle)
            .map(|i| Duration::from_micros(i.cost_us))
    }
}

impl SyncTask for ControllerTask {
    fn execute(&mut self, cx: &mut TaskContext<'_>) -> Result<(), TaskFault> {
        let asset = self.descriptor.target_asset;
        let y = cx.frame().asset(asset).y;
        if cx.clock_mode() == ClockMode::WallClock {
            if let Some(extra) = self.injected(cx.cycle()) {
                let until = Instant::now() + extra;
                while Instant::now() < until {
                    std::hint::spin_loop();
                }
            }
        }
        let result = execute_controller(&self.descriptor.controller, self.state, y);
        let frame = cx.frame_mut().map_err(|e| TaskFault(e.to_string()))?;
        match result {
            Ok((u, next)) => {
                self.state = next;
                frame.asset_mut(asset).set_output(self.slot, Some(u));
                Ok(())
            }
            Err(fault) => {
                frame.asset_mut(asset).set_output(self.slot, None);
                Err(TaskFault(fault.to_string()))
            }
        }
    }

    fn logical_cost(&self, cycle: Cycle) -> Duration {
        self.cost + self.injected(cycle).unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchDirection {
    /// A -> B
    Promote,
    /// B -> A
    Rollback,
}

impl SwitchDirection {
    pub fn target(self) -> Source {
        match self {
            SwitchDirection::Promote => Source::B,
            SwitchDirection::Rollback => Source::A,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchDirective {
    pub asset: AssetId,
    pub switch_cycle: Cycle,
    pub direction: SwitchDirection,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum GateError {
    #[error("switch cycle {switch_cycle} is not after current cycle {current}")]
    PastCycle { switch_cycle: Cycle, current: Cycle },
    #[error("no {0} service deployed on this asset")]
    NotDeployed(Source),
    #[error("{0} is already designated at cycle {1}")]
    AlreadyDesignated(Source, Cycle),
    #[error("switch cycle {switch_cycle} precedes the last armed switch at {last}")]
    NotMonotone { switch_cycle: Cycle, last: Cycle },
    #[error("unknown asset {0}")]
    UnknownAsset(AssetId),
}

/// Output of a gate evaluation for one asset and cycle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateDecision {
    pub value: f64,
    pub source: Source,
    pub service: Option<ServiceId>,
    /// The designated service produced no output; the last value was held.
    pub fault: bool,
}

#[derive(Clone, Debug)]
struct AssetGate {
    a: Option<ServiceId>,
    b: Option<ServiceId>,
    /// Designation change points, ascending by cycle.
    designations: Vec<(Cycle, Source)>,
    last_applied: f64,
}

impl AssetGate {
    fn service(&self, slot: Source) -> Option<ServiceId> {
        match slot {
            Source::A => self.a,
            Source::B => self.b,
            Source::Hold => None,
        }
    }

    fn designated(&self, cycle: Cycle) -> Source {
        self.designations
            .iter()
            .rev()
            .find(|(from, _)| *from <= cycle)
            .map_or(Source::A, |(_, s)| *s)
    }
}

/// Per-asset output gate. Written only in preparation windows.
#[derive(Clone, Debug)]
pub struct Gate {
    assets: Vec<AssetGate>,
}

impl Gate {
    pub fn new(asset_count: usize, hold_value: f64) -> Self {
        Gate {
            assets: (0..asset_count)
                .map(|_| AssetGate {
                    a: None,
                    b: None,
                    designations: vec![(0, Source::A)],
                    last_applied: hold_value,
                })
                .collect(),
        }
    }

    pub fn asset_count(&self) -> usize {
        self.assets.len()
    }

    fn asset_mut(&mut self, asset: AssetId) -> Result<&mut AssetGate, GateError> {
        self.assets.get_mut(asset).ok_or(GateError::UnknownAsset(asset))
    }

    pub fn register(&mut self, asset: AssetId, slot: Source, service: ServiceId) -> Result<(), GateError> {
        let g = self.asset_mut(asset)?;
        match slot {
            Source::A => g.a = Some(service),
            Source::B => g.b = Some(service),
            Source::Hold => {}
        }
        Ok(())
    }

    pub fn unregister(&mut self, asset: AssetId, slot: Source) -> Result<(), GateError> {
        let g = self.asset_mut(asset)?;
        match slot {
            Source::A => g.a = None,
            Source::B => g.b = None,
            Source::Hold => {}
        }
        Ok(())
    }

    pub fn service(&self, asset: AssetId, slot: Source) -> Option<ServiceId> {
        self.assets.get(asset).and_then(|g| g.service(slot))
    }

    pub fn designated(&self, asset: AssetId, cycle: Cycle) -> Source {
        self.assets.get(asset).map_or(Source::Hold, |g| g.designated(cycle))
    }

    /// Role of the service in `slot` at `cycle`.
    pub fn role(&self, asset: AssetId, slot: Source, cycle: Cycle) -> ServiceRole {
        if self.designated(asset, cycle) == slot {
            ServiceRole::Active
        } else {
            ServiceRole::Shadow
        }
    }

    /// Designation change points for an asset.
    pub fn designations(&self, asset: AssetId) -> &[(Cycle, Source)] {
        self.assets.get(asset).map_or(&[], |g| g.designations.as_slice())
    }

    /// Arms a switch. `current` is the last completed cycle; the switch must
    /// take effect strictly after it.
    pub fn arm_switch(&mut self, directive: &SwitchDirective, current: Option<Cycle>) -> Result<(), GateError> {
        let k = directive.switch_cycle;
        let earliest = current.map_or(0, |c| c + 1);
        if k < earliest {
            return Err(GateError::PastCycle {
                switch_cycle: k,
                current: current.unwrap_or(0),
            });
        }
        let g = self.asset_mut(directive.asset)?;
        let target = directive.direction.target();
        if g.service(target).is_none() {
            return Err(GateError::NotDeployed(target));
        }
        let (last, _) = *g.designations.last().expect("initial designation");
        if k <= last && last != 0 {
            return Err(GateError::NotMonotone { switch_cycle: k, last });
        }
        if g.designated(k) == target {
            return Err(GateError::AlreadyDesignated(target, k));
        }
        g.designations.push((k, target));
        Ok(())
    }

    /// Drops designation changes that have not taken effect by `from`.
    /// Returns how many were removed.
    pub fn cancel_pending(&mut self, asset: AssetId, from: Cycle) -> Result<usize, GateError> {
        let g = self.asset_mut(asset)?;
        let before = g.designations.len();
        g.designations.retain(|(at, _)| *at == 0 || *at < from);
        Ok(before - g.designations.len())
    }

    /// Picks the designated service's output for `cycle`; every other output
    /// is left in the frame for twinning but never forwarded.
    pub fn apply_gate(&mut self, asset: AssetId, cycle: Cycle, outputs: &AssetSignals) -> GateDecision {
        let Some(g) = self.assets.get_mut(asset) else {
            return GateDecision {
                value: 0.0,
                source: Source::Hold,
                service: None,
                fault: true,
            };
        };
        let designated = g.designated(cycle);
        let service = g.service(designated);
        match (service, outputs.output(designated)) {
            (Some(id), Some(value)) => {
                g.last_applied = value;
                GateDecision {
                    value,
                    source: designated,
                    service: Some(id),
                    fault: false,
                }
            }
            (service, _) => GateDecision {
                value: g.last_applied,
                source: Source::Hold,
                service: None,
                fault: service.is_some(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outputs(a: Option<f64>, b: Option<f64>) -> AssetSignals {
        AssetSignals {
            u_a: a,
            u_b: b,
            ..Default::default()
        }
    }

    fn gate_ab() -> Gate {
        let mut g = Gate::new(1, 0.0);
        g.register(0, Source::A, ServiceId(1)).unwrap();
        g.register(0, Source::B, ServiceId(2)).unwrap();
        g
    }

    #[test]
    fn pure_proportional() {
        let spec = ControllerSpec::pid(1.0, 0.0, 0.0, 1.0);
        let (u, _) = execute_controller(&spec, PidState::default(), 0.0).unwrap();
        assert_eq!(u, 1.0);
    }

    #[test]
    fn zero_gains_give_zero_output() {
        let spec = ControllerSpec::pid(0.0, 0.0, 0.0, 1.0);
        for y in [-3.0, 0.0, 0.7, 1e9] {
            assert_eq!(execute_controller(&spec, PidState::default(), y).unwrap().0, 0.0);
        }
    }

    #[test]
    fn integral_is_clamped() {
        let spec = ControllerSpec {
            integral_clamp: 2.0,
            ..ControllerSpec::pid(0.0, 1.0, 0.0, 10.0)
        };
        let mut s = PidState::default();
        for _ in 0..5 {
            s = execute_controller(&spec, s, 0.0).unwrap().1;
        }
        assert_eq!(s.integral, 2.0);
    }

    #[test]
    fn non_finite_measurement_faults() {
        let spec = ControllerSpec::pid(1.0, 1.0, 1.0, 0.0);
        assert!(execute_controller(&spec, PidState::default(), f64::NAN).is_err());
        assert!(execute_controller(&spec, PidState::default(), f64::INFINITY).is_err());
    }

    #[test]
    fn switch_takes_effect_exactly_at_k() {
        let mut g = gate_ab();
        g.arm_switch(
            &SwitchDirective {
                asset: 0,
                switch_cycle: 6000,
                direction: SwitchDirection::Promote,
            },
            Some(5999),
        )
        .unwrap();
        let o = outputs(Some(1.0), Some(2.0));
        assert_eq!(g.apply_gate(0, 5999, &o).source, Source::A);
        assert_eq!(g.apply_gate(0, 6000, &o).source, Source::B);
        assert_eq!(g.apply_gate(0, 6000, &o).value, 2.0);
    }

    #[test]
    fn arm_with_current_cycle_rejected() {
        let mut g = gate_ab();
        let d = SwitchDirective {
            asset: 0,
            switch_cycle: 50,
            direction: SwitchDirection::Promote,
        };
        assert!(matches!(g.arm_switch(&d, Some(50)), Err(GateError::PastCycle { .. })));
        assert!(g.arm_switch(&d, Some(49)).is_ok());
    }

    #[test]
    fn arm_without_shadow_rejected() {
        let mut g = Gate::new(1, 0.0);
        g.register(0, Source::A, ServiceId(1)).unwrap();
        let d = SwitchDirective {
            asset: 0,
            switch_cycle: 10,
            direction: SwitchDirection::Promote,
        };
        assert_eq!(g.arm_switch(&d, Some(1)), Err(GateError::NotDeployed(Source::B)));
    }

    #[test]
    fn promote_then_rollback() {
        let mut g = gate_ab();
        let promote = SwitchDirective {
            asset: 0,
            switch_cycle: 100,
            direction: SwitchDirection::Promote,
        };
        let rollback = SwitchDirective {
            direction: SwitchDirection::Rollback,
            switch_cycle: 150,
            ..promote
        };
        g.arm_switch(&promote, Some(10)).unwrap();
        // second promote is a conflict
        assert!(g
            .arm_switch(
                &SwitchDirective {
                    switch_cycle: 120,
                    ..promote
                },
                Some(10)
            )
            .is_err());
        g.arm_switch(&rollback, Some(20)).unwrap();
        let o = outputs(Some(1.0), Some(2.0));
        let sources: Vec<_> = (0..200).map(|c| g.apply_gate(0, c, &o).source).collect();
        assert!(sources[..100].iter().all(|s| *s == Source::A));
        assert!(sources[100..150].iter().all(|s| *s == Source::B));
        assert!(sources[150..].iter().all(|s| *s == Source::A));
        assert_eq!(g.designations(0), &[(0, Source::A), (100, Source::B), (150, Source::A)]);
    }

    #[test]
    fn missing_designated_output_holds_last_with_fault() {
        let mut g = gate_ab();
        assert_eq!(g.apply_gate(0, 0, &outputs(Some(3.0), None)).value, 3.0);
        let d = g.apply_gate(0, 1, &outputs(None, Some(9.0)));
        assert_eq!(d.value, 3.0);
        assert_eq!(d.source, Source::Hold);
        assert!(d.fault);
    }

    #[test]
    fn no_controller_holds_without_fault() {
        let mut g = Gate::new(1, 0.25);
        let d = g.apply_gate(0, 0, &outputs(None, None));
        assert_eq!((d.value, d.source, d.fault), (0.25, Source::Hold, false));
    }

    #[test]
    fn cancel_pending_keeps_effective_designations() {
        let mut gate = Gate::new(1, 0.0);
        gate.register(0, Source::A, ServiceId(1)).unwrap();
        gate.register(0, Source::B, ServiceId(2)).unwrap();
        let promote = SwitchDirective {
            asset: 0,
            switch_cycle: 10,
            direction: SwitchDirection::Promote,
        };
        gate.arm_switch(&promote, Some(4)).unwrap();
        assert_eq!(gate.cancel_pending(0, 11).unwrap(), 0);
        assert_eq!(gate.cancel_pending(0, 6).unwrap(), 1);
        assert_eq!(gate.designated(0, 50), Source::A);
    }

    #[test]
    fn shadow_output_never_applied() {
        let mut g = gate_ab();
        for c in 0..50 {
            let d = g.apply_gate(0, c, &outputs(Some(c as f64), Some(-1.0)));
            assert_eq!(d.source, Source::A);
            assert_eq!(g.role(0, Source::B, c), ServiceRole::Shadow);
        }
    }
}
