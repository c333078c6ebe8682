//! Scenario files (TOML): schedule, plants, controllers, shadow services,
//! budgets, twin fidelity and scripted events.
//!
//! ```toml
//! name = "ab_demo"
//! seed = 42
//! cycles = 10000
//!
//! [schedule]
//! period_us = 1000
//! clock = "deterministic"
//!
//! [[assets]]
//! a = 0.9
//! b = 0.1
//! [assets.controller]
//! kp = 2.0
//! ki = 0.5
//! setpoint = 1.0
//!
//! [[shadows]]
//! asset = 0
//! kp = 2.2
//! ki = 0.5
//! setpoint = 1.0
//!
//! [[events]]
//! at = 2000
//! action = "deploy_shadow"
//!
//! [[events]]
//! at = 6000
//! action = "promote"
//! ```

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{DeploySpec, ManagerConfig, ResourceBudget};
use crate::control::{ControllerSpec, CostInjection, ServiceDescriptor, ServiceId, ServiceRole};
use crate::device::{ActiveService, DeviceConfig};
use crate::executor::{ClockMode, CycleSchedule, Priority, DEFAULT_QUEUE_DEPTH};
use crate::plant::{AssetId, NoiseSpec, PlantConfig};
use crate::ring::{Cycle, MAX_ASSETS};
use crate::twin::{FidelitySpec, TwinConfig};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

fn default_clock() -> ClockMode {
    ClockMode::Deterministic
}
fn default_workers() -> usize {
    4
}
fn default_capacity() -> usize {
    1024
}
fn default_depth() -> usize {
    DEFAULT_QUEUE_DEPTH
}
fn default_cost() -> u64 {
    20
}
fn default_clamp() -> f64 {
    1.0e6
}
fn default_a_name() -> String {
    "A".into()
}
fn default_b_name() -> String {
    "B".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub period_us: u64,
    /// Defaults to 10% of the period.
    #[serde(default)]
    pub prep_us: Option<u64>,
    #[serde(default = "default_clock")]
    pub clock: ClockMode,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Defaults to half the period.
    #[serde(default)]
    pub p2_window_us: Option<u64>,
    #[serde(default = "default_capacity")]
    pub ring_capacity: usize,
    #[serde(default = "default_depth")]
    pub queue_depth: usize,
    /// Wall-clock only: `SCHED_FIFO` priority for the cycle thread.
    #[serde(default)]
    pub realtime_priority: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(default = "default_a_name")]
    pub name: String,
    pub kp: f64,
    #[serde(default)]
    pub ki: f64,
    #[serde(default)]
    pub kd: f64,
    pub setpoint: f64,
    #[serde(default = "default_clamp")]
    pub integral_clamp: f64,
    /// Declared execution cost, charged in deterministic mode.
    #[serde(default = "default_cost")]
    pub cost_us: u64,
}

impl ControllerSection {
    fn spec(&self) -> ControllerSpec {
        ControllerSpec {
            kp: self.kp,
            ki: self.ki,
            kd: self.kd,
            setpoint: self.setpoint,
            integral_clamp: self.integral_clamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetSection {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub disturbance_std: f64,
    #[serde(default)]
    pub controller: Option<ControllerSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowSection {
    pub asset: AssetId,
    #[serde(default = "default_b_name")]
    pub name: String,
    pub kp: f64,
    #[serde(default)]
    pub ki: f64,
    #[serde(default)]
    pub kd: f64,
    pub setpoint: f64,
    #[serde(default = "default_clamp")]
    pub integral_clamp: f64,
    #[serde(default = "default_cost")]
    pub cost_us: u64,
    #[serde(default)]
    pub budget: ResourceBudget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventAction {
    DeployShadow,
    Promote,
    Rollback,
    Abort,
    /// Test hook: the shadow's execution cost grows by `cost_us` from `at`.
    InjectBudgetViolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEvent {
    /// Fires before the preparation window of this cycle.
    pub at: Cycle,
    pub action: EventAction,
    #[serde(default)]
    pub asset: AssetId,
    /// Switch cycle for promote/rollback; defaults to `at`.
    #[serde(default)]
    pub cycle: Option<Cycle>,
    #[serde(default)]
    pub cost_us: Option<u64>,
}

impl ScenarioEvent {
    pub fn switch_cycle(&self) -> Cycle {
        self.cycle.unwrap_or(self.at)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinSection {
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub supervisory: Option<FidelitySpec>,
    #[serde(default)]
    pub kpi: Option<FidelitySpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Mandatory in deterministic mode; derives every noise stream.
    #[serde(default)]
    pub seed: Option<u64>,
    pub cycles: Cycle,
    pub schedule: ScheduleSection,
    pub assets: Vec<AssetSection>,
    #[serde(default)]
    pub shadows: Vec<ShadowSection>,
    #[serde(default)]
    pub manager: Option<ManagerConfig>,
    #[serde(default)]
    pub twin: Option<TwinSection>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(s)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut v = Vec::new();
        if self.cycles == 0 {
            v.push("cycles must be >= 1".to_string());
        }
        if self.schedule.clock == ClockMode::Deterministic && self.seed.is_none() {
            v.push("seed is mandatory in deterministic mode".into());
        }
        if let Err(e) = self.schedule().validate() {
            v.push(e.to_string());
        }
        if !self.schedule.ring_capacity.is_power_of_two() || self.schedule.ring_capacity < 2 {
            v.push("ring_capacity must be a power of two >= 2".into());
        }
        if self.assets.is_empty() || self.assets.len() > MAX_ASSETS {
            v.push(format!("between 1 and {MAX_ASSETS} assets required"));
        }
        for (i, a) in self.assets.iter().enumerate() {
            if let Err(e) = self.plant(i, a).validate() {
                v.push(format!("assets[{i}]: {e}"));
            }
            if let Some(c) = &a.controller {
                if let Err(e) = c.spec().validate() {
                    v.push(format!("assets[{i}].controller: {e}"));
                }
            }
        }
        let mut seen = Vec::new();
        for s in &self.shadows {
            if s.asset >= self.assets.len() {
                v.push(format!("shadow {} targets unknown asset {}", s.name, s.asset));
            }
            if seen.contains(&s.asset) {
                v.push(format!("more than one shadow for asset {}", s.asset));
            }
            seen.push(s.asset);
            if let Err(e) = s.budget.validate() {
                v.push(format!("shadow {}: {e}", s.name));
            }
        }
        for w in self.events.windows(2) {
            if w[1].at <= w[0].at {
                v.push(format!(
                    "event cycles must be strictly increasing ({} then {})",
                    w[0].at, w[1].at
                ));
            }
        }
        for e in &self.events {
            if e.asset >= self.assets.len() {
                v.push(format!("event at {} targets unknown asset {}", e.at, e.asset));
            }
            if e.at >= self.cycles {
                v.push(format!("event at {} is beyond the run length {}", e.at, self.cycles));
            }
            match e.action {
                EventAction::DeployShadow | EventAction::InjectBudgetViolation
                    if !self.shadows.iter().any(|s| s.asset == e.asset) =>
                {
                    v.push(format!("event at {} needs a shadow for asset {}", e.at, e.asset));
                }
                EventAction::Promote | EventAction::Rollback if e.switch_cycle() < e.at => {
                    v.push(format!(
                        "event at {}: switch cycle {} lies in the past",
                        e.at,
                        e.switch_cycle()
                    ));
                }
                EventAction::InjectBudgetViolation if e.cost_us.is_none() => {
                    v.push(format!("event at {}: inject_budget_violation needs cost_us", e.at));
                }
                _ => {}
            }
        }
        if let Err(e) = self.twin_config().validate() {
            v.push(format!("twin: {e}"));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(v))
        }
    }

    pub fn schedule(&self) -> CycleSchedule {
        let s = &self.schedule;
        let period = Duration::from_micros(s.period_us);
        let mut schedule = CycleSchedule::new(period, s.clock);
        if let Some(p) = s.prep_us {
            schedule.prep_offset = Duration::from_micros(p);
        }
        if let Some(w) = s.p2_window_us {
            schedule.p2_window = Duration::from_micros(w);
        }
        schedule.workers = s.workers;
        schedule.queue_depth = s.queue_depth;
        schedule.realtime_priority = s.realtime_priority;
        schedule
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn plant(&self, i: usize, a: &AssetSection) -> PlantConfig {
        let noise = |std_dev: f64, stream: u64| {
            (std_dev > 0.0).then(|| NoiseSpec {
                std_dev,
                seed: self.seed().wrapping_add(1000 * i as u64 + stream),
            })
        };
        PlantConfig {
            a: a.a,
            b: a.b,
            x0: a.x0,
            measurement_noise: noise(a.noise_std, 1),
            disturbance: noise(a.disturbance_std, 2),
        }
    }

    pub fn twin_config(&self) -> TwinConfig {
        let mut cfg = TwinConfig::for_assets(self.assets.len());
        if let Some(t) = &self.twin {
            if let Some(d) = t.depth {
                cfg.depth = d;
            }
            if let Some(s) = &t.supervisory {
                cfg.supervisory = s.clone();
            }
            if let Some(k) = &t.kpi {
                cfg.kpi = k.clone();
            }
        }
        cfg
    }

    /// Deployment request for the shadow of `asset`, including any injected
    /// cost from the event script.
    pub fn deploy_spec(&self, asset: AssetId) -> Option<DeploySpec> {
        let s = self.shadows.iter().find(|s| s.asset == asset)?;
        let injection = self
            .events
            .iter()
            .find(|e| e.action == EventAction::InjectBudgetViolation && e.asset == asset)
            .map(|e| CostInjection {
                from_cycle: e.at,
                cost_us: e.cost_us.unwrap_or(0),
            });
        Some(DeploySpec {
            descriptor: ServiceDescriptor {
                id: ServiceId(2 * asset as u32 + 2),
                name: s.name.clone(),
                role: ServiceRole::Shadow,
                priority: Priority::P2,
                controller: ControllerSpec {
                    kp: s.kp,
                    ki: s.ki,
                    kd: s.kd,
                    setpoint: s.setpoint,
                    integral_clamp: s.integral_clamp,
                },
                target_asset: asset,
            },
            budget: s.budget,
            cost_us: s.cost_us,
            injection,
        })
    }

    pub fn device_config(&self, id: impl Into<String>) -> DeviceConfig {
        let plants = self.assets.iter().enumerate().map(|(i, a)| self.plant(i, a)).collect();
        let active = self
            .assets
            .iter()
            .enumerate()
            .map(|(i, a)| {
                a.controller.as_ref().map(|c| ActiveService {
                    descriptor: ServiceDescriptor {
                        id: ServiceId(2 * i as u32 + 1),
                        name: c.name.clone(),
                        role: ServiceRole::Active,
                        priority: Priority::P1,
                        controller: c.spec(),
                        target_asset: i,
                    },
                    cost_us: c.cost_us,
                })
            })
            .collect();
        DeviceConfig {
            id: id.into(),
            schedule: self.schedule(),
            ring_capacity: self.schedule.ring_capacity,
            plants,
            active,
            shadows: (0..self.assets.len()).filter_map(|a| self.deploy_spec(a)).collect(),
            manager: self.manager.unwrap_or_default(),
            twin: self.twin_config(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        seed = 1
        cycles = 100
        [schedule]
        period_us = 1000
        [[assets]]
        a = 0.9
        b = 0.1
        [assets.controller]
        kp = 2.0
        setpoint = 1.0
        [[shadows]]
        asset = 0
        kp = 2.0
        setpoint = 1.0
    "#;

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let s = Scenario::from_toml_str(BASE).unwrap();
        let sched = s.schedule();
        assert_eq!(sched.prep_offset, Duration::from_micros(100));
        assert_eq!(sched.p2_window, Duration::from_micros(500));
        assert_eq!(sched.workers, 4);
        assert_eq!(s.deploy_spec(0).unwrap().budget.violation_threshold, 5);
    }

    #[test]
    fn seed_is_mandatory_when_deterministic() {
        let err = Scenario::from_toml_str(&BASE.replace("seed = 1", "")).unwrap_err();
        assert!(err.to_string().contains("seed is mandatory"), "{err}");
    }

    #[test]
    fn events_must_strictly_increase() {
        let src = format!(
            "{BASE}\n[[events]]\nat = 10\naction = \"deploy_shadow\"\n[[events]]\nat = 10\naction = \"promote\"\n"
        );
        let err = Scenario::from_toml_str(&src).unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(matches!(
            Scenario::from_toml_str(&format!("{BASE}\nbogus = 3\n")),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn injection_attaches_to_the_shadow() {
        let src = format!(
            "{BASE}\n[[events]]\nat = 10\naction = \"deploy_shadow\"\n[[events]]\nat = 40\naction = \"inject_budget_violation\"\ncost_us = 900\n"
        );
        let s = Scenario::from_toml_str(&src).unwrap();
        assert_eq!(
            s.deploy_spec(0).unwrap().injection,
            Some(CostInjection {
                from_cycle: 40,
                cost_us: 900
            })
        );
    }
}
