//! Simulated physical layer: first-order plants, seeded sensors and the
//! actuator boundary where single-writer and gating rules are enforced.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{ServiceId, ServiceRole};
use crate::ring::Source;

pub type AssetId = usize;

/// Zero-mean Gaussian noise with its own seeded stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std_dev: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
struct NoiseSource {
    spec: NoiseSpec,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    fn new(spec: NoiseSpec) -> Self {
        NoiseSource {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        }
    }

    fn sample(&mut self) -> f64 {
        if self.spec.std_dev == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, self.spec.std_dev)
            .expect("validated std_dev")
            .sample(&mut self.rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub measurement_noise: Option<NoiseSpec>,
    #[serde(default)]
    pub disturbance: Option<NoiseSpec>,
}

impl PlantConfig {
    pub fn first_order(a: f64, b: f64, x0: f64) -> Self {
        PlantConfig {
            a,
            b,
            x0,
            measurement_noise: None,
            disturbance: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.a.is_finite() && self.b.is_finite() && self.x0.is_finite()) {
            return Err("plant coefficients and x0 must be finite".into());
        }
        for n in [self.measurement_noise, self.disturbance].into_iter().flatten() {
            if !(n.std_dev.is_finite() && n.std_dev >= 0.0) {
                return Err("noise std_dev must be finite and >= 0".into());
            }
        }
        Ok(())
    }
}

/// `x' = a*x + b*u + d`, sensed as `x + noise`.
#[derive(Clone, Debug)]
pub struct PlantModel {
    pub asset: AssetId,
    pub a: f64,
    pub b: f64,
    x: f64,
    measurement: Option<NoiseSource>,
    disturbance: Option<NoiseSource>,
}

impl PlantModel {
    pub fn new(asset: AssetId, cfg: &PlantConfig) -> Self {
        PlantModel {
            asset,
            a: cfg.a,
            b: cfg.b,
            x: cfg.x0,
            measurement: cfg.measurement_noise.map(NoiseSource::new),
            disturbance: cfg.disturbance.map(NoiseSource::new),
        }
    }

    pub fn state(&self) -> f64 {
        self.x
    }

    pub fn sense(&mut self) -> f64 {
        let noise = self.measurement.as_mut().map_or(0.0, NoiseSource::sample);
        self.x + noise
    }

    pub fn step(&mut self, u: f64) -> f64 {
        let d = self.disturbance.as_mut().map_or(0.0, NoiseSource::sample);
        self.x = self.a * self.x + self.b * u + d;
        self.x
    }
}

/// A tagged write arriving at the fieldbus boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActuatorWrite {
    pub value: f64,
    pub source: Source,
    pub service: Option<ServiceId>,
    pub role: Option<ServiceRole>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum IntegrityFault {
    DuplicateWrite {
        asset: AssetId,
        cycle: u64,
    },
    MissingWrite {
        asset: AssetId,
        cycle: u64,
    },
    ShadowWrite {
        asset: AssetId,
        cycle: u64,
        service: ServiceId,
    },
}

/// Per-asset actuator interface.
#[derive(Clone, Debug)]
pub struct ActuatorPort {
    pub asset: AssetId,
    last_applied: f64,
    last_source: Source,
    cycle: Option<u64>,
    writes_this_cycle: u32,
    total_writes: u64,
}

impl ActuatorPort {
    pub fn new(asset: AssetId) -> Self {
        ActuatorPort {
            asset,
            last_applied: 0.0,
            last_source: Source::Hold,
            cycle: None,
            writes_this_cycle: 0,
            total_writes: 0,
        }
    }

    pub fn last_applied(&self) -> f64 {
        self.last_applied
    }

    pub fn last_source(&self) -> Source {
        self.last_source
    }

    pub fn total_writes(&self) -> u64 {
        self.total_writes
    }

    pub fn writes_in(&self, cycle: u64) -> u32 {
        if self.cycle == Some(cycle) {
            self.writes_this_cycle
        } else {
            0
        }
    }

    /// Applies a write. A second write in the same cycle or a write tagged
    /// as coming from a shadow service is refused and reported.
    pub fn actuate(&mut self, cycle: u64, write: ActuatorWrite) -> Result<(), IntegrityFault> {
        if self.cycle != Some(cycle) {
            self.cycle = Some(cycle);
            self.writes_this_cycle = 0;
        }
        if self.writes_this_cycle > 0 {
            return Err(IntegrityFault::DuplicateWrite {
                asset: self.asset,
                cycle,
            });
        }
        if let (Some(ServiceRole::Shadow), Some(service)) = (write.role, write.service) {
            return Err(IntegrityFault::ShadowWrite {
                asset: self.asset,
                cycle,
                service,
            });
        }
        self.writes_this_cycle = 1;
        self.total_writes += 1;
        self.last_applied = write.value;
        self.last_source = write.source;
        Ok(())
    }
}

/// The simulated fieldbus: plants, their actuator ports and the integrity
/// fault log.
#[derive(Clone, Debug)]
pub struct Fieldbus {
    plants: Vec<PlantModel>,
    ports: Vec<ActuatorPort>,
    faults: Vec<IntegrityFault>,
}

impl Fieldbus {
    pub fn new(plants: &[PlantConfig]) -> Self {
        Fieldbus {
            plants: plants.iter().enumerate().map(|(i, c)| PlantModel::new(i, c)).collect(),
            ports: (0..plants.len()).map(ActuatorPort::new).collect(),
            faults: Vec::new(),
        }
    }

    pub fn asset_count(&self) -> usize {
        self.plants.len()
    }

    pub fn plant(&self, asset: AssetId) -> &PlantModel {
        &self.plants[asset]
    }

    pub fn plant_mut(&mut self, asset: AssetId) -> &mut PlantModel {
        &mut self.plants[asset]
    }

    pub fn port(&self, asset: AssetId) -> &ActuatorPort {
        &self.ports[asset]
    }

    pub fn faults(&self) -> &[IntegrityFault] {
        &self.faults
    }

    /// Actuates the port and steps the plant with the value actually applied.
    pub fn forward(&mut self, cycle: u64, asset: AssetId, write: ActuatorWrite) {
        match self.ports[asset].actuate(cycle, write) {
            Ok(()) => {
                self.plants[asset].step(write.value);
            }
            Err(fault) => self.faults.push(fault),
        }
    }

    /// Records a fault for every asset that did not receive exactly one
    /// write in `cycle`.
    pub fn check_cycle(&mut self, cycle: u64) {
        for port in &self.ports {
            if port.writes_in(cycle) == 0 {
                self.faults.push(IntegrityFault::MissingWrite {
                    asset: port.asset,
                    cycle,
                });
            }
        }
    }
}
