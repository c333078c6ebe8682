//! Runtime for A/B testing and shadow deployment of control services on a
//! cyclic operation plane.
//!
//! The operation plane is a four-stage ring pipeline driven by a cyclic
//! executive ([`executor`]). Controllers run in stage 2 behind a per-asset
//! output gate ([`control`]); the adaptation manager ([`adaptation`]) deploys,
//! monitors, promotes and rolls back shadow services through preparation
//! window requests only. [`twin`] records the operation data and the
//! management state, [`device`] composes all of it and [`scenario`] loads
//! scripted runs.

pub mod adaptation;
pub mod control;
pub mod device;
pub mod executor;
pub mod plant;
pub mod ring;
pub mod scenario;
pub mod separation;
pub mod twin;
