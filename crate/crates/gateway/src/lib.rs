//! Management plane for shadow-deployment devices.
//!
//! A versioned line-delimited JSON protocol ([`protocol`], [`codec`]),
//! served over TCP and bridged to HTTP for browsers ([`server`]), plus a
//! blocking [`client`] and a [`coordinator`] that agrees on one switch cycle
//! across several devices.

pub mod client;
pub mod codec;
pub mod config;
pub mod coordinator;
pub mod dispatch;
pub mod protocol;
pub mod server;

pub use client::{Client, ClientError};
pub use config::GatewayConfig;
pub use coordinator::{LocalParticipant, Participant, RemoteParticipant, SwitchCoordinator, SwitchOutcome, Vote};
pub use dispatch::DeviceBackend;
pub use protocol::{ErrorReason, ManagementMessage, MessageType, PROTOCOL_VERSION};
pub use server::{Gateway, RunningGateway, SharedBackend};
