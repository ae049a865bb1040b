//! Simulated network, roles, adversary and scenarios.

pub mod attacks;
pub mod knowledge;
pub mod link;
pub mod net;
pub mod roles;
pub mod scenario;
pub mod script;
pub mod synth;
pub mod world;

pub use net::{Envelope, NetCore, Role, Sim, Tap, Transcript, TranscriptRecord};
