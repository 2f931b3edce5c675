//! Ledger-anchored regulation for multi-agent systems.
//!
//! Agents emit signed behavior records onto a Merkle-anchored [`ledger`]. The
//! [`arbitration`] contract enforces per-epoch submission with staking,
//! slashing and privilege revocation, and resolves disputes against a fixed
//! rule set. [`reputation`] keeps Beta-posterior trust scores and runs the
//! repeated reporting game. [`forecasting`] trains a small denoising
//! diffusion model on honest behavior trajectories and turns reconstruction
//! error into calibrated alerts. [`simulation`] wires everything into a
//! seeded, deterministic epoch loop.

pub mod arbitration;
pub mod forecasting;
pub mod keys;
pub mod ledger;
pub mod reputation;
pub mod simulation;

/// Agents are identified by opaque strings; ordering is lexicographic.
pub type AgentId = String;
