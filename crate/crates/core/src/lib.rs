//! Negotiation domain, wire protocol, partner modelling, the Pilot agent
//! policy and a deterministic session engine.

pub mod agent;
pub mod api;
pub mod catalog;
pub mod engine;
pub mod model;
pub mod opponent;
pub mod protocol;
