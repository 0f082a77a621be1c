//! Data sharing with license monitoring and data-subject rights, on a
//! hash-linked ledger, inside a deterministic simulated network.

pub mod contract;
pub mod gdpr;
pub mod ledger;
pub mod license;
pub mod monitor;
pub mod registry;
pub mod replication;
pub mod simnet;
