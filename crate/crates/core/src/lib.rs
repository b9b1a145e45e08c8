//! Deterministic simulation of a mixed-criticality edge network: virtualized
//! compute nodes, TSN bridges with frame replication and elimination, a
//! supervisor that places services and fails them over, and a passive
//! intrusion monitor.

pub mod config;
pub mod frer;
pub mod model;
pub mod netsim;
pub mod placement;
pub mod metrics;
pub mod monitor;
pub mod supervisor;
pub mod vnode;
pub mod world;
