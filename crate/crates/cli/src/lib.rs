//! Network-facing pieces of the `vw` tool: the MQTT belt link and the cockpit bridge.

pub mod mqtt;
pub mod serve;
