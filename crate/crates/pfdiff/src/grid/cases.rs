//! Bundled IEEE test systems, parsed from their MATPOWER case tables.

use super::case::NetworkCase;
use super::matpower::parse_matpower;

pub const IEEE14_M: &str = include_str!("../../cases/case14.m");
pub const IEEE30_M: &str = include_str!("../../cases/case30.m");

/// IEEE 14-bus system: 14 buses, 5 generators, 11 demand pairs (D = 60).
pub fn ieee14() -> NetworkCase {
    parse_matpower(IEEE14_M).expect("bundled case14 parses")
}

/// IEEE 30-bus system: 30 buses, 6 generators, 20 demand pairs (D = 112).
pub fn ieee30() -> NetworkCase {
    parse_matpower(IEEE30_M).expect("bundled case30 parses")
}

/// Resolve a case argument: the two bundled names or a file path.
pub fn resolve(spec: &str) -> Option<NetworkCase> {
    match spec {
        "ieee14" | "case14" | "14" => Some(ieee14()),
        "ieee30" | "case30" | "30" => Some(ieee30()),
        _ => None,
    }
}
