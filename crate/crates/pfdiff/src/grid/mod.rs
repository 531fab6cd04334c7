//! Grid description: case parsing, admittance construction, sample layout,
//! and the normalization between physical units and the unit hypercube.

pub mod bounds;
pub mod case;
pub mod cases;
pub mod layout;
pub mod matpower;
pub mod ybus;

pub use bounds::NormalizationBounds;
pub use case::{Branch, Bus, BusKind, Generator, NetworkCase, DEFAULT_ANGLE_LIMIT};
pub use layout::{Quantity, SampleLayout};
pub use ybus::{build_admittance, AdmittanceMatrix};

use crate::error::Result;

/// Parse a case from text, auto-detecting the format: JSON for the native
/// schema, otherwise the MATPOWER `mpc` table subset.
pub fn parse_case(text: &str) -> Result<NetworkCase> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let case: NetworkCase = serde_json::from_str(text).map_err(|e| {
            crate::error::Error::CaseSyntax {
                line: e.line(),
                message: e.to_string(),
            }
        })?;
        case.validate()?;
        Ok(case)
    } else {
        matpower::parse_matpower(text)
    }
}
