//! Coupling graphs shipped with the crate.

use crate::coupling::CouplingGraphs;
use crate::error::{Error, Result};

pub const SIX_AGENT_JSON: &str = include_str!("../fixtures/six_agent.json");
pub const WAREHOUSE9_JSON: &str = include_str!("../fixtures/warehouse9.json");
pub const WAREHOUSE40_JSON: &str = include_str!("../fixtures/warehouse40.json");
pub const THERMAL40_JSON: &str = include_str!("../fixtures/thermal40.json");

pub fn six_agent() -> CouplingGraphs {
    CouplingGraphs::from_json_str(SIX_AGENT_JSON).expect("bundled fixture parses")
}

pub fn warehouse9() -> CouplingGraphs {
    CouplingGraphs::from_json_str(WAREHOUSE9_JSON).expect("bundled fixture parses")
}

pub fn warehouse40() -> CouplingGraphs {
    CouplingGraphs::from_json_str(WAREHOUSE40_JSON).expect("bundled fixture parses")
}

pub fn thermal40() -> CouplingGraphs {
    CouplingGraphs::from_json_str(THERMAL40_JSON).expect("bundled fixture parses")
}

/// Look up a bundled graph by name.
pub fn by_name(name: &str) -> Result<CouplingGraphs> {
    match name {
        "six_agent" | "six-agent" => Ok(six_agent()),
        "warehouse9" => Ok(warehouse9()),
        "warehouse40" => Ok(warehouse40()),
        "thermal40" => Ok(thermal40()),
        other => Err(Error::UnknownConfig(other.to_string())),
    }
}
