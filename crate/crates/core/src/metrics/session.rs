use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SessionSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session: SessionSpec,
    pub map50: f64,
    pub map50_95: f64,
}

/// One detector's results across cross-domain sessions plus their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMatrix {
    pub rows: Vec<SessionRow>,
    pub avg_map50: f64,
    pub avg_map50_95: f64,
}

/// Arrange per-session `(map50, map50_95)` in the order of `expected` and
/// average them. Every expected session must be present.
pub fn session_matrix(expected: &[SessionSpec], results: &BTreeMap<SessionSpec, (f64, f64)>) -> Result<SessionMatrix> {
    if expected.is_empty() {
        return Err(Error::Input("session matrix needs at least one session".into()));
    }
    let mut rows = Vec::with_capacity(expected.len());
    for s in expected {
        let &(map50, map50_95) = results
            .get(s)
            .ok_or_else(|| Error::Data(format!("missing result for session {s}")))?;
        rows.push(SessionRow {
            session: *s,
            map50,
            map50_95,
        });
    }
    let n = rows.len() as f64;
    Ok(SessionMatrix {
        avg_map50: rows.iter().map(|r| r.map50).sum::<f64>() / n,
        avg_map50_95: rows.iter().map(|r| r.map50_95).sum::<f64>() / n,
        rows,
    })
}
