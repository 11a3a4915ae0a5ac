use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetKind {
    Eds,
    Hixray,
    Pidray,
    Synthetic,
}

/// Ordered class list of a dataset. Class ids are positions in `codes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub name: String,
    pub codes: Vec<String>,
    pub names: Vec<String>,
}

const EDS: [(&str, &str); 10] = [
    ("DB", "plastic bottle"),
    ("KN", "knife"),
    ("SC", "scissor"),
    ("LA", "laptop"),
    ("UM", "umbrella"),
    ("LI", "lighter"),
    ("SE", "device"),
    ("PB", "power bank"),
    ("PR", "pressure"),
    ("GB", "glass bottle"),
];

const HIXRAY: [(&str, &str); 8] = [
    ("PO1", "portable charger 1 (lithium-ion prismatic cell)"),
    ("PO2", "portable charger 2 (lithium-ion cylindrical cell)"),
    ("TA", "tablet"),
    ("MP", "mobile phone"),
    ("LA", "laptop"),
    ("CO", "cosmetic"),
    ("WA", "water"),
    ("NL", "nonmetallic lighter"),
];

const PIDRAY: [(&str, &str); 12] = [
    ("BA", "baton"),
    ("PL", "pliers"),
    ("HA", "hammer"),
    ("PB", "power-bank"),
    ("SC", "scissors"),
    ("WR", "wrench"),
    ("GU", "gun"),
    ("BU", "bullet"),
    ("SP", "sprayer"),
    ("HC", "handcuffs"),
    ("KN", "knife"),
    ("LI", "lighter"),
];

impl ClassTaxonomy {
    fn from_table(name: &str, table: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            codes: table.iter().map(|(c, _)| c.to_string()).collect(),
            names: table.iter().map(|(_, n)| n.to_string()).collect(),
        }
    }

    pub fn eds() -> Self {
        Self::from_table("EDS", &EDS)
    }

    pub fn hixray() -> Self {
        Self::from_table("HiXray", &HIXRAY)
    }

    pub fn pidray() -> Self {
        Self::from_table("PIDray", &PIDRAY)
    }

    /// Generic `c0..c{n-1}` classes for synthetic data.
    pub fn synthetic(n: usize) -> Self {
        Self {
            name: "synthetic".into(),
            codes: (0..n).map(|i| format!("c{i}")).collect(),
            names: (0..n).map(|i| format!("class {i}")).collect(),
        }
    }

    pub fn for_kind(kind: DatasetKind, synthetic_classes: usize) -> Self {
        match kind {
            DatasetKind::Eds => Self::eds(),
            DatasetKind::Hixray => Self::hixray(),
            DatasetKind::Pidray => Self::pidray(),
            DatasetKind::Synthetic => Self::synthetic(synthetic_classes),
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Class id for a code or long name, case-insensitively.
    pub fn lookup(&self, label: &str) -> Option<usize> {
        let label = label.trim();
        self.codes
            .iter()
            .position(|c| c.eq_ignore_ascii_case(label))
            .or_else(|| self.names.iter().position(|n| n.eq_ignore_ascii_case(label)))
    }

    pub fn code(&self, class_id: usize) -> Result<&str> {
        self.codes.get(class_id).map(String::as_str).ok_or_else(|| {
            Error::TaxonomyMismatch(format!(
                "class id {class_id} outside {} taxonomy of {} classes",
                self.name,
                self.len()
            ))
        })
    }
}
