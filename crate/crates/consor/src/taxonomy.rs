//! Social-relation label spaces.
//!
//! A taxonomy is an ordered list of class names; the order is stable and
//! defines the logit index used everywhere downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered social-relation class set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTaxonomy {
    pub name: String,
    pub classes: Vec<String>,
}

const PISC_COARSE: &str = include_str!("../configs/pisc_coarse.json");
const PISC_FINE: &str = include_str!("../configs/pisc_fine.json");
const PIPA_COARSE: &str = include_str!("../configs/pipa_coarse.json");
const PIPA_FINE: &str = include_str!("../configs/pipa_fine.json");

/// Names accepted by [`builtin_taxonomy`].
pub const BUILTIN_NAMES: [&str; 4] = ["pisc-coarse", "pisc-fine", "pipa-coarse", "pipa-fine"];

/// Returns one of the bundled benchmark taxonomies.
///
/// The PISC and PIPA class lists ship as JSON configs under `configs/`;
/// the PIPA lists follow the public PIPA-relation release.
pub fn builtin_taxonomy(name: &str) -> Result<RelationTaxonomy> {
    let json = match name {
        "pisc-coarse" => PISC_COARSE,
        "pisc-fine" => PISC_FINE,
        "pipa-coarse" => PIPA_COARSE,
        "pipa-fine" => PIPA_FINE,
        _ => {
            return Err(Error::UnknownTaxonomy {
                name: name.to_string(),
                options: BUILTIN_NAMES.join(", "),
            })
        }
    };
    let tax: RelationTaxonomy = serde_json::from_str(json)?;
    tax.validate()?;
    Ok(tax)
}

impl RelationTaxonomy {
    pub fn new(name: impl Into<String>, classes: Vec<String>) -> Result<Self> {
        let tax = RelationTaxonomy {
            name: name.into(),
            classes,
        };
        tax.validate()?;
        Ok(tax)
    }

    /// Number of classes `C`.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Checks the structural invariants: C >= 2, unique non-empty names.
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config(format!(
                "taxonomy `{}` needs at least 2 classes, got {}",
                self.name,
                self.classes.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for class in &self.classes {
            if class.trim().is_empty() {
                return Err(Error::Config(format!(
                    "taxonomy `{}` contains an empty class name",
                    self.name
                )));
            }
            if !seen.insert(class.as_str()) {
                return Err(Error::Config(format!(
                    "taxonomy `{}` contains duplicate class `{}`",
                    self.name, class
                )));
            }
        }
        Ok(())
    }

    /// Loads a taxonomy from a JSON config `{"name": str, "classes": [str,...]}`.
    pub fn from_json(json: &str) -> Result<Self> {
        let tax: RelationTaxonomy = serde_json::from_str(json)?;
        tax.validate()?;
        Ok(tax)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pisc_coarse_matches_published_classes() {
        let tax = builtin_taxonomy("pisc-coarse").unwrap();
        assert_eq!(tax.classes, ["intimate", "non-intimate", "no-relation"]);
        assert_eq!(tax.len(), 3);
    }

    #[test]
    fn pisc_fine_matches_published_classes() {
        let tax = builtin_taxonomy("pisc-fine").unwrap();
        assert_eq!(
            tax.classes,
            [
                "friend",
                "family",
                "couple",
                "professional",
                "commercial",
                "no-relation"
            ]
        );
        assert_eq!(tax.len(), 6);
    }

    #[test]
    fn pipa_sizes() {
        assert_eq!(builtin_taxonomy("pipa-fine").unwrap().len(), 16);
        assert_eq!(builtin_taxonomy("pipa-coarse").unwrap().len(), 5);
    }

    #[test]
    fn unknown_name_lists_options() {
        let err = builtin_taxonomy("pisc-medium").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pisc-medium"));
        for name in BUILTIN_NAMES {
            assert!(msg.contains(name), "missing option {name} in {msg}");
        }
    }

    #[test]
    fn builtin_is_deterministic() {
        assert_eq!(
            builtin_taxonomy("pipa-fine").unwrap(),
            builtin_taxonomy("pipa-fine").unwrap()
        );
    }

    #[test]
    fn rejects_duplicates_and_empties() {
        assert!(RelationTaxonomy::new("t", vec!["a".into(), "a".into()]).is_err());
        assert!(RelationTaxonomy::new("t", vec!["a".into(), " ".into()]).is_err());
        assert!(RelationTaxonomy::new("t", vec!["a".into()]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let tax = builtin_taxonomy("pisc-fine").unwrap();
        let json = serde_json::to_string(&tax).unwrap();
        assert_eq!(RelationTaxonomy::from_json(&json).unwrap(), tax);
    }
}
