//! Two-level coarse/fine class hierarchy.
//!
//! The on-disk form is a JSON array of coarse entries, each carrying a `name`
//! and an ordered `fine` list of class names. Indices follow file order.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GASTRIC_JSON: &str = include_str!("../fixtures/gastric_taxonomy.json");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    coarse_names: Vec<String>,
    fine_names: Vec<String>,
    fine_to_coarse: Vec<usize>,
    children: Vec<Vec<usize>>,
}

/// One coarse entry as it appears in a hierarchy file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCoarse {
    pub name: String,
    pub fine: Vec<serde_json::Value>,
}

/// Top-level element of a hierarchy file. A bare string is a fine class
/// without a parent and is rejected by [`Taxonomy::validate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawEntry {
    Coarse(RawCoarse),
    Orphan(String),
}

impl Taxonomy {
    /// Builds a taxonomy from explicit index maps.
    pub fn new(
        coarse_names: Vec<String>,
        fine_names: Vec<String>,
        fine_to_coarse: Vec<usize>,
    ) -> Result<Self> {
        if coarse_names.is_empty() {
            return Err(Error::EmptyTaxonomy("no coarse classes"));
        }
        if fine_to_coarse.len() != fine_names.len() {
            return Err(Error::DimensionMismatch {
                context: "fine_to_coarse",
                expected: fine_names.len(),
                got: fine_to_coarse.len(),
            });
        }
        let mut seen = HashSet::new();
        for name in &coarse_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        let mut seen = HashSet::new();
        for name in &fine_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        let mut children = vec![Vec::new(); coarse_names.len()];
        for (fine, &coarse) in fine_to_coarse.iter().enumerate() {
            if coarse >= coarse_names.len() {
                return Err(Error::OrphanFine(fine_names[fine].clone()));
            }
            children[coarse].push(fine);
        }
        if let Some(empty) = children.iter().position(Vec::is_empty) {
            return Err(Error::EmptyCoarse(coarse_names[empty].clone()));
        }
        Ok(Self {
            coarse_names,
            fine_names,
            fine_to_coarse,
            children,
        })
    }

    /// Validates a parsed hierarchy description.
    pub fn validate(raw: &[RawEntry]) -> Result<Self> {
        let mut coarse_names = Vec::new();
        let mut fine_names = Vec::new();
        let mut fine_to_coarse = Vec::new();
        for entry in raw {
            let coarse = match entry {
                RawEntry::Orphan(name) => return Err(Error::OrphanFine(name.clone())),
                RawEntry::Coarse(c) => c,
            };
            let idx = coarse_names.len();
            coarse_names.push(coarse.name.clone());
            for fine in &coarse.fine {
                match fine {
                    serde_json::Value::String(name) => {
                        fine_names.push(name.clone());
                        fine_to_coarse.push(idx);
                    }
                    _ => return Err(Error::TooDeep(coarse.name.clone())),
                }
            }
        }
        Self::new(coarse_names, fine_names, fine_to_coarse)
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, TaxonomyParseError> {
        let raw: Vec<RawEntry> = serde_json::from_str(text).map_err(TaxonomyParseError::Json)?;
        Self::validate(&raw).map_err(TaxonomyParseError::Invalid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            TaxonomyParseError::Json(source) => Error::json(path, source),
            TaxonomyParseError::Invalid(err) => err,
        })
    }

    /// The 4-coarse / 14-fine gastric biopsy hierarchy.
    pub fn gastric() -> Self {
        Self::from_json_str(GASTRIC_JSON).expect("bundled taxonomy is valid")
    }

    pub fn to_raw(&self) -> Vec<RawEntry> {
        self.coarse_names
            .iter()
            .zip(&self.children)
            .map(|(name, kids)| {
                RawEntry::Coarse(RawCoarse {
                    name: name.clone(),
                    fine: kids
                        .iter()
                        .map(|&f| serde_json::Value::String(self.fine_names[f].clone()))
                        .collect(),
                })
            })
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_raw()).expect("taxonomy serializes")
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn n_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn coarse_names(&self) -> &[String] {
        &self.coarse_names
    }

    pub fn fine_names(&self) -> &[String] {
        &self.fine_names
    }

    pub fn coarse_index(&self, name: &str) -> Option<usize> {
        self.coarse_names.iter().position(|n| n == name)
    }

    pub fn fine_index(&self, name: &str) -> Option<usize> {
        self.fine_names.iter().position(|n| n == name)
    }

    fn check_fine(&self, fine: usize) -> Result<()> {
        if fine >= self.n_fine() {
            return Err(Error::IndexOutOfRange {
                what: "fine class",
                index: fine,
                len: self.n_fine(),
            });
        }
        Ok(())
    }

    pub fn group_of(&self, fine: usize) -> Result<usize> {
        self.check_fine(fine)?;
        Ok(self.fine_to_coarse[fine])
    }

    /// Fine classes under `coarse`, in index order.
    pub fn children_of(&self, coarse: usize) -> Result<&[usize]> {
        self.children
            .get(coarse)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                what: "coarse class",
                index: coarse,
                len: self.n_coarse(),
            })
    }

    /// Fine classes sharing the parent of `fine`, including `fine` itself.
    pub fn siblings_of(&self, fine: usize) -> Result<&[usize]> {
        self.check_fine(fine)?;
        Ok(&self.children[self.fine_to_coarse[fine]])
    }

    /// Fine classes under any other coarse parent.
    pub fn complement_of(&self, fine: usize) -> Result<Vec<usize>> {
        let group = self.group_of(fine)?;
        Ok((0..self.n_fine())
            .filter(|&g| self.fine_to_coarse[g] != group)
            .collect())
    }

    pub fn is_consistent(&self, coarse: usize, fine: usize) -> bool {
        self.fine_to_coarse.get(fine) == Some(&coarse)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyParseError {
    #[error("malformed hierarchy JSON: {0}")]
    Json(serde_json::Error),
    #[error(transparent)]
    Invalid(Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> Taxonomy {
        Taxonomy::new(vec!["only".into()], vec!["child".into()], vec![0]).unwrap()
    }

    #[test]
    fn gastric_shape() {
        let t = Taxonomy::gastric();
        assert_eq!(t.n_coarse(), 4);
        assert_eq!(t.n_fine(), 14);
        let tub = t.fine_index("Tubular adenocarcinoma").unwrap();
        assert_eq!(t.group_of(tub).unwrap(), t.coarse_index("Cancer").unwrap());
        let cg = t.fine_index("Chronic gastritis").unwrap();
        assert_eq!(t.group_of(cg).unwrap(), t.coarse_index("Gastritis").unwrap());
    }

    #[test]
    fn erosion_siblings() {
        let t = Taxonomy::gastric();
        let erosion = t.fine_index("Erosion").unwrap();
        let names: Vec<&str> = t
            .siblings_of(erosion)
            .unwrap()
            .iter()
            .map(|&i| t.fine_names()[i].as_str())
            .collect();
        assert_eq!(
            names,
            ["Chronic active gastritis", "Chronic gastritis", "Erosion", "Ulceration"]
        );
        assert_eq!(t.complement_of(erosion).unwrap().len(), 10);
    }

    #[test]
    fn partition_over_all_gastric_classes() {
        let t = Taxonomy::gastric();
        for f in 0..t.n_fine() {
            let sib: HashSet<usize> = t.siblings_of(f).unwrap().iter().copied().collect();
            let comp: HashSet<usize> = t.complement_of(f).unwrap().into_iter().collect();
            assert!(sib.contains(&f));
            assert!(sib.is_disjoint(&comp));
            let all: HashSet<usize> = sib.union(&comp).copied().collect();
            assert_eq!(all, (0..t.n_fine()).collect());
            for g in 0..t.n_fine() {
                assert_eq!(
                    sib.contains(&g),
                    t.group_of(f).unwrap() == t.group_of(g).unwrap()
                );
            }
        }
    }

    #[test]
    fn minimal_hierarchy() {
        let t = single();
        assert_eq!((t.n_coarse(), t.n_fine()), (1, 1));
        assert_eq!(t.group_of(0).unwrap(), 0);
        assert_eq!(t.siblings_of(0).unwrap(), &[0]);
        assert!(t.complement_of(0).unwrap().is_empty());
    }

    #[test]
    fn fine_under_two_parents_is_duplicate() {
        let text = r#"[{"name":"A","fine":["x","y"]},{"name":"B","fine":["x"]}]"#;
        match Taxonomy::from_json_str(text) {
            Err(TaxonomyParseError::Invalid(Error::DuplicateName(n))) => assert_eq!(n, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structural_errors_name_the_offender() {
        let empty = r#"[{"name":"A","fine":["x"]},{"name":"B","fine":[]}]"#;
        assert!(matches!(
            Taxonomy::from_json_str(empty),
            Err(TaxonomyParseError::Invalid(Error::EmptyCoarse(n))) if n == "B"
        ));
        let orphan = r#"[{"name":"A","fine":["x"]},"stray"]"#;
        assert!(matches!(
            Taxonomy::from_json_str(orphan),
            Err(TaxonomyParseError::Invalid(Error::OrphanFine(n))) if n == "stray"
        ));
        let deep = r#"[{"name":"A","fine":[{"name":"x","fine":["y"]}]}]"#;
        assert!(matches!(
            Taxonomy::from_json_str(deep),
            Err(TaxonomyParseError::Invalid(Error::TooDeep(n))) if n == "A"
        ));
        let unknown = r#"[{"name":"A","fine":["x"],"extra":1}]"#;
        assert!(Taxonomy::from_json_str(unknown).is_err());
        assert!(matches!(
            Taxonomy::new(vec!["A".into()], vec!["x".into()], vec![3]),
            Err(Error::OrphanFine(n)) if n == "x"
        ));
    }

    #[test]
    fn out_of_range_queries() {
        let t = single();
        assert!(t.group_of(1).is_err());
        assert!(t.siblings_of(5).is_err());
        assert!(t.complement_of(1).is_err());
    }

    #[test]
    fn json_round_trip_keeps_order() {
        let t = Taxonomy::gastric();
        let back = Taxonomy::from_json_str(&t.to_json_string()).unwrap();
        assert_eq!(t, back);
    }
}
