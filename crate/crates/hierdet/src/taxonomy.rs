//! Two-level category hierarchy: fine-grained categories grouped into
//! coarse-grained superclasses.
//!
//! Label index 0 is background in both label spaces; categories start at
//! index 1. A taxonomy is immutable after construction and all operations
//! are pure; override rules produce a new taxonomy.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

/// Reserved label index for background in both label spaces.
pub const BACKGROUND: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("duplicate fine category: {0}")]
    DuplicateFine(String),
    #[error("duplicate superclass: {0}")]
    DuplicateCoarse(String),
    #[error("empty superclass: {0}")]
    EmptySuperclass(String),
    #[error("taxonomy has no categories")]
    Empty,
    #[error("fine label {0} out of range (1..={1})")]
    FineOutOfRange(usize, usize),
    #[error("coarse label {0} out of range (1..={1})")]
    CoarseOutOfRange(usize, usize),
    #[error("background label passed where a category label is required")]
    BackgroundLabel,
    #[error("override source does not resolve: {superclass} -> {fine}")]
    UnresolvedSource { superclass: String, fine: String },
    #[error("override rule has no sources (target {0})")]
    EmptySources(String),
    #[error("unknown fine category name: {0}")]
    UnknownFineName(String),
}

#[derive(Debug, Error)]
pub enum TaxonomyIoError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// How an [`OverrideRule`] reassigns categories. `Merge` collects categories
/// from several groups into one superclass; `Move` relocates categories into
/// an existing or new superclass. The mechanics are identical; the kinds
/// document intent in taxonomy files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverrideKind {
    Merge,
    Move,
}

/// Reassigns the fine categories named by `sources` (as
/// `(superclass, fine)` paths) to the `target` superclass, which is created
/// when absent. Rules apply in order; later rules see earlier results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideRule {
    pub kind: OverrideKind,
    pub sources: Vec<(String, String)>,
    pub target: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SuperclassEntry {
    name: String,
    members: Vec<String>,
}

/// On-disk taxonomy document: superclass groups plus optional override
/// rules, applied in file order on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaxonomyDoc {
    superclasses: Vec<SuperclassEntry>,
    #[serde(default)]
    overrides: Vec<OverrideRule>,
}

/// Validated two-level hierarchy. Fine label `i` (1-based) is
/// `fine_names[i-1]`; likewise for coarse labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyDoc", into = "TaxonomyDoc")]
pub struct Taxonomy {
    fine_names: Vec<String>,
    coarse_names: Vec<String>,
    /// Coarse label (1-based) of each fine category, indexed by fine label - 1.
    fine_to_coarse: Vec<usize>,
}

impl TryFrom<TaxonomyDoc> for Taxonomy {
    type Error = TaxonomyError;

    fn try_from(doc: TaxonomyDoc) -> Result<Self, Self::Error> {
        let groups: Vec<(String, Vec<String>)> = doc
            .superclasses
            .into_iter()
            .map(|e| (e.name, e.members))
            .collect();
        let base = Taxonomy::from_groups(&groups)?;
        base.apply_overrides(&doc.overrides)
    }
}

impl From<Taxonomy> for TaxonomyDoc {
    fn from(t: Taxonomy) -> Self {
        let superclasses = (1..=t.num_coarse())
            .map(|c| SuperclassEntry {
                name: t.coarse_names[c - 1].clone(),
                members: t
                    .coarse_members(c)
                    .expect("valid coarse label")
                    .into_iter()
                    .map(|f| t.fine_names[f - 1].clone())
                    .collect(),
            })
            .collect();
        TaxonomyDoc {
            superclasses,
            overrides: Vec::new(),
        }
    }
}

impl Taxonomy {
    /// Build from `(superclass, members)` groups, preserving file order as
    /// index order: coarse labels follow group order, fine labels follow
    /// member order across groups.
    pub fn from_groups(groups: &[(String, Vec<String>)]) -> Result<Self, TaxonomyError> {
        let mut fine_names: Vec<String> = Vec::new();
        let mut coarse_names: Vec<String> = Vec::new();
        let mut fine_to_coarse: Vec<usize> = Vec::new();
        for (coarse, members) in groups {
            if coarse_names.contains(coarse) {
                return Err(TaxonomyError::DuplicateCoarse(coarse.clone()));
            }
            if members.is_empty() {
                return Err(TaxonomyError::EmptySuperclass(coarse.clone()));
            }
            coarse_names.push(coarse.clone());
            let coarse_label = coarse_names.len();
            for fine in members {
                if fine_names.contains(fine) {
                    return Err(TaxonomyError::DuplicateFine(fine.clone()));
                }
                fine_names.push(fine.clone());
                fine_to_coarse.push(coarse_label);
            }
        }
        if fine_names.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        Ok(Self {
            fine_names,
            coarse_names,
            fine_to_coarse,
        })
    }

    /// One singleton superclass per fine category, with the same names.
    pub fn identity(fine_names: &[String]) -> Result<Self, TaxonomyError> {
        let groups: Vec<(String, Vec<String>)> = fine_names
            .iter()
            .map(|n| (n.clone(), vec![n.clone()]))
            .collect();
        Self::from_groups(&groups)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyIoError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyIoError::Read {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| TaxonomyIoError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TaxonomyIoError> {
        let text = serde_json::to_string_pretty(self).expect("taxonomy serializes");
        std::fs::write(path, text).map_err(|source| TaxonomyIoError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn num_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    /// Fine-level vocabulary size including background.
    pub fn fine_vocab(&self) -> usize {
        self.num_fine() + 1
    }

    /// Coarse-level vocabulary size including background.
    pub fn coarse_vocab(&self) -> usize {
        self.num_coarse() + 1
    }

    /// Category names in fine-label order (label = position + 1).
    pub fn fine_names(&self) -> &[String] {
        &self.fine_names
    }

    pub fn coarse_names(&self) -> &[String] {
        &self.coarse_names
    }

    pub fn fine_name(&self, label: usize) -> Result<&str, TaxonomyError> {
        self.check_fine(label)?;
        Ok(&self.fine_names[label - 1])
    }

    pub fn coarse_name(&self, label: usize) -> Result<&str, TaxonomyError> {
        self.check_coarse(label)?;
        Ok(&self.coarse_names[label - 1])
    }

    pub fn fine_label(&self, name: &str) -> Option<usize> {
        self.fine_names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn coarse_label(&self, name: &str) -> Option<usize> {
        self.coarse_names
            .iter()
            .position(|n| n == name)
            .map(|i| i + 1)
    }

    fn check_fine(&self, label: usize) -> Result<(), TaxonomyError> {
        if label == BACKGROUND {
            return Err(TaxonomyError::BackgroundLabel);
        }
        if label > self.num_fine() {
            return Err(TaxonomyError::FineOutOfRange(label, self.num_fine()));
        }
        Ok(())
    }

    fn check_coarse(&self, label: usize) -> Result<(), TaxonomyError> {
        if label == BACKGROUND {
            return Err(TaxonomyError::BackgroundLabel);
        }
        if label > self.num_coarse() {
            return Err(TaxonomyError::CoarseOutOfRange(label, self.num_coarse()));
        }
        Ok(())
    }

    /// Superclass label of a fine category label.
    pub fn fine_to_coarse(&self, fine: usize) -> Result<usize, TaxonomyError> {
        self.check_fine(fine)?;
        Ok(self.fine_to_coarse[fine - 1])
    }

    /// All fine category labels mapping to a superclass label.
    pub fn coarse_members(&self, coarse: usize) -> Result<Vec<usize>, TaxonomyError> {
        self.check_coarse(coarse)?;
        Ok(self
            .fine_to_coarse
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == coarse)
            .map(|(i, _)| i + 1)
            .collect())
    }

    /// Apply override rules in order, returning a new validated taxonomy.
    /// Superclasses emptied by a rule are dropped. The fine category set is
    /// preserved exactly.
    pub fn apply_overrides(&self, rules: &[OverrideRule]) -> Result<Self, TaxonomyError> {
        // Working state: ordered (superclass, members) groups.
        let mut groups: Vec<(String, Vec<String>)> = (1..=self.num_coarse())
            .map(|c| {
                (
                    self.coarse_names[c - 1].clone(),
                    self.coarse_members(c)
                        .expect("valid coarse label")
                        .into_iter()
                        .map(|f| self.fine_names[f - 1].clone())
                        .collect(),
                )
            })
            .collect();

        for rule in rules {
            if rule.sources.is_empty() {
                return Err(TaxonomyError::EmptySources(rule.target.clone()));
            }
            for (sc, fine) in &rule.sources {
                let group = groups.iter_mut().find(|(name, _)| name == sc).ok_or_else(|| {
                    TaxonomyError::UnresolvedSource {
                        superclass: sc.clone(),
                        fine: fine.clone(),
                    }
                })?;
                let pos = group.1.iter().position(|m| m == fine).ok_or_else(|| {
                    TaxonomyError::UnresolvedSource {
                        superclass: sc.clone(),
                        fine: fine.clone(),
                    }
                })?;
                let name = group.1.remove(pos);
                match groups.iter_mut().find(|(n, _)| n == &rule.target) {
                    Some(target) => target.1.push(name),
                    None => groups.push((rule.target.clone(), vec![name])),
                }
            }
            groups.retain(|(_, members)| !members.is_empty());
        }

        Self::from_groups(&groups)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const DEEPFASHION2_JSON: &str = include_str!("../fixtures/deepfashion2.json");
    pub const HEADWEAR_DEMO_JSON: &str = include_str!("../fixtures/headwear_demo.json");

    fn deepfashion2() -> Taxonomy {
        serde_json::from_str(DEEPFASHION2_JSON).unwrap()
    }

    #[test]
    fn deepfashion2_fixture_shape() {
        let t = deepfashion2();
        assert_eq!(t.num_fine(), 13);
        assert_eq!(t.num_coarse(), 3);
        assert_eq!(t.coarse_names(), &["top", "bottom", "one-piece dress"]);
    }

    #[test]
    fn minimal_taxonomy() {
        let t = Taxonomy::from_groups(&[("all".into(), vec!["thing".into()])]).unwrap();
        assert_eq!(t.num_fine(), 1);
        assert_eq!(t.num_coarse(), 1);
        assert_eq!(t.coarse_members(1).unwrap(), vec![1]);
    }

    #[test]
    fn duplicate_fine_rejected_with_name() {
        let doc = r#"{"superclasses":[
            {"name":"top","members":["sling dress"]},
            {"name":"one-piece dress","members":["sling dress"]}]}"#;
        let err = serde_json::from_str::<Taxonomy>(doc).unwrap_err();
        assert!(err.to_string().contains("sling dress"), "{err}");
    }

    #[test]
    fn empty_superclass_rejected() {
        let err = Taxonomy::from_groups(&[("top".into(), vec![])]).unwrap_err();
        assert_eq!(err, TaxonomyError::EmptySuperclass("top".into()));
    }

    #[test]
    fn fine_to_coarse_examples() {
        let t = deepfashion2();
        let vest_dress = t.fine_label("vest dress").unwrap();
        let coarse = t.fine_to_coarse(vest_dress).unwrap();
        assert_eq!(t.coarse_name(coarse).unwrap(), "one-piece dress");

        let trousers = t.fine_label("trousers").unwrap();
        let coarse = t.fine_to_coarse(trousers).unwrap();
        assert_eq!(t.coarse_name(coarse).unwrap(), "bottom");
    }

    #[test]
    fn fine_to_coarse_rejects_background_and_out_of_range() {
        let t = deepfashion2();
        assert_eq!(t.fine_to_coarse(0), Err(TaxonomyError::BackgroundLabel));
        assert_eq!(
            t.fine_to_coarse(14),
            Err(TaxonomyError::FineOutOfRange(14, 13))
        );
    }

    #[test]
    fn coarse_members_dress_group() {
        let t = deepfashion2();
        let dress = t.coarse_label("one-piece dress").unwrap();
        let names: Vec<&str> = t
            .coarse_members(dress)
            .unwrap()
            .into_iter()
            .map(|f| t.fine_name(f).unwrap())
            .collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        assert_eq!(
            sorted,
            vec![
                "long sleeve dress",
                "short sleeve dress",
                "sling dress",
                "vest dress"
            ]
        );
    }

    #[test]
    fn coarse_members_partition_fine_set() {
        let t = deepfashion2();
        let mut all: Vec<usize> = Vec::new();
        for c in 1..=t.num_coarse() {
            all.extend(t.coarse_members(c).unwrap());
        }
        all.sort_unstable();
        assert_eq!(all, (1..=t.num_fine()).collect::<Vec<_>>());
    }

    #[test]
    fn identity_taxonomy() {
        let t = Taxonomy::identity(&["a".into(), "b".into()]).unwrap();
        assert_eq!(t.num_coarse(), 2);
        assert_eq!(t.fine_to_coarse(1).unwrap(), 1);
        assert_eq!(t.fine_to_coarse(2).unwrap(), 2);
        assert_eq!(t.coarse_members(2).unwrap(), vec![2]);
    }

    #[test]
    fn identity_of_empty_rejected() {
        assert_eq!(Taxonomy::identity(&[]), Err(TaxonomyError::Empty));
    }

    #[test]
    fn identity_of_deepfashion2_names() {
        let t = deepfashion2();
        let id = Taxonomy::identity(t.fine_names()).unwrap();
        assert_eq!(id.num_coarse(), 13);
        for f in 1..=13 {
            assert_eq!(id.fine_to_coarse(f).unwrap(), f);
        }
    }

    #[test]
    fn merge_override_maps_all_sources_to_target() {
        let t = Taxonomy::from_groups(&[
            ("protective".into(), vec!["helmet".into()]),
            ("headgear".into(), vec!["hat".into()]),
            (
                "fashion accessory".into(),
                vec!["fashion hat".into(), "necklace".into()],
            ),
        ])
        .unwrap();
        let rule = OverrideRule {
            kind: OverrideKind::Merge,
            sources: vec![
                ("protective".into(), "helmet".into()),
                ("headgear".into(), "hat".into()),
                ("fashion accessory".into(), "fashion hat".into()),
            ],
            target: "headwear".into(),
        };
        let out = t.apply_overrides(&[rule]).unwrap();
        let headwear = out.coarse_label("headwear").unwrap();
        for name in ["helmet", "hat", "fashion hat"] {
            let f = out.fine_label(name).unwrap();
            assert_eq!(out.fine_to_coarse(f).unwrap(), headwear, "{name}");
        }
        // Emptied groups are dropped; necklace keeps its group.
        assert!(out.coarse_label("protective").is_none());
        assert!(out.coarse_label("headgear").is_none());
        let necklace = out.fine_label("necklace").unwrap();
        assert_eq!(
            out.coarse_name(out.fine_to_coarse(necklace).unwrap()).unwrap(),
            "fashion accessory"
        );
    }

    #[test]
    fn empty_rule_list_is_identity() {
        let t = deepfashion2();
        assert_eq!(t.apply_overrides(&[]).unwrap(), t);
    }

    #[test]
    fn move_jeans_into_bottom() {
        let t = Taxonomy::from_groups(&[
            ("bottom".into(), vec!["shorts".into()]),
            ("trousers".into(), vec!["jeans".into(), "sweatpants".into()]),
        ])
        .unwrap();
        let rule = OverrideRule {
            kind: OverrideKind::Move,
            sources: vec![("trousers".into(), "jeans".into())],
            target: "bottom".into(),
        };
        let out = t.apply_overrides(&[rule]).unwrap();
        let bottom = out.coarse_label("bottom").unwrap();
        let members: Vec<&str> = out
            .coarse_members(bottom)
            .unwrap()
            .into_iter()
            .map(|f| out.fine_name(f).unwrap())
            .collect();
        assert!(members.contains(&"jeans"));
        assert!(members.contains(&"shorts"));
    }

    #[test]
    fn unresolved_source_errors() {
        let t = deepfashion2();
        let rule = OverrideRule {
            kind: OverrideKind::Move,
            sources: vec![("top".into(), "jeans".into())],
            target: "bottom".into(),
        };
        assert!(matches!(
            t.apply_overrides(&[rule]),
            Err(TaxonomyError::UnresolvedSource { .. })
        ));
    }

    #[test]
    fn overrides_preserve_fine_set() {
        let t: Taxonomy = serde_json::from_str(HEADWEAR_DEMO_JSON).unwrap();
        let doc: TaxonomyDoc = serde_json::from_str(HEADWEAR_DEMO_JSON).unwrap();
        let base = Taxonomy::from_groups(
            &doc.superclasses
                .iter()
                .map(|e| (e.name.clone(), e.members.clone()))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut before: Vec<&String> = base.fine_names().iter().collect();
        let mut after: Vec<&String> = t.fine_names().iter().collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
    }

    #[test]
    fn headwear_demo_reproduces_merges() {
        let t: Taxonomy = serde_json::from_str(HEADWEAR_DEMO_JSON).unwrap();
        let by_group = |group: &str| -> Vec<String> {
            let c = t.coarse_label(group).unwrap();
            let mut names: Vec<String> = t
                .coarse_members(c)
                .unwrap()
                .into_iter()
                .map(|f| t.fine_name(f).unwrap().to_string())
                .collect();
            names.sort_unstable();
            names
        };
        assert_eq!(
            by_group("headwear"),
            vec![
                "bicycle helmet",
                "cowboy hat",
                "fedora",
                "football helmet",
                "hat",
                "sombrero",
                "sun hat"
            ]
        );
        assert_eq!(by_group("neckwear"), vec!["necklace", "scarf", "tie"]);
        assert_eq!(by_group("bottom"), vec!["jeans", "miniskirt", "shorts"]);
    }

    #[test]
    fn save_load_roundtrip() {
        let t = deepfashion2();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tax.json");
        t.save(&path).unwrap();
        let back = Taxonomy::load(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn membership_consistency_property() {
        let t: Taxonomy = serde_json::from_str(HEADWEAR_DEMO_JSON).unwrap();
        for f in 1..=t.num_fine() {
            let c = t.fine_to_coarse(f).unwrap();
            assert!(t.coarse_members(c).unwrap().contains(&f));
        }
        for c in 1..=t.num_coarse() {
            for f in t.coarse_members(c).unwrap() {
                assert_eq!(t.fine_to_coarse(f).unwrap(), c);
            }
        }
    }
}
