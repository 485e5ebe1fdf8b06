//! Dataset loading from a TOML manifest.
//!
//! ```toml
//! [[case]]
//! id = "2018-19830"
//! source = "contracts/2018-19830.sol"   # relative to the manifest directory
//!
//! [case.label]
//! function_name = "UBSexToken"
//! aliases = ["constructor typo", "unexpected behaviour"]
//! description = "..."
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::types::{ContractCase, GroundTruthLabel};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read manifest {path}: {source}")]
    ManifestIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("case {case_id:?} (entry {entry}): cannot read source {path}: {source}")]
    SourceIo {
        case_id: String,
        entry: usize,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("case {case_id:?} (entry {entry}): {message}")]
    InvalidEntry {
        case_id: String,
        entry: usize,
        message: String,
    },
    #[error("duplicate case_id {case_id:?} at entry {entry}")]
    DuplicateId { case_id: String, entry: usize },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    #[serde(default, rename = "case")]
    cases: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    source: PathBuf,
    label: Option<LabelRecord>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    function_name: String,
    aliases: Vec<String>,
    #[serde(default)]
    description: String,
}

/// A parsed manifest whose source paths are resolved against `root`.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<(String, PathBuf, Option<GroundTruthLabel>)>,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>, origin: &Path) -> Result<Self, IngestError> {
        let file: ManifestFile = toml::from_str(text).map_err(|e| IngestError::Malformed {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let root = root.into();
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(file.cases.len());
        for (idx, entry) in file.cases.into_iter().enumerate() {
            let case_id = entry.id.trim().to_string();
            if case_id.is_empty() {
                return Err(IngestError::InvalidEntry {
                    case_id,
                    entry: idx,
                    message: "case id must be non-empty".into(),
                });
            }
            if !seen.insert(case_id.clone()) {
                return Err(IngestError::DuplicateId { case_id, entry: idx });
            }
            let label = match entry.label {
                Some(l) => Some(
                    GroundTruthLabel::new(l.function_name, &l.aliases, l.description).map_err(|message| {
                        IngestError::InvalidEntry {
                            case_id: case_id.clone(),
                            entry: idx,
                            message,
                        }
                    })?,
                ),
                None => None,
            };
            entries.push((case_id, root.join(entry.source), label));
        }
        Ok(Self { root, entries })
    }
}

/// Loads every case listed in the manifest, in manifest order.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<ContractCase>, IngestError> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|source| IngestError::ManifestIo {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::parse(&text, root, manifest_path)?;

    let mut cases = Vec::with_capacity(manifest.entries.len());
    for (idx, (case_id, path, label)) in manifest.entries.into_iter().enumerate() {
        let source = fs::read_to_string(&path).map_err(|source| IngestError::SourceIo {
            case_id: case_id.clone(),
            entry: idx,
            path: path.clone(),
            source,
        })?;
        if source.trim().is_empty() {
            return Err(IngestError::InvalidEntry {
                case_id,
                entry: idx,
                message: format!("source {} is empty", path.display()),
            });
        }
        cases.push(ContractCase { case_id, source, label });
    }
    Ok(cases)
}

/// Upper-bound token estimate: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn loads_cases_in_order_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.sol", "contract A {}");
        write(dir.path(), "b.sol", "contract B {}");
        let manifest = write(
            dir.path(),
            "m.toml",
            r#"
[[case]]
id = "b"
source = "b.sol"

[[case]]
id = "a"
source = "a.sol"
[case.label]
function_name = "f"
aliases = ["Integer Overflow"]
description = "d"
"#,
        );
        let cases = load_dataset(&manifest).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].case_id, "b");
        assert!(cases[0].label.is_none());
        assert_eq!(cases[1].source, "contract A {}");
        let label = cases[1].label.as_ref().unwrap();
        assert!(label.vulnerability_aliases.contains("integer overflow"));
        assert_eq!(load_dataset(&manifest).unwrap(), cases);
    }

    #[test]
    fn empty_manifest_yields_no_cases() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write(dir.path(), "m.toml", "");
        assert!(load_dataset(&manifest).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.sol", "contract A {}");
        let manifest = write(
            dir.path(),
            "m.toml",
            "[[case]]\nid = \"2018-19830\"\nsource = \"a.sol\"\n[[case]]\nid = \"2018-19830\"\nsource = \"a.sol\"\n",
        );
        let err = load_dataset(&manifest).unwrap_err();
        assert!(matches!(err, IngestError::DuplicateId { ref case_id, entry: 1 } if case_id == "2018-19830"));
        assert!(err.to_string().contains("2018-19830"));
    }

    #[test]
    fn missing_source_and_manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write(dir.path(), "m.toml", "[[case]]\nid = \"x\"\nsource = \"nope.sol\"\n");
        assert!(matches!(
            load_dataset(&manifest).unwrap_err(),
            IngestError::SourceIo { entry: 0, .. }
        ));
        assert!(matches!(
            load_dataset(dir.path().join("absent.toml")).unwrap_err(),
            IngestError::ManifestIo { .. }
        ));
        let bad = write(dir.path(), "bad.toml", "[[case]]\nid = 3\n");
        assert!(matches!(load_dataset(&bad).unwrap_err(), IngestError::Malformed { .. }));
    }

    #[test]
    fn token_estimate_examples() {
        assert_eq!(estimate_tokens(""), 0);
        let contract = "x".repeat(400);
        assert_eq!(estimate_tokens(&contract), 100);
        assert_eq!(estimate_tokens("abcde"), 2);
    }

    proptest! {
        #[test]
        fn token_estimate_is_monotone_and_subadditive(a in ".{0,200}", b in ".{0,200}") {
            let joined = format!("{a}{b}");
            let whole = estimate_tokens(&joined);
            prop_assert!(whole >= estimate_tokens(&a));
            prop_assert!(whole <= estimate_tokens(&a) + estimate_tokens(&b) + 1);
            // oracle: ceil(chars / 4)
            prop_assert_eq!(whole, joined.chars().count().div_ceil(4));
        }
    }
}
