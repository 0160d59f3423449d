//! Run manifest: where the session files, attribute table and embeddings
//! live. Relative paths are resolved against the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeTable, SemanticEmbeddings};
use crate::error::{Error, Result};
use crate::session::pipeline::{Benchmark, KnowledgeInputs};
use crate::session::FeatureSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub base: String,
    pub sessions: Vec<String>,
    pub attributes: String,
    pub semantic: String,
    /// Optional held-out set covering any seen classes; rows are matched
    /// to classes by name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
}

impl Manifest {
    pub fn from_json(bytes: &[u8], source_name: &str) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, &path.display().to_string())
    }
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Loads every file named by the manifest at `path`.
pub fn load_benchmark(path: &Path) -> Result<Benchmark> {
    let manifest = Manifest::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let base = FeatureSet::load(&resolve(dir, &manifest.base))?;
    let sessions = manifest
        .sessions
        .iter()
        .map(|s| FeatureSet::load(&resolve(dir, s)))
        .collect::<Result<Vec<_>>>()?;
    let table = AttributeTable::load(&resolve(dir, &manifest.attributes))?;
    let embeddings = SemanticEmbeddings::load(&resolve(dir, &manifest.semantic))?;

    let test = match &manifest.test {
        None => None,
        Some(p) => {
            let raw = FeatureSet::load(&resolve(dir, p))?;
            Some(relabel_by_name(&raw, &base, &sessions)?)
        }
    };
    Ok(Benchmark {
        base,
        sessions,
        knowledge: KnowledgeInputs { table, embeddings },
        test,
    })
}

/// Maps each row's class name to its global id (base labels first, then
/// each session's local labels shifted past all earlier classes).
fn relabel_by_name(raw: &FeatureSet, base: &FeatureSet, sessions: &[FeatureSet]) -> Result<FeatureSet> {
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut offset = 0;
    for set in std::iter::once(base).chain(sessions) {
        let classes = set.classes();
        for c in &classes {
            ids.insert(set.class_name(*c).unwrap_or_default().to_string(), offset + c);
        }
        offset += classes.len();
    }
    let mut out = FeatureSet::new(raw.dim());
    for i in 0..raw.len() {
        let name = raw.class_name(raw.labels()[i]).unwrap_or_default();
        let id = *ids.get(name).ok_or_else(|| Error::UnknownClass(name.to_string()))?;
        out.push(id, name, raw.sample(i))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_json_round_trip() {
        let m = Manifest {
            base: "b.csv".into(),
            sessions: vec!["s1.csv".into()],
            attributes: "a.json".into(),
            semantic: "s.csv".into(),
            test: None,
        };
        assert_eq!(Manifest::from_json(m.to_json().as_bytes(), "m").unwrap(), m);
        assert!(Manifest::from_json(br#"{"base": "b.csv"}"#, "m").is_err());
    }

    #[test]
    fn test_rows_map_to_global_ids_by_name() {
        let mut base = FeatureSet::new(1);
        base.push(0, "a", &[0.0]).unwrap();
        base.push(1, "b", &[0.0]).unwrap();
        let mut s1 = FeatureSet::new(1);
        s1.push(0, "c", &[0.0]).unwrap();
        let mut raw = FeatureSet::new(1);
        raw.push(0, "c", &[1.0]).unwrap();
        raw.push(1, "a", &[2.0]).unwrap();
        let out = relabel_by_name(&raw, &base, &[s1]).unwrap();
        assert_eq!(out.labels(), &[2, 0]);
        let mut bad = FeatureSet::new(1);
        bad.push(0, "zzz", &[1.0]).unwrap();
        assert!(matches!(relabel_by_name(&bad, &base, &[]), Err(Error::UnknownClass(_))));
    }
}
