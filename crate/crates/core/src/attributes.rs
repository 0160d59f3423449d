//! Semantic knowledge: the base-class attribute pool, word embeddings,
//! visual attribute prototypes and class–attribute associations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::session::FeatureSet;
use crate::tensor::Matrix;

/// Class name → candidate attribute names, as read from the attribute file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttributeTable {
    classes: BTreeMap<String, Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    classes: BTreeMap<String, Vec<String>>,
}

impl AttributeTable {
    pub fn new(classes: BTreeMap<String, Vec<String>>) -> Self {
        Self { classes }
    }

    pub fn from_json(bytes: &[u8], source_name: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        Ok(Self { classes: file.classes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({ "classes": self.classes })).expect("plain map")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn attributes_of(&self, class_name: &str) -> Result<&[String]> {
        self.classes
            .get(class_name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownClass(class_name.to_string()))
    }
}

/// Name → embedding vector, from a `name,s0,...` CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SemanticEmbeddings {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl SemanticEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape(
                "SemanticEmbeddings::insert",
                format!("{} vs {}", v.len(), self.dim),
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite embedding for `{name}`")));
        }
        self.vectors.insert(name.to_string(), v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.vectors
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(name.to_string()))
    }

    pub fn read_csv(bytes: &[u8], source_name: &str) -> Result<Self> {
        let parse = |location: String, message: String| Error::Parse {
            source_name: source_name.to_string(),
            location,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(bytes);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(h) => h.map_err(|e| parse("header".into(), e.to_string()))?,
            None => return Err(parse("byte 0".into(), "empty file".into())),
        };
        let expected = header.len() >= 2
            && &header[0] == "name"
            && header.iter().skip(1).enumerate().all(|(j, h)| h == format!("s{j}"));
        if !expected {
            return Err(Error::Schema {
                source_name: source_name.to_string(),
                message: "header must be `name,s0,...,s{d-1}`".into(),
            });
        }
        let mut out = Self::new(header.len() - 1);
        for rec in records {
            let rec = rec.map_err(|e| parse("record".into(), e.to_string()))?;
            let pos = rec.position().map_or(0, |p| p.byte());
            let at = format!("byte {pos} (line {})", rec.position().map_or(0, |p| p.line()));
            if rec.len() != header.len() {
                return Err(Error::Schema {
                    source_name: source_name.to_string(),
                    message: format!("record at {at} has {} fields, header has {}", rec.len(), header.len()),
                });
            }
            let mut v = Vec::with_capacity(out.dim);
            for field in rec.iter().skip(1) {
                let x: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| parse(at.clone(), format!("`{field}` is not a number")))?;
                v.push(x);
            }
            if out.vectors.contains_key(&rec[0]) {
                return Err(Error::Schema {
                    source_name: source_name.to_string(),
                    message: format!("duplicate embedding for `{}`", &rec[0]),
                });
            }
            out.insert(&rec[0], v).map_err(|e| parse(at.clone(), e.to_string()))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(&bytes, &path.display().to_string())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name");
        for j in 0..self.dim {
            s.push_str(&format!(",s{j}"));
        }
        s.push('\n');
        for (name, v) in &self.vectors {
            s.push_str(name);
            for x in v {
                s.push_str(&format!(",{x:?}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Attributes harvested from the base classes, frozen after the base session.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributePool {
    names: Vec<String>,
    /// `N_a x d_s`
    semantic: Matrix,
    /// `N_a x d_f`
    visual: Matrix,
}

impl AttributePool {
    /// Pools the attributes of every base class (first appearance order,
    /// classes by ascending label) and computes their visual prototypes.
    pub fn build(base: &FeatureSet, table: &AttributeTable, embeddings: &SemanticEmbeddings) -> Result<Self> {
        let names = pool_names(base, table)?;
        let visual = attribute_visual_prototypes(base, table, &names)?;
        let rows = names
            .iter()
            .map(|n| embeddings.get(n).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let semantic = if rows.is_empty() {
            Matrix::zeros(0, embeddings.dim())
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(Self {
            names,
            semantic,
            visual,
        })
    }

    pub fn from_parts(names: Vec<String>, semantic: Matrix, visual: Matrix) -> Result<Self> {
        if semantic.rows() != names.len() || visual.rows() != names.len() {
            return Err(Error::shape(
                "AttributePool::from_parts",
                "row counts differ from name count",
            ));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::InvalidInput("duplicate attribute names".into()));
        }
        Ok(Self {
            names,
            semantic,
            visual,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn semantic(&self) -> &Matrix {
        &self.semantic
    }

    pub fn visual(&self) -> &Matrix {
        &self.visual
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn pool_names(base: &FeatureSet, table: &AttributeTable) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut names = Vec::new();
    for label in base.classes() {
        let class = base.class_name(label).expect("label has a name");
        for a in table.attributes_of(class)? {
            if seen.insert(a.clone()) {
                names.push(a.clone());
            }
        }
    }
    Ok(names)
}

/// `f_a` = mean over every base sample whose class lists attribute `a`
/// (pooled over samples, not averaged over class means). Rows follow `names`.
pub fn attribute_visual_prototypes(base: &FeatureSet, table: &AttributeTable, names: &[String]) -> Result<Matrix> {
    let d = base.dim();
    let mut sums = vec![vec![0.0; d]; names.len()];
    let mut counts = vec![0usize; names.len()];
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut class_attrs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for label in base.classes() {
        let class = base.class_name(label).expect("label has a name");
        let attrs = table.attributes_of(class)?;
        let mut ids: Vec<usize> = attrs.iter().filter_map(|a| index.get(a.as_str()).copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        class_attrs.insert(label, ids);
    }
    for i in 0..base.len() {
        let x = base.sample(i);
        for &a in &class_attrs[&base.labels()[i]] {
            sums[a].iter_mut().zip(x).for_each(|(s, v)| *s += v);
            counts[a] += 1;
        }
    }
    for (a, (sum, n)) in sums.iter_mut().zip(&counts).enumerate() {
        if *n == 0 {
            return Err(Error::EmptyAttribute(names[a].clone()));
        }
        sum.iter_mut().for_each(|s| *s /= *n as f64);
    }
    if sums.is_empty() {
        return Ok(Matrix::zeros(0, d));
    }
    Matrix::from_rows(&sums)
}

/// Binary `N_a x C` table: entry `(i, k)` is 1 when class `k` has pooled
/// attribute `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix {
    r: Matrix,
    class_ids: Vec<usize>,
}

impl AssociationMatrix {
    pub fn new(r: Matrix, class_ids: Vec<usize>) -> Result<Self> {
        if r.cols() != class_ids.len() {
            return Err(Error::shape(
                "AssociationMatrix::new",
                "column count differs from class count",
            ));
        }
        if r.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidInput("association entries must be 0 or 1".into()));
        }
        Ok(Self { r, class_ids })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.r
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    /// Mask column of the `k`-th class (by position).
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.r.column(k)
    }

    /// A class with no pooled attribute cannot be calibrated.
    pub fn is_uncovered(&self, k: usize) -> bool {
        self.column(k).iter().all(|v| *v == 0.0)
    }
}

/// Everything the calibration network reads for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticKnowledge {
    pub pool: AttributePool,
    /// `C x d_s`, rows in the order of `assoc.class_ids()`.
    pub class_semantic: Matrix,
    pub assoc: AssociationMatrix,
}

impl SemanticKnowledge {
    pub fn position(&self, class_id: usize) -> Option<usize> {
        self.assoc.class_ids().iter().position(|c| *c == class_id)
    }
}

/// Assembles the knowledge set for the given `(class_id, class_name)` list
/// against a frozen pool.
pub fn build_knowledge(
    pool: &AttributePool,
    classes: &[(usize, String)],
    embeddings: &SemanticEmbeddings,
    table: &AttributeTable,
) -> Result<SemanticKnowledge> {
    if embeddings.dim() != pool.semantic().cols() {
        return Err(Error::shape(
            "build_knowledge",
            format!(
                "embedding dim {} vs pool dim {}",
                embeddings.dim(),
                pool.semantic().cols()
            ),
        ));
    }
    let mut r = Matrix::zeros(pool.len(), classes.len());
    let mut rows = Vec::with_capacity(classes.len());
    for (k, (_, name)) in classes.iter().enumerate() {
        rows.push(embeddings.get(name)?.to_vec());
        for a in table.attributes_of(name)? {
            if let Some(i) = pool.index_of(a) {
                r.set_unchecked(i, k, 1.0);
            }
        }
    }
    let class_semantic = if rows.is_empty() {
        Matrix::zeros(0, embeddings.dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(SemanticKnowledge {
        pool: pool.clone(),
        class_semantic,
        assoc: AssociationMatrix::new(r, classes.iter().map(|(id, _)| *id).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(&str, &[&str])]) -> AttributeTable {
        AttributeTable::new(
            entries
                .iter()
                .map(|(c, a)| (c.to_string(), a.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
    }

    fn embeddings(names: &[&str], dim: usize) -> SemanticEmbeddings {
        let mut e = SemanticEmbeddings::new(dim);
        for (i, n) in names.iter().enumerate() {
            let mut v = vec![0.0; dim];
            v[i % dim] = 1.0;
            e.insert(n, v).unwrap();
        }
        e
    }

    #[test]
    fn single_entry_table() {
        let t = AttributeTable::from_json(br#"{"classes": {"house_finch": ["beak", "wing"]}}"#, "t").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.attributes_of("house_finch").unwrap(), ["beak", "wing"]);
        assert!(matches!(t.attributes_of("robin"), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn malformed_table_reports_line() {
        let err = AttributeTable::from_json(b"{\"classes\": {\n \"a\": [1]}}", "bad").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert!(location.starts_with("line 2"), "{location}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn one_class_two_samples_gives_midpoint() {
        let mut base = FeatureSet::new(2);
        base.push(0, "a", &[1.0, 0.0]).unwrap();
        base.push(0, "a", &[0.0, 1.0]).unwrap();
        let t = table(&[("a", &["x"])]);
        let f = attribute_visual_prototypes(&base, &t, &["x".to_string()]).unwrap();
        assert_eq!(f.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn shared_attribute_pools_samples_not_means() {
        let mut base = FeatureSet::new(1);
        base.push(0, "a", &[0.0]).unwrap();
        for _ in 0..3 {
            base.push(1, "b", &[4.0]).unwrap();
        }
        let t = table(&[("a", &["x"]), ("b", &["x"])]);
        let f = attribute_visual_prototypes(&base, &t, &["x".to_string()]).unwrap();
        assert_eq!(f.get(0, 0), 3.0);
    }

    #[test]
    fn attribute_without_samples_is_an_error() {
        let mut base = FeatureSet::new(1);
        base.push(0, "a", &[1.0]).unwrap();
        let t = table(&[("a", &["x"])]);
        let names = vec!["x".to_string(), "y".to_string()];
        assert!(matches!(
            attribute_visual_prototypes(&base, &t, &names),
            Err(Error::EmptyAttribute(n)) if n == "y"
        ));
    }

    #[test]
    fn knowledge_shapes_and_partial_coverage() {
        let mut base = FeatureSet::new(2);
        for (l, n) in ["a", "b", "c"].iter().enumerate() {
            base.push(l, n, &[l as f64, 1.0]).unwrap();
        }
        let t = table(&[
            ("a", &["p", "q"]),
            ("b", &["r"]),
            ("c", &["s", "p"]),
            ("n1", &["q", "s", "zzz"]),
            ("n2", &["wing"]),
            ("n3", &[]),
        ]);
        let e = embeddings(&["p", "q", "r", "s", "a", "b", "c", "n1", "n2", "n3"], 10);
        let pool = AttributePool::build(&base, &t, &e).unwrap();
        assert_eq!(pool.names(), ["p", "q", "r", "s"]);
        let base_classes: Vec<(usize, String)> = (0..3).map(|l| (l, base.class_name(l).unwrap().into())).collect();
        let k0 = build_knowledge(&pool, &base_classes, &e, &t).unwrap();
        assert_eq!(k0.assoc.matrix().shape(), (4, 3));

        let novel = vec![(3, "n1".to_string()), (4, "n2".to_string()), (5, "n3".to_string())];
        let k1 = build_knowledge(&pool, &novel, &e, &t).unwrap();
        assert_eq!(k1.assoc.column(0), vec![0.0, 1.0, 0.0, 1.0]);
        assert!(k1.assoc.is_uncovered(1));
        assert!(k1.assoc.is_uncovered(2));
        assert!(!k1.assoc.is_uncovered(0));
    }

    #[test]
    fn missing_embedding_is_named() {
        let mut base = FeatureSet::new(1);
        base.push(0, "a", &[1.0]).unwrap();
        let t = table(&[("a", &["x"])]);
        let e = embeddings(&["a"], 2);
        assert!(matches!(AttributePool::build(&base, &t, &e), Err(Error::MissingEmbedding(n)) if n == "x"));
    }

    #[test]
    fn semantic_csv_round_trip() {
        let e = embeddings(&["a", "b"], 3);
        let back = SemanticEmbeddings::read_csv(e.to_csv().as_bytes(), "e").unwrap();
        assert_eq!(back, e);
        assert!(SemanticEmbeddings::read_csv(b"id,s0\nx,1\n", "h").is_err());
    }
}
