//! Labeled feature sets and their CSV form.
//!
//! File layout: header `label,class_name,f0,...,f{d-1}`, one sample per
//! row. Floats are written with Rust's shortest round-trip formatting, so
//! a write/read cycle reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Matrix,
    labels: Vec<usize>,
    names: BTreeMap<usize, String>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dim),
            labels: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    /// Appends one sample. A label keeps the first name it was given; a
    /// different name for the same label is a schema error.
    pub fn push(&mut self, label: usize, class_name: &str, features: &[f64]) -> Result<()> {
        if features.len() != self.dim() {
            return Err(Error::Schema {
                source_name: "feature set".into(),
                message: format!("sample of dim {} in a set of dim {}", features.len(), self.dim()),
            });
        }
        match self.names.get(&label) {
            Some(existing) if existing != class_name => {
                return Err(Error::Schema {
                    source_name: "feature set".into(),
                    message: format!("label {label} is both `{existing}` and `{class_name}`"),
                })
            }
            Some(_) => {}
            None => {
                self.names.insert(label, class_name.to_string());
            }
        }
        self.features.push_row(features)?;
        self.labels.push(label);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn class_name(&self, label: usize) -> Option<&str> {
        self.names.get(&label).map(String::as_str)
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.names.keys().copied().collect()
    }

    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_rows(&self, label: usize) -> Matrix {
        self.features.select_rows(&self.indices_of(label))
    }

    /// Copy with every label shifted by `offset`.
    pub fn relabeled(&self, offset: usize) -> FeatureSet {
        FeatureSet {
            features: self.features.clone(),
            labels: self.labels.iter().map(|l| l + offset).collect(),
            names: self.names.iter().map(|(l, n)| (l + offset, n.clone())).collect(),
        }
    }

    /// Appends all samples of `other`.
    pub fn extend(&mut self, other: &FeatureSet) -> Result<()> {
        for i in 0..other.len() {
            let label = other.labels[i];
            let name = other.names[&label].clone();
            self.push(label, &name, other.sample(i))?;
        }
        Ok(())
    }

    /// Subset of the samples whose label satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> FeatureSet {
        let mut out = FeatureSet::new(self.dim());
        for i in 0..self.len() {
            let l = self.labels[i];
            if keep(l) {
                out.push(l, &self.names[&l], self.sample(i)).expect("same schema");
            }
        }
        out
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let mut header = vec!["label".to_string(), "class_name".to_string()];
        header.extend((0..self.dim()).map(|j| format!("f{j}")));
        w.write_record(&header).map_err(csv_write_err)?;
        for i in 0..self.len() {
            let label = self.labels[i];
            let mut rec = vec![label.to_string(), self.names[&label].clone()];
            rec.extend(self.sample(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_write_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| with_path(e, path))
    }

    /// Parses a feature CSV. Nothing is returned unless the whole input
    /// parses; a final record cut short is reported as a parse error.
    pub fn read_csv(bytes: &[u8], source_name: &str) -> Result<FeatureSet> {
        let parse = |location: String, message: String| Error::Parse {
            source_name: source_name.to_string(),
            location,
            message,
        };
        let schema = |message: String| Error::Schema {
            source_name: source_name.to_string(),
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
        if header.len() < 2 || &header[0] != "label" || &header[1] != "class_name" {
            return Err(schema("header must start with `label,class_name`".into()));
        }
        for (j, h) in header.iter().skip(2).enumerate() {
            if h != format!("f{j}") {
                return Err(schema(format!("feature column {j} is named `{h}`, expected `f{j}`")));
            }
        }
        let dim = header.len() - 2;
        let ends_cleanly = bytes.last().is_none_or(|b| *b == b'\n');

        let mut set = FeatureSet::new(dim);
        let mut rows = Vec::new();
        for rec in records {
            let rec = rec.map_err(|e| parse("record".into(), e.to_string()))?;
            rows.push(rec);
        }
        let total = rows.len();
        for (k, rec) in rows.into_iter().enumerate() {
            let offset = rec.position().map_or(0, |p| p.byte());
            let at = || format!("byte {offset} (line {})", rec.position().map_or(0, |p| p.line()));
            if rec.len() != header.len() {
                if k + 1 == total && !ends_cleanly {
                    return Err(parse(at(), format!("truncated record with {} fields", rec.len())));
                }
                return Err(schema(format!(
                    "record at {} has {} fields, header has {}",
                    at(),
                    rec.len(),
                    header.len()
                )));
            }
            let label: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| parse(at(), format!("label `{}` is not a nonnegative integer", &rec[0])))?;
            let mut values = Vec::with_capacity(dim);
            for field in rec.iter().skip(2) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| parse(at(), format!("`{field}` is not a number")))?;
                if !v.is_finite() {
                    return Err(parse(at(), format!("non-finite value `{field}`")));
                }
                values.push(v);
            }
            set.push(label, &rec[1], &values).map_err(|e| match e {
                Error::Schema { message, .. } => schema(message),
                other => other,
            })?;
        }
        set.check_contiguous_labels().map_err(schema)?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<FeatureSet> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(&bytes, &path.display().to_string())
    }

    fn check_contiguous_labels(&self) -> std::result::Result<(), String> {
        for (expected, label) in self.names.keys().enumerate() {
            if *label != expected {
                return Err(format!("labels are not contiguous from 0: missing {expected}"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in self.names.values() {
            if !seen.insert(name) {
                return Err(format!("class name `{name}` used by two labels"));
            }
        }
        Ok(())
    }
}

fn csv_write_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<csv>", io),
        other => Error::InvalidInput(format!("csv write failed: {other:?}")),
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> &'static str {
        "label,class_name,f0,f1\n0,cat,0.5,-1.25\n1,dog,3,4e-3\n"
    }

    #[test]
    fn parses_two_rows() {
        let set = FeatureSet::read_csv(fixture().as_bytes(), "fixture").unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.dim(), 2);
        assert_eq!(set.sample(1), &[3.0, 0.004]);
        assert_eq!(set.class_name(1), Some("dog"));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let cut = &fixture()[..fixture().len() - 6];
        let err = FeatureSet::read_csv(cut.as_bytes(), "cut").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn ragged_complete_row_is_a_schema_error() {
        let text = "label,class_name,f0,f1\n0,cat,0.5\n1,dog,1,2\n";
        let err = FeatureSet::read_csv(text.as_bytes(), "ragged").unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
    }

    #[test]
    fn bad_number_reports_offset() {
        let text = "label,class_name,f0\n0,cat,abc\n";
        match FeatureSet::read_csv(text.as_bytes(), "bad").unwrap_err() {
            Error::Parse { location, .. } => assert!(location.contains("byte 20"), "{location}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_contiguous_labels_rejected() {
        let text = "label,class_name,f0\n0,cat,1\n2,dog,1\n";
        assert!(matches!(
            FeatureSet::read_csv(text.as_bytes(), "gap"),
            Err(Error::Schema { .. })
        ));
    }
}
