//! Nearest-class-mean classification against the target structure and
//! the session/run metric suite.
//!
//! Rates are percentages. "Base" always means the classes of session 0;
//! for the base-positive error rates a base sample predicted as any novel
//! class is a false negative and a novel sample predicted as any base class
//! is a false positive.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::StructureMatrix;
use crate::tensor::{dot, normalized, Matrix};

/// Column index maximizing `<z, delta_j>`; ties go to the lowest index.
pub fn ncm_classify(z: &[f64], structure: &StructureMatrix) -> usize {
    ncm_rows(z, &structure.as_rows())
}

/// Same rule against structure rows (`N x d`).
pub fn ncm_rows(z: &[f64], rows: &Matrix) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..rows.rows() {
        let s = dot(z, rows.row(j));
        if s > best_score {
            best = j;
            best_score = s;
        }
    }
    best
}

pub fn harmonic_mean(base_acc: f64, novel_acc: f64) -> f64 {
    if base_acc + novel_acc == 0.0 {
        return 0.0;
    }
    2.0 * base_acc * novel_acc / (base_acc + novel_acc)
}

pub fn balanced_error_rate(fnr: f64, fpr: f64) -> f64 {
    (fnr + fpr) / 2.0
}

/// Percentage of `preds[i] == labels[i]` over the indices in `subset`.
fn accuracy(preds: &[usize], labels: &[usize], subset: impl Iterator<Item = usize>, what: &'static str) -> Result<f64> {
    let (mut n, mut hit) = (0usize, 0usize);
    for i in subset {
        n += 1;
        hit += usize::from(preds[i] == labels[i]);
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(what));
    }
    Ok(100.0 * hit as f64 / n as f64)
}

/// Classification metrics of one session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub top1: f64,
    pub bacc: Option<f64>,
    pub nacc: Option<f64>,
    pub hm: Option<f64>,
    pub ber: Option<f64>,
}

/// Metrics over predictions and labels (global class ids). Metrics whose
/// subset is empty are absent rather than zero.
pub fn session_metrics(preds: &[usize], labels: &[usize], is_base: impl Fn(usize) -> bool) -> Result<SessionMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "session_metrics",
            "predictions and labels differ in length",
        ));
    }
    let top1 = accuracy(preds, labels, 0..labels.len(), "top1")?;
    let base_idx = || (0..labels.len()).filter(|i| is_base(labels[*i]));
    let novel_idx = || (0..labels.len()).filter(|i| !is_base(labels[*i]));
    let bacc = accuracy(preds, labels, base_idx(), "bacc").ok();
    let nacc = accuracy(preds, labels, novel_idx(), "nacc").ok();
    let hm = match (bacc, nacc) {
        (Some(b), Some(n)) => Some(harmonic_mean(b, n)),
        _ => None,
    };
    let rate = |idx: Vec<usize>, wrong_side: bool| -> Option<f64> {
        if idx.is_empty() {
            return None;
        }
        let miss = idx.iter().filter(|i| is_base(preds[**i]) == wrong_side).count();
        Some(100.0 * miss as f64 / idx.len() as f64)
    };
    let fnr = rate(base_idx().collect(), false);
    let fpr = rate(novel_idx().collect(), true);
    let ber = match (fnr, fpr) {
        (Some(a), Some(b)) => Some(balanced_error_rate(a, b)),
        _ => None,
    };
    Ok(SessionMetrics {
        top1,
        bacc,
        nacc,
        hm,
        ber,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    /// Mean pairwise cosine between distinct class-mean directions.
    pub sim_cls: f64,
    /// Mean cosine of samples to their own class-mean direction.
    pub sim_in: f64,
    /// Classes left out because they had a single sample.
    pub skipped: Vec<usize>,
}

pub fn similarity_stats(z: &Matrix, labels: &[usize]) -> Result<SimilarityStats> {
    if z.rows() != labels.len() {
        return Err(Error::shape("similarity_stats", "one label per row required"));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut skipped = Vec::new();
    let mut dirs: Vec<(usize, Vec<f64>)> = Vec::new();
    for &c in &classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == c).collect();
        if idx.len() < 2 {
            skipped.push(c);
            continue;
        }
        let mut mean = vec![0.0; z.cols()];
        for &i in &idx {
            mean.iter_mut().zip(z.row(i)).for_each(|(m, v)| *m += v);
        }
        let dir = normalized(&mean).ok_or_else(|| Error::DegenerateInput(format!("class {c} has a zero mean")))?;
        dirs.push((c, dir));
    }
    if dirs.len() < 2 {
        return Err(Error::UndefinedMetric("sim_cls"));
    }
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..dirs.len() {
        for b in a + 1..dirs.len() {
            pair_sum += dot(&dirs[a].1, &dirs[b].1);
            pairs += 1;
        }
    }
    let mut in_sum = 0.0;
    let mut in_n = 0usize;
    for (c, dir) in &dirs {
        for i in (0..labels.len()).filter(|i| labels[*i] == *c) {
            let u = normalized(z.row(i)).ok_or_else(|| Error::DegenerateInput(format!("zero row {i}")))?;
            in_sum += dot(&u, dir);
            in_n += 1;
        }
    }
    Ok(SimilarityStats {
        sim_cls: pair_sum / pairs as f64,
        sim_in: in_sum / in_n as f64,
        skipped,
    })
}

/// One row of the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub t: usize,
    pub top1: f64,
    #[serde(deserialize_with = "Option::deserialize")]
    pub bacc: Option<f64>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub nacc: Option<f64>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub hm: Option<f64>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub ber: Option<f64>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub smr: Option<f64>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub sim_cls: Option<f64>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub sim_in: Option<f64>,
}

/// Run-level aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregates {
    pub ahm: Option<f64>,
    pub fa: f64,
    pub pd: f64,
    pub base_acc: f64,
}

pub fn average_harmonic_mean(hms: &[f64]) -> Result<f64> {
    if hms.is_empty() {
        return Err(Error::UndefinedMetric("ahm"));
    }
    Ok(hms.iter().sum::<f64>() / hms.len() as f64)
}

pub fn performance_drop(base_acc: f64, final_acc: f64) -> f64 {
    base_acc - final_acc
}

/// Aggregates from session records: AHM over incremental sessions, FA the
/// last Top-1, PD the drop from the session-0 Top-1.
pub fn run_metrics(sessions: &[SessionRecord]) -> Result<RunAggregates> {
    let first = sessions.first().ok_or(Error::UndefinedMetric("base_acc"))?;
    let last = sessions.last().expect("nonempty");
    let hms: Vec<f64> = sessions.iter().filter(|s| s.t > 0).filter_map(|s| s.hm).collect();
    Ok(RunAggregates {
        ahm: average_harmonic_mean(&hms).ok(),
        fa: last.top1,
        pd: performance_drop(first.top1, last.top1),
        base_acc: first.top1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub sessions: Vec<SessionRecord>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub ahm: Option<f64>,
    pub fa: f64,
    pub pd: f64,
    pub base_acc: f64,
}

impl RunReport {
    pub fn from_sessions(sessions: Vec<SessionRecord>) -> Result<Self> {
        let agg = run_metrics(&sessions)?;
        Ok(Self {
            sessions,
            ahm: agg.ahm,
            fa: agg.fa,
            pd: agg.pd,
            base_acc: agg.base_acc,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(bytes: &[u8], source_name: &str) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,top1,bacc,nacc,hm,ber,smr,sim_cls,sim_in\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for r in &self.sessions {
            let _ = writeln!(
                s,
                "{},{:?},{},{},{},{},{},{},{}",
                r.t,
                r.top1,
                f(r.bacc),
                f(r.nacc),
                f(r.hm),
                f(r.ber),
                f(r.smr),
                f(r.sim_cls),
                f(r.sim_in)
            );
        }
        s
    }

    /// Fixed-width table with one row per session and an aggregate footer.
    pub fn render_table(&self) -> String {
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut s = format!(
            "{:>3} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6} {:>7} {:>6}\n",
            "t", "top1", "bacc", "nacc", "hm", "ber", "smr", "sim_cls", "sim_in"
        );
        for r in &self.sessions {
            let _ = writeln!(
                s,
                "{:>3} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6} {:>7} {:>6}",
                r.t,
                f(Some(r.top1), 2),
                f(r.bacc, 2),
                f(r.nacc, 2),
                f(r.hm, 2),
                f(r.ber, 2),
                f(r.smr, 3),
                f(r.sim_cls, 3),
                f(r.sim_in, 3)
            );
        }
        let _ = writeln!(s, "AHM {}  FA {:.2}  PD {:.2}", f(self.ahm, 2), self.fa, self.pd);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_optimal_structure;

    fn record(t: usize, top1: f64, hm: Option<f64>) -> SessionRecord {
        SessionRecord {
            t,
            top1,
            bacc: None,
            nacc: None,
            hm,
            ber: None,
            smr: None,
            sim_cls: None,
            sim_in: None,
        }
    }

    #[test]
    fn ncm_picks_matching_column_and_breaks_ties_low() {
        let s = random_optimal_structure(5, 8, 1).unwrap();
        assert_eq!(ncm_classify(&s.column(3), &s), 3);
        let rows = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let z = normalized(&[1.0, 1.0]).unwrap();
        assert_eq!(ncm_rows(&z, &rows), 0);
    }

    #[test]
    fn hm_and_ber_arithmetic() {
        assert!((harmonic_mean(80.0, 40.0) - 53.333333).abs() < 1e-5);
        assert_eq!(balanced_error_rate(10.0, 30.0), 20.0);
        let m = session_metrics(&[0, 1, 2, 3], &[0, 1, 2, 3], |c| c < 2).unwrap();
        assert_eq!((m.hm, m.ber, m.top1), (Some(100.0), Some(0.0), 100.0));
    }

    #[test]
    fn base_only_session_leaves_novel_metrics_absent() {
        let m = session_metrics(&[0, 1, 1], &[0, 1, 0], |c| c < 2).unwrap();
        assert!((m.top1 - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.nacc, None);
        assert_eq!(m.hm, None);
        assert_eq!(m.ber, None);
    }

    #[test]
    fn error_rates_follow_base_positive_convention() {
        // Base: 0, 1. Novel: 2, 3.
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let preds = [0, 2, 1, 1, 2, 0, 1, 3];
        let m = session_metrics(&preds, &labels, |c| c < 2).unwrap();
        // FNR = 1/4 base samples predicted novel, FPR = 2/4 novel predicted base.
        assert_eq!(m.ber, Some((25.0 + 50.0) / 2.0));
        assert_eq!(m.bacc, Some(75.0));
        assert_eq!(m.nacc, Some(50.0));
    }

    #[test]
    fn aggregates_from_records() {
        let hms = [70.34, 66.59, 63.38, 59.59, 57.05, 53.95, 53.49, 53.92];
        let mut sessions = vec![record(0, 83.97, None)];
        sessions.extend(hms.iter().enumerate().map(|(i, h)| record(i + 1, 60.0, Some(*h))));
        sessions.last_mut().unwrap().top1 = 59.92;
        let agg = run_metrics(&sessions).unwrap();
        assert!((agg.ahm.unwrap() - 59.78).abs() < 0.01);
        assert!((agg.pd - 24.05).abs() < 1e-9);
        assert_eq!(agg.fa, 59.92);

        let single = run_metrics(&[record(0, 90.0, None), record(1, 70.0, Some(42.5))]).unwrap();
        assert_eq!(single.ahm, Some(42.5));
    }

    #[test]
    fn similarity_on_etf_and_duplicates() {
        let s = random_optimal_structure(3, 6, 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..6).map(|i| s.column(i % 3)).collect();
        let z = Matrix::from_rows(&rows).unwrap();
        let st = similarity_stats(&z, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert!((st.sim_in - 1.0).abs() < 1e-12);
        assert!((st.sim_cls + 0.5).abs() < 1e-12);

        let z = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let st = similarity_stats(&z, &[0, 0, 1, 1, 2]).unwrap();
        assert!((st.sim_cls - 1.0).abs() < 1e-12);
        assert_eq!(st.skipped, vec![2]);
    }

    #[test]
    fn report_json_requires_every_field() {
        let report = RunReport::from_sessions(vec![record(0, 80.0, None), record(1, 70.0, Some(50.0))]).unwrap();
        let back = RunReport::from_json(report.to_json().as_bytes(), "r").unwrap();
        assert_eq!(back, report);
        let mut v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        v.as_object_mut().unwrap().remove("ahm");
        let err = RunReport::from_json(v.to_string().as_bytes(), "r").unwrap_err();
        assert!(err.to_string().contains("ahm"), "{err}");
    }

    #[test]
    fn table_has_row_per_session_and_footer() {
        let report = RunReport::from_sessions(vec![record(0, 80.0, None)]).unwrap();
        let table = report.render_table();
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().last().unwrap().starts_with("AHM -"));
    }
}
