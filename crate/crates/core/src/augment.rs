//! Gaussian prototype augmentation with covariance transfer.
//!
//! Each seen class is stored as a mean plus a diagonal covariance. Base
//! classes keep their exact statistics; a novel class gets its calibrated
//! prototype and a covariance borrowed from the base classes it resembles:
//! `cov' = beta * (cov_k + sum_b w_b cov_b)` with `w = softmax(gamma * cos)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::session::FeatureSet;
use crate::tensor::{cosine, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: usize,
    pub name: String,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    /// Exact statistics of a fully observed (base) class.
    pub exact: bool,
}

impl ClassStats {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.cov_diag.len() {
            return Err(Error::shape("ClassStats", "mean and covariance lengths differ"));
        }
        if self.mean.iter().chain(&self.cov_diag).any(|v| !v.is_finite()) {
            return Err(Error::InvalidStats(format!(
                "non-finite statistics for class {}",
                self.class_id
            )));
        }
        if self.cov_diag.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidStats(format!(
                "negative variance for class {}",
                self.class_id
            )));
        }
        Ok(())
    }
}

/// Per-dimension mean and population (1/n) variance of the rows.
pub fn mean_and_variance(rows: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = rows.rows() as f64;
    let d = rows.cols();
    let mut mean = vec![0.0; d];
    for r in 0..rows.rows() {
        mean.iter_mut().zip(rows.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in 0..rows.rows() {
        for ((s, v), m) in var.iter_mut().zip(rows.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// Exact statistics of every class in a fully labeled base set.
pub fn base_stats(base: &FeatureSet) -> Result<Vec<ClassStats>> {
    base.classes()
        .into_iter()
        .map(|label| {
            let rows = base.class_rows(label);
            let name = base.class_name(label).expect("label has a name").to_string();
            if rows.rows() < 2 {
                return Err(Error::InsufficientSamples {
                    class: name,
                    available: rows.rows(),
                    required: 2,
                });
            }
            let (mean, cov_diag) = mean_and_variance(&rows);
            Ok(ClassStats {
                class_id: label,
                name,
                mean,
                cov_diag,
                exact: true,
            })
        })
        .collect()
}

/// `softmax_b(gamma * cos(p_b, p))` over the base classes.
pub fn transfer_weights(prototype: &[f64], base: &[ClassStats], gamma: f64) -> Result<Vec<f64>> {
    if base.is_empty() {
        return Err(Error::InvalidInput("no base classes to transfer from".into()));
    }
    let mut logits = Vec::with_capacity(base.len());
    for b in base {
        let c = cosine(&b.mean, prototype).ok_or_else(|| {
            Error::DegenerateInput(format!("zero-norm prototype when comparing with class {}", b.class_id))
        })?;
        logits.push(gamma * c);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

/// `beta * (cov_k + sum_b w_b cov_b)`, elementwise.
pub fn novel_covariance(cov_k: &[f64], base: &[ClassStats], weights: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    if weights.len() != base.len() {
        return Err(Error::shape("novel_covariance", "one weight per base class required"));
    }
    if cov_k.iter().any(|v| *v < 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidStats("negative covariance or weight".into()));
    }
    let mut out = cov_k.to_vec();
    for (b, w) in base.iter().zip(weights) {
        if b.cov_diag.len() != out.len() {
            return Err(Error::shape("novel_covariance", "covariance lengths differ"));
        }
        if b.cov_diag.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidStats(format!(
                "negative variance for class {}",
                b.class_id
            )));
        }
        out.iter_mut().zip(&b.cov_diag).for_each(|(o, c)| *o += w * c);
    }
    out.iter_mut().for_each(|o| *o *= beta);
    Ok(out)
}

/// Statistics of every class seen so far, in order of arrival.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRepository {
    entries: Vec<ClassStats>,
}

impl PrototypeRepository {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, stats: ClassStats) -> Result<()> {
        stats.validate()?;
        if self.get(stats.class_id).is_some() {
            return Err(Error::ProtocolViolation(format!(
                "class {} already stored",
                stats.class_id
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.mean.len() != stats.mean.len() {
                return Err(Error::shape("PrototypeRepository::push", "feature dims differ"));
            }
        }
        self.entries.push(stats);
        Ok(())
    }

    pub fn get(&self, class_id: usize) -> Option<&ClassStats> {
        self.entries.iter().find(|e| e.class_id == class_id)
    }

    pub fn entries(&self) -> &[ClassStats] {
        &self.entries
    }

    pub fn base(&self) -> Vec<ClassStats> {
        self.entries.iter().filter(|e| e.exact).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub base: usize,
    pub novel: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self { base: 100, novel: 50 }
    }
}

/// Draws `N(mean, diag(cov))` samples for every stored class. Each class
/// uses its own stream derived from `(seed, round, class_id)`, so a round
/// is reproducible independently of the others.
pub fn sample_augmented(repo: &PrototypeRepository, counts: SampleCounts, seed: u64, round: u64) -> Result<FeatureSet> {
    if counts.base == 0 || counts.novel == 0 {
        return Err(Error::InvalidConfig("sample counts must be at least 1".into()));
    }
    let dim = repo.entries().first().map_or(0, |e| e.mean.len());
    let mut out = FeatureSet::new(dim);
    for e in repo.entries() {
        let n = if e.exact { counts.base } else { counts.novel };
        let std: Vec<f64> = e.cov_diag.iter().map(|v| v.sqrt()).collect();
        let mut g = rng::gaussian(seed, &[0xa06, round, e.class_id as u64]);
        let mut x = vec![0.0; dim];
        for _ in 0..n {
            for ((xi, m), s) in x.iter_mut().zip(&e.mean).zip(&std) {
                *xi = m + s * g.sample();
            }
            out.push(e.class_id, &e.name, &x)?;
        }
    }
    Ok(out)
}
