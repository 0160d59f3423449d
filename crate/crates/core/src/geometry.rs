//! Target structures in the geometric space.
//!
//! A structure is a `d_g x N` matrix of unit class vectors. It is
//! *geometrically optimal* when every pair of distinct columns has inner
//! product `-1/(N-1)` (a simplex equiangular tight frame). Each session the
//! structure is re-synthesized so that it stays optimal for the grown class
//! count while moving as little as possible from the initial structure:
//! the previous columns plus the projected means of the new classes.
//!
//! Maximizing `sum_i <init_i, target_i>` over optimal targets reduces to an
//! orthogonal Procrustes problem on the centered initial structure. With
//! `M = I - 11^T/N` and `init * M = W diag(s) V^T`, the solution is
//! `sqrt(N/(N-1)) * W V^T * M`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::session::FeatureSet;
use crate::tensor::{dot, norm, normalized, svd_compact, Matrix};

/// Relative singular-value floor below which the centered initial structure
/// is considered rank deficient.
pub const RANK_TOL: f64 = 1e-9;

/// Unit class vectors, column `i` belonging to `class_ids[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMatrix {
    columns: Matrix,
    class_ids: Vec<usize>,
}

impl StructureMatrix {
    /// Validates shape and unit column norms (to 1e-8).
    pub fn new(columns: Matrix, class_ids: Vec<usize>) -> Result<Self> {
        if columns.cols() != class_ids.len() {
            return Err(Error::shape(
                "StructureMatrix::new",
                format!("{} columns for {} classes", columns.cols(), class_ids.len()),
            ));
        }
        for (j, c) in columns.columns().iter().enumerate() {
            let n = norm(c);
            if (n - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidInput(format!("column {j} has norm {n}")));
            }
        }
        Ok(Self { columns, class_ids })
    }

    pub fn dim(&self) -> usize {
        self.columns.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.columns.cols()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn columns(&self) -> &Matrix {
        &self.columns
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.columns.column(i)
    }

    /// Class vectors as rows (`N x d_g`), the layout used for logits.
    pub fn as_rows(&self) -> Matrix {
        self.columns.transpose()
    }

    pub fn gram(&self) -> Matrix {
        self.columns.t_matmul(&self.columns).expect("square product")
    }

    /// The first `n` columns.
    pub fn prefix(&self, n: usize) -> Result<StructureMatrix> {
        if n > self.num_classes() {
            return Err(Error::InvalidInput(format!(
                "prefix of {n} columns from a structure of {}",
                self.num_classes()
            )));
        }
        let cols: Vec<usize> = (0..n).collect();
        Ok(Self {
            columns: self.columns.select_columns(&cols),
            class_ids: self.class_ids[..n].to_vec(),
        })
    }

    /// Max deviation from the simplex-ETF Gram condition.
    pub fn optimality_deviation(&self) -> f64 {
        check_geometric_optimality(&self.columns)
    }

    /// Max deviation from "unit columns with one common pairwise inner
    /// product". Optimal structures and prefixes of larger optimal
    /// structures both pass.
    pub fn equiangular_deviation(&self) -> f64 {
        let n = self.num_classes();
        let g = self.gram();
        let common = if n > 1 { g.get(0, 1) } else { 0.0 };
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { common };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnSource {
    /// Copied from the previous session's target structure.
    Historical,
    /// Normalized projected mean of a class introduced this session.
    Novel,
}

/// Previous target columns followed by embeddings of the new classes.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialStructure {
    columns: Matrix,
    class_ids: Vec<usize>,
    sources: Vec<ColumnSource>,
}

impl InitialStructure {
    pub fn from_columns(columns: Matrix, class_ids: Vec<usize>, sources: Vec<ColumnSource>) -> Result<Self> {
        if columns.cols() != class_ids.len() || class_ids.len() != sources.len() {
            return Err(Error::shape("InitialStructure", "column, id and source counts differ"));
        }
        Ok(Self {
            columns,
            class_ids,
            sources,
        })
    }

    pub fn columns(&self) -> &Matrix {
        &self.columns
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn sources(&self) -> &[ColumnSource] {
        &self.sources
    }

    pub fn num_classes(&self) -> usize {
        self.columns.cols()
    }

    pub fn dim(&self) -> usize {
        self.columns.rows()
    }
}

/// Batch map from feature rows to geometric-space rows.
pub trait FeatureMap {
    fn map_rows(&self, x: &Matrix) -> Result<Matrix>;
}

/// Pass-through map, for tests and for features already in geometric space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMap;

impl FeatureMap for IdentityMap {
    fn map_rows(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.clone())
    }
}

/// Builds the initial structure for `class_ids` (in column order).
///
/// Classes covered by `prev` keep their previous column bit for bit; every
/// other class gets the unit-normalized mean of its mapped samples.
pub fn initial_structure(
    prev: Option<&StructureMatrix>,
    map: &dyn FeatureMap,
    class_ids: &[usize],
    samples: &FeatureSet,
) -> Result<InitialStructure> {
    let kept = prev.map_or(0, StructureMatrix::num_classes);
    if let Some(p) = prev {
        if class_ids.len() < kept || p.class_ids() != &class_ids[..kept] {
            return Err(Error::ProtocolViolation(
                "previous structure does not cover the leading classes".into(),
            ));
        }
    }
    let mut columns = Vec::with_capacity(class_ids.len());
    let mut sources = Vec::with_capacity(class_ids.len());
    for (j, &class) in class_ids.iter().enumerate() {
        if j < kept {
            columns.push(prev.expect("kept > 0 implies prev").column(j));
            sources.push(ColumnSource::Historical);
            continue;
        }
        let rows = samples.class_rows(class);
        if rows.rows() == 0 {
            return Err(Error::MissingClass(class));
        }
        let mapped = map.map_rows(&rows)?;
        let mut mean = vec![0.0; mapped.cols()];
        for r in 0..mapped.rows() {
            mean.iter_mut().zip(mapped.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= mapped.rows() as f64);
        let unit = normalized(&mean).ok_or(Error::DegenerateEmbedding(class))?;
        columns.push(unit);
        sources.push(ColumnSource::Novel);
    }
    if let Some(p) = prev {
        if columns.iter().any(|c| c.len() != p.dim()) {
            return Err(Error::shape(
                "initial_structure",
                "map output dim differs from structure dim",
            ));
        }
    }
    let columns = if columns.is_empty() {
        Matrix::zeros(prev.map_or(0, StructureMatrix::dim), 0)
    } else {
        Matrix::from_columns(&columns)?
    };
    InitialStructure::from_columns(columns, class_ids.to_vec(), sources)
}

/// Result of the structure update.
#[derive(Debug, Clone)]
pub struct StructureUpdate {
    pub structure: StructureMatrix,
    /// The column-orthonormal `U = W V^T`.
    pub orthogonal: Matrix,
    /// Set when the centered initial structure had rank below `N - 1` and
    /// had its negligible directions completed deterministically.
    pub rank_deficient: bool,
}

/// Optimal structure closest to `init` in summed column inner products.
pub fn theorem1_update(init: &InitialStructure) -> Result<StructureUpdate> {
    let (columns, orthogonal, rank_deficient) = procrustes_etf(init.columns())?;
    Ok(StructureUpdate {
        structure: StructureMatrix {
            columns,
            class_ids: init.class_ids().to_vec(),
        },
        orthogonal,
        rank_deficient,
    })
}

/// Procrustes step on a raw `d x N` initial matrix. Zero columns are
/// allowed and simply do not contribute to the objective.
pub(crate) fn procrustes_etf(init: &Matrix) -> Result<(Matrix, Matrix, bool)> {
    let (d, n) = init.shape();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes, got {n}")));
    }
    if n >= d {
        return Err(Error::DimensionTooSmall { classes: n, dim: d });
    }
    let centering = Matrix::centering(n);
    let centered = init.matmul(&centering)?;
    let mut svd = svd_compact(&centered)?;
    let rank = svd.rank(RANK_TOL);
    let rank_deficient = rank < n - 1;
    if rank_deficient {
        warn!(
            "centered initial structure has rank {rank} < {}; completing the basis",
            n - 1
        );
        complete_weak_columns(&mut svd.w, &svd.sigma, (d * n) as u64)?;
    }
    let u = svd.w.matmul_t(&svd.v)?;
    Ok((structure_from_orthonormal(&u)?, u, rank_deficient))
}

/// Replaces the left singular vectors of negligible singular values with a
/// seeded orthonormal completion. Those directions do not affect the
/// objective, but they must stay orthogonal to the rest for the result to
/// be optimal.
fn complete_weak_columns(w: &mut Matrix, sigma: &[f64], tag: u64) -> Result<()> {
    let max = sigma.iter().copied().fold(0.0, f64::max);
    let (d, n) = w.shape();
    let mut cols = w.columns();
    let mut g = rng::gaussian(0x0c0_e7f, &[tag]);
    for j in 0..n {
        if sigma[j] > RANK_TOL * max && max > 0.0 {
            continue;
        }
        loop {
            let mut v = g.vector(d);
            for _ in 0..2 {
                for (k, u) in cols.iter().enumerate() {
                    if k == j || (k > j && sigma[k] <= RANK_TOL * max) {
                        continue;
                    }
                    let p = dot(&v, u);
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
                }
            }
            if norm(&v) > 1e-6 {
                cols[j] = normalized(&v).expect("nonzero");
                break;
            }
        }
    }
    *w = Matrix::from_columns(&cols)?;
    Ok(())
}

/// `sqrt(N/(N-1)) * U * (I - 11^T/N)` for a column-orthonormal `U`.
pub fn structure_from_orthonormal(u: &Matrix) -> Result<Matrix> {
    let n = u.cols();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes, got {n}")));
    }
    let k = (n as f64 / (n as f64 - 1.0)).sqrt();
    Ok(u.matmul(&Matrix::centering(n))?.scale(k))
}

/// `max_{i,j} |d_i . d_j - (N/(N-1) [i=j] - 1/(N-1))|`.
pub fn check_geometric_optimality(columns: &Matrix) -> f64 {
    let n = columns.cols();
    if n < 2 {
        return f64::INFINITY;
    }
    let gram = columns.t_matmul(columns).expect("square product");
    let nf = n as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { -1.0 / (nf - 1.0) };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}

/// `tr(init^T target) = sum_i <init_i, target_i>`.
pub fn trace_objective(init: &Matrix, target: &Matrix) -> Result<f64> {
    if init.shape() != target.shape() {
        return Err(Error::shape(
            "trace_objective",
            format!("{:?} vs {:?}", init.shape(), target.shape()),
        ));
    }
    Ok(init.data().iter().zip(target.data()).map(|(a, b)| a * b).sum())
}

/// Structure matching rate: mean cosine between matching columns.
pub fn smr(init: &InitialStructure, target: &StructureMatrix) -> Result<f64> {
    smr_columns(init.columns(), target.columns())
}

pub fn smr_columns(init: &Matrix, target: &Matrix) -> Result<f64> {
    if init.shape() != target.shape() || init.cols() == 0 {
        return Err(Error::shape(
            "smr",
            format!("{:?} vs {:?}", init.shape(), target.shape()),
        ));
    }
    let a = init.columns();
    let b = target.columns();
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        let denom = norm(x) * norm(y);
        if denom == 0.0 {
            return Err(Error::DegenerateInput("zero column in smr".into()));
        }
        total += dot(x, y) / denom;
    }
    Ok(total / a.len() as f64)
}

/// Column-orthonormal `d x n` matrix from a seeded Gaussian matrix
/// (Gram–Schmidt applied twice).
pub fn random_orthonormal(d: usize, n: usize, seed: u64) -> Result<Matrix> {
    if n > d {
        return Err(Error::DimensionTooSmall { classes: n, dim: d });
    }
    let mut g = rng::gaussian(seed, &[0x0a7_0001, d as u64, n as u64]);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = g.vector(d);
        for _ in 0..2 {
            for u in &cols {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
        }
        if let Some(unit) = normalized(&v) {
            if norm(&v) > 1e-6 {
                cols.push(unit);
            }
        }
    }
    if n == 0 {
        return Ok(Matrix::zeros(d, 0));
    }
    Matrix::from_columns(&cols)
}

/// Optimal structure built from a random orthonormal basis (the random
/// matching baseline).
pub fn random_optimal_structure(n: usize, d: usize, seed: u64) -> Result<StructureMatrix> {
    if d <= n {
        return Err(Error::DimensionTooSmall { classes: n, dim: d });
    }
    let u = random_orthonormal(d, n, seed)?;
    Ok(StructureMatrix {
        columns: structure_from_orthonormal(&u)?,
        class_ids: (0..n).collect(),
    })
}

/// Fixed-structure baseline: an optimal structure over `total` classes,
/// fit once so its leading columns match the given initial structure. Later
/// sessions use prefixes of it.
pub fn fixed_structure(init: &InitialStructure, total: usize) -> Result<StructureMatrix> {
    let have = init.num_classes();
    if total < have {
        return Err(Error::InvalidConfig(format!(
            "fixed structure total {total} is below the {have} classes already seen"
        )));
    }
    let d = init.dim();
    let mut padded = Matrix::zeros(d, total);
    for r in 0..d {
        for c in 0..have {
            padded.set_unchecked(r, c, init.columns().get(r, c));
        }
    }
    let (columns, _, _) = procrustes_etf(&padded)?;
    let mut class_ids = init.class_ids().to_vec();
    let next = class_ids.iter().max().map_or(0, |m| m + 1);
    class_ids.extend(next..next + (total - have));
    Ok(StructureMatrix { columns, class_ids })
}
