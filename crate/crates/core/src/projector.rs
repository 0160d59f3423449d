//! The projector from feature space to the geometric space, its matching
//! and contrastive losses, and the per-session training loop.
//!
//! `g(x) = normalize(W2 softplus(W1 normalize(x) + b1) + b2)`, so inputs
//! and outputs both live on unit spheres.
//!
//! * Matching loss: cross-entropy of the logits `<z, delta_j>` against the
//!   sample's class vector.
//! * Contrastive loss: supervised contrastive loss at temperature `tau`.
//!   Samples of the classes introduced in the current session also treat
//!   their class vector as an extra positive (a structural anchor); all
//!   anchors are part of every sample's contrast set.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FeatureMap, StructureMatrix};
use crate::optim::{CosineSchedule, Sgd};
use crate::rng;
use crate::session::FeatureSet;
use crate::tensor::{dot, grad_check, normalized, softplus, Matrix, NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ProjectorParams {
    pub fn init(d_f: usize, d_hidden: usize, d_g: usize, seed: u64) -> Result<Self> {
        if d_f == 0 || d_hidden == 0 || d_g == 0 {
            return Err(Error::InvalidConfig("projector dimensions must be positive".into()));
        }
        let mut g = rng::gaussian(seed, &[0x960]);
        let mut dense =
            |rows: usize, cols: usize, s: f64| Matrix::new(rows, cols, g.vector(rows * cols)).map(|m| m.scale(s));
        // The input is unit-norm, so unit-variance first-layer weights give
        // unit-variance pre-activations. The usual 1/sqrt(fan_in) scale would
        // leave softplus near its constant value and map every input to
        // almost the same direction.
        Ok(Self {
            w1: dense(d_f, d_hidden, 1.0)?,
            b1: Matrix::zeros(1, d_hidden),
            w2: dense(d_hidden, d_g, 1.0 / (d_hidden as f64).sqrt())?,
            b2: Matrix::zeros(1, d_g),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    fn list(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn list_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.list().iter().all(|m| m.is_finite())
    }
}

/// Projects one feature vector to a unit vector.
pub fn project(params: &ProjectorParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::shape(
            "project",
            format!("input of dim {}, expected {}", x.len(), params.input_dim()),
        ));
    }
    let u = normalized(x).ok_or_else(|| Error::DegenerateInput("cannot project a zero vector".into()))?;
    let hidden: Vec<f64> = (0..params.w1.cols())
        .map(|j| {
            softplus(params.b1.get(0, j) + u.iter().enumerate().map(|(i, v)| v * params.w1.get(i, j)).sum::<f64>())
        })
        .collect();
    let out: Vec<f64> = (0..params.w2.cols())
        .map(|j| {
            params.b2.get(0, j)
                + hidden
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * params.w2.get(i, j))
                    .sum::<f64>()
        })
        .collect();
    normalized(&out).ok_or_else(|| Error::DegenerateInput("projection collapsed to zero".into()))
}

/// Projects every row.
pub fn project_rows(params: &ProjectorParams, x: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(0, params.output_dim());
    for r in 0..x.rows() {
        out.push_row(&project(params, x.row(r))?)?;
    }
    Ok(out)
}

impl FeatureMap for ProjectorParams {
    fn map_rows(&self, x: &Matrix) -> Result<Matrix> {
        project_rows(self, x)
    }
}

/// `-log softmax_j(<z, delta_j>)[label]`.
pub fn loss_match(z: &[f64], label: usize, structure: &StructureMatrix) -> Result<f64> {
    let n = structure.num_classes();
    if label >= n {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    let logits: Vec<f64> = (0..n).map(|j| dot(z, &structure.column(j))).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Supervised contrastive loss over projected rows `z` with labels, plus
/// `anchors` (class id, unit vector) that act as extra positives for their
/// class and as contrast entries for everyone. Fails if any sample has no
/// positive at all.
pub fn loss_cont(z: &Matrix, labels: &[usize], anchors: &[(usize, Vec<f64>)], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    if z.rows() != labels.len() || z.rows() == 0 {
        return Err(Error::shape("loss_cont", "one label per nonempty row required"));
    }
    let b = z.rows();
    let mut total = 0.0;
    for i in 0..b {
        let mut entries: Vec<(f64, bool)> = Vec::with_capacity(b - 1 + anchors.len());
        for j in (0..b).filter(|j| *j != i) {
            entries.push((dot(z.row(i), z.row(j)) / tau, labels[j] == labels[i]));
        }
        for (c, a) in anchors {
            entries.push((dot(z.row(i), a) / tau, *c == labels[i]));
        }
        let positives = entries.iter().filter(|(_, p)| *p).count();
        if positives == 0 {
            return Err(Error::DegenerateBatch(format!("sample {i} has an empty positive set")));
        }
        let max = entries.iter().map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + entries.iter().map(|(s, _)| (s - max).exp()).sum::<f64>().ln();
        let pos_sum: f64 = entries.iter().filter(|(_, p)| *p).map(|(s, _)| s - lse).sum();
        total -= pos_sum / positives as f64;
    }
    Ok(total / b as f64)
}

/// A mini-batch of feature rows with global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

/// Losses of the taped objective on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    pub matching: f64,
    pub contrastive: f64,
    pub total: f64,
}

struct Graph {
    tape: Tape,
    params: [NodeId; 4],
    x: NodeId,
    structure: NodeId,
    anchors: NodeId,
    target_w: NodeId,
    contrast_mask: NodeId,
    positive_w: NodeId,
    matching: NodeId,
    contrastive: NodeId,
    total: NodeId,
}

impl Graph {
    fn build(tau: f64) -> Self {
        let mut t = Tape::new();
        let params = ["w1", "b1", "w2", "b2"].map(|n| t.input(n));
        let [w1, b1, w2, b2] = params;
        let x = t.input("features");
        let structure = t.input("structure_rows");
        let anchors = t.input("anchors");
        let target_w = t.input("target_weights");
        let contrast_mask = t.input("contrast_mask");
        let positive_w = t.input("positive_weights");

        let u = t.normalize_rows(x);
        let h = t.linear(u, w1, b1);
        let h = t.softplus(h);
        let o = t.linear(h, w2, b2);
        let z = t.normalize_rows(o);

        let logits = t.matmul_t(z, structure);
        let log_p = t.log_softmax_rows(logits, None);
        let picked = t.mul(target_w, log_p);
        let picked = t.sum(picked);
        let matching = t.scale(picked, -1.0);

        let zz = t.matmul_t(z, z);
        let za = t.matmul_t(z, anchors);
        let sims = t.concat_cols(zz, za);
        let sims = t.scale(sims, 1.0 / tau);
        let log_q = t.log_softmax_rows(sims, Some(contrast_mask));
        let pos = t.mul(positive_w, log_q);
        let pos = t.sum(pos);
        let contrastive = t.scale(pos, -1.0);
        let total = t.add(matching, contrastive);
        Self {
            tape: t,
            params,
            x,
            structure,
            anchors,
            target_w,
            contrast_mask,
            positive_w,
            matching,
            contrastive,
            total,
        }
    }
}

/// Matrices fed to the graph for one batch.
struct BatchFeeds {
    x: Matrix,
    structure: Matrix,
    anchors: Matrix,
    target_w: Matrix,
    contrast_mask: Matrix,
    positive_w: Matrix,
}

/// Precomputed per-session inputs shared by every batch.
struct SessionTargets {
    structure_rows: Matrix,
    column_of: BTreeMap<usize, usize>,
    anchor_rows: Matrix,
    anchor_class: Vec<Option<usize>>,
}

impl SessionTargets {
    fn new(structure: &StructureMatrix, anchor_classes: &[usize]) -> Result<Self> {
        let column_of: BTreeMap<usize, usize> =
            structure.class_ids().iter().enumerate().map(|(j, c)| (*c, j)).collect();
        let mut rows = Vec::new();
        let mut anchor_class = Vec::new();
        for c in anchor_classes {
            let j = *column_of.get(c).ok_or(Error::MissingClass(*c))?;
            rows.push(structure.column(j));
            anchor_class.push(Some(*c));
        }
        if rows.is_empty() {
            // A placeholder anchor that is masked out of every contrast set.
            rows.push(vec![0.0; structure.dim()]);
            anchor_class.push(None);
        }
        Ok(Self {
            structure_rows: structure.as_rows(),
            column_of,
            anchor_rows: Matrix::from_rows(&rows)?,
            anchor_class,
        })
    }

    /// Builds the feeds. Samples without any positive are dropped from the
    /// contrastive average (they still count for matching).
    fn feeds(&self, batch: &TrainBatch) -> Result<BatchFeeds> {
        let b = batch.labels.len();
        let n = self.structure_rows.rows();
        let m = self.anchor_rows.rows();
        let mut target_w = Matrix::zeros(b, n);
        for (i, l) in batch.labels.iter().enumerate() {
            let j = *self
                .column_of
                .get(l)
                .ok_or(Error::LabelOutOfRange { label: *l, classes: n })?;
            target_w.set_unchecked(i, j, 1.0 / b as f64);
        }
        let mut contrast_mask = Matrix::zeros(b, b + m);
        let mut positive_w = Matrix::zeros(b, b + m);
        let mut counts = vec![0usize; b];
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    contrast_mask.set_unchecked(i, j, 1.0);
                    if batch.labels[i] == batch.labels[j] {
                        positive_w.set_unchecked(i, j, 1.0);
                        counts[i] += 1;
                    }
                }
            }
            for (k, c) in self.anchor_class.iter().enumerate() {
                if let Some(c) = c {
                    contrast_mask.set_unchecked(i, b + k, 1.0);
                    if *c == batch.labels[i] {
                        positive_w.set_unchecked(i, b + k, 1.0);
                        counts[i] += 1;
                    }
                }
            }
        }
        let valid = counts.iter().filter(|c| **c > 0).count().max(1) as f64;
        for (i, c) in counts.iter().enumerate() {
            if *c > 0 {
                let w = 1.0 / (*c as f64 * valid);
                for j in 0..b + m {
                    if positive_w.get(i, j) != 0.0 {
                        positive_w.set_unchecked(i, j, w);
                    }
                }
            }
        }
        Ok(BatchFeeds {
            x: batch.features.clone(),
            structure: self.structure_rows.clone(),
            anchors: self.anchor_rows.clone(),
            target_w,
            contrast_mask,
            positive_w,
        })
    }
}

fn feed_list<'a>(g: &Graph, params: &'a ProjectorParams, f: &'a BatchFeeds) -> Vec<(NodeId, &'a Matrix)> {
    let mut feeds: Vec<(NodeId, &Matrix)> = g.params.iter().copied().zip(params.list()).collect();
    feeds.extend([
        (g.x, &f.x),
        (g.structure, &f.structure),
        (g.anchors, &f.anchors),
        (g.target_w, &f.target_w),
        (g.contrast_mask, &f.contrast_mask),
        (g.positive_w, &f.positive_w),
    ]);
    feeds
}

/// Evaluates the taped objective on one batch.
pub fn batch_losses(
    params: &ProjectorParams,
    batch: &TrainBatch,
    structure: &StructureMatrix,
    anchor_classes: &[usize],
    tau: f64,
) -> Result<BatchLosses> {
    let mut g = Graph::build(tau);
    let feeds = SessionTargets::new(structure, anchor_classes)?.feeds(batch)?;
    g.tape.forward(&feed_list(&g, params, &feeds))?;
    Ok(BatchLosses {
        matching: g.tape.scalar(g.matching)?,
        contrastive: g.tape.scalar(g.contrastive)?,
        total: g.tape.scalar(g.total)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Matching,
    Contrastive,
    Total,
}

/// Finite-difference check of one loss term over all projector parameters.
pub fn loss_grad_check(
    params: &ProjectorParams,
    batch: &TrainBatch,
    structure: &StructureMatrix,
    anchor_classes: &[usize],
    tau: f64,
    term: LossTerm,
    h: f64,
) -> Result<f64> {
    let mut g = Graph::build(tau);
    let feeds = SessionTargets::new(structure, anchor_classes)?.feeds(batch)?;
    let loss = match term {
        LossTerm::Matching => g.matching,
        LossTerm::Contrastive => g.contrastive,
        LossTerm::Total => g.total,
    };
    let ids = g.params;
    let list = feed_list(&g, params, &feeds);
    grad_check(&mut g.tape, loss, &list, &ids, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub tau: f64,
    pub seed: u64,
}

/// Class-balanced batches: per-class shuffled index lists are interleaved
/// round-robin, then cut into consecutive chunks.
pub fn balanced_batches(labels: &[usize], batch_size: usize, seed: u64, tags: &[u64]) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    let mut r = rng::stream(seed, tags);
    let mut lists: Vec<Vec<usize>> = by_class.into_values().collect();
    for l in &mut lists {
        l.shuffle(&mut r);
    }
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(labels.len());
    for k in 0..longest {
        for l in &lists {
            if let Some(i) = l.get(k) {
                order.push(*i);
            }
        }
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Minimizes matching + contrastive loss. `data(epoch)` supplies the
/// (freshly resampled) training set of each epoch. Returns the trained
/// parameters and the mean loss of every epoch.
pub fn train_projector(
    data: &mut dyn FnMut(usize) -> Result<FeatureSet>,
    structure: &StructureMatrix,
    anchor_classes: &[usize],
    init: ProjectorParams,
    cfg: &ProjectorTrainConfig,
) -> Result<(ProjectorParams, Vec<f64>)> {
    if !(cfg.tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {}", cfg.tau)));
    }
    let check = structure.equiangular_deviation();
    if check > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "target structure is not equiangular (deviation {check:.3e})"
        )));
    }
    let targets = SessionTargets::new(structure, anchor_classes)?;
    let mut g = Graph::build(cfg.tau);
    let mut params = init;
    let mut opt = Sgd::new(cfg.momentum, &params.list());
    let mut schedule: Option<CosineSchedule> = None;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let set = data(epoch)?;
        if set.is_empty() {
            return Err(Error::DegenerateBatch("empty training set".into()));
        }
        let batches = balanced_batches(set.labels(), cfg.batch_size, cfg.seed, &[0xba7c, epoch as u64]);
        let sched = *schedule.get_or_insert(CosineSchedule {
            max_lr: cfg.max_lr,
            warmup_steps: cfg.warmup_epochs * batches.len(),
            total_steps: cfg.epochs * batches.len(),
        });
        let mut sum = 0.0;
        for idx in &batches {
            let batch = TrainBatch {
                features: set.features().select_rows(idx),
                labels: idx.iter().map(|i| set.labels()[*i]).collect(),
            };
            let feeds = targets.feeds(&batch)?;
            g.tape.forward(&feed_list(&g, &params, &feeds))?;
            let loss = g.tape.scalar(g.total)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss });
            }
            sum += loss;
            let grads = g.tape.backward(g.total)?;
            let grad_list: Vec<&Matrix> = g.params.iter().map(|id| grads.get(*id)).collect();
            opt.step(sched.lr(step), &mut params.list_mut(), &grad_list);
            step += 1;
        }
        let mean = sum / batches.len() as f64;
        debug!("projector epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    if !params.is_finite() {
        return Err(Error::TrainingDiverged { step, loss: f64::NAN });
    }
    if let (Some(first), Some(last)) = (epoch_losses.first(), epoch_losses.last()) {
        info!(
            "projector: loss {first:.4} -> {last:.4} over {} epochs",
            epoch_losses.len()
        );
    }
    Ok((params, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_optimal_structure;
    use crate::tensor::norm;

    fn two_class_structure() -> StructureMatrix {
        let cols = Matrix::from_columns(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]).unwrap();
        StructureMatrix::new(cols, vec![0, 1]).unwrap()
    }

    #[test]
    fn projection_is_unit_and_scale_invariant() {
        let p = ProjectorParams::init(5, 5, 4, 1).unwrap();
        let x = [0.3, -1.0, 2.0, 0.0, 0.7];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let z = project(&p, &x).unwrap();
        assert!((norm(&z) - 1.0).abs() < 1e-10);
        let z2 = project(&p, &x2).unwrap();
        assert!(z.iter().zip(&z2).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(project(&p, &[0.0; 5]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn projection_is_bit_stable() {
        let x = [0.1, 0.2, -0.3, 0.4];
        let a = project(&ProjectorParams::init(4, 4, 3, 9).unwrap(), &x).unwrap();
        let b = project(&ProjectorParams::init(4, 4, 3, 9).unwrap(), &x).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn matching_loss_on_two_class_toy() {
        let s = two_class_structure();
        let l = loss_match(&[1.0, 0.0, 0.0], 0, &s).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.126928).abs() < 1e-6);
        let ortho = loss_match(&[0.0, 1.0, 0.0], 1, &s).unwrap();
        assert!((ortho - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            loss_match(&[1.0, 0.0, 0.0], 2, &s),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn matching_argmin_is_ncm_argmax() {
        let s = random_optimal_structure(5, 8, 3).unwrap();
        let mut g = rng::gaussian(2, &[]);
        for _ in 0..50 {
            let z = normalized(&g.vector(8)).unwrap();
            let losses: Vec<f64> = (0..5).map(|k| loss_match(&z, k, &s).unwrap()).collect();
            let dots: Vec<f64> = (0..5).map(|k| dot(&z, &s.column(k))).collect();
            let argmin = (0..5).min_by(|a, b| losses[*a].total_cmp(&losses[*b])).unwrap();
            let argmax = (0..5).max_by(|a, b| dots[*a].total_cmp(&dots[*b])).unwrap();
            assert_eq!(argmin, argmax);
        }
    }

    #[test]
    fn contrastive_loss_two_samples_by_hand() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let tau = 0.5;
        // Same class: each sample's only contrast entry is the other one,
        // which is also its positive, so each term is -log 1 = 0.
        assert!(loss_cont(&z, &[0, 0], &[], tau).unwrap().abs() < 1e-15);
        // Different classes with one anchor per class.
        let anchors = vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])];
        let l = loss_cont(&z, &[0, 1], &anchors, tau).unwrap();
        let s0 = [0.6 / tau, 1.0 / tau, 0.0 / tau];
        let s1 = [0.6 / tau, 0.6 / tau, 0.8 / tau];
        let lse = |s: &[f64]| s.iter().map(|v| v.exp()).sum::<f64>().ln();
        let expect = ((lse(&s0) - s0[1]) + (lse(&s1) - s1[2])) / 2.0;
        assert!((l - expect).abs() < 1e-12);
        assert!(matches!(
            loss_cont(&z, &[0, 1], &[], tau),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn taped_losses_match_plain_evaluation() {
        let s = random_optimal_structure(4, 6, 1).unwrap();
        let p = ProjectorParams::init(5, 5, 6, 2).unwrap();
        let mut g = rng::gaussian(3, &[]);
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let features = Matrix::new(8, 5, g.vector(40)).unwrap();
        let batch = TrainBatch {
            features: features.clone(),
            labels: labels.clone(),
        };
        let taped = batch_losses(&p, &batch, &s, &[2, 3], 0.2).unwrap();
        let z = project_rows(&p, &features).unwrap();
        let plain_match: f64 = (0..8)
            .map(|i| loss_match(z.row(i), labels[i], &s).unwrap())
            .sum::<f64>()
            / 8.0;
        let anchors = vec![(2, s.column(2)), (3, s.column(3))];
        let plain_cont = loss_cont(&z, &labels, &anchors, 0.2).unwrap();
        assert!((taped.matching - plain_match).abs() < 1e-12);
        assert!((taped.contrastive - plain_cont).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_minimize_contrastive_loss() {
        let z0 = normalized(&[1.0, 2.0, 0.5]).unwrap();
        let z = Matrix::from_rows(&[z0.clone(), z0.clone(), z0.clone()]).unwrap();
        let base = loss_cont(&z, &[0, 0, 0], &[], 0.1).unwrap();
        let mut g = rng::gaussian(8, &[]);
        for _ in 0..20 {
            let moved: Vec<f64> = z0.iter().zip(g.vector(3)).map(|(a, b)| a + 0.05 * b).collect();
            let z = Matrix::from_rows(&[normalized(&moved).unwrap(), z0.clone(), z0.clone()]).unwrap();
            assert!(loss_cont(&z, &[0, 0, 0], &[], 0.1).unwrap() >= base - 1e-12);
        }
    }

    #[test]
    fn anchor_pull_decreases_contrastive_loss() {
        // Class-1 sample rotates toward its anchor e1 inside the e1-e2
        // plane, which keeps every other similarity fixed.
        let anchors = vec![(1, vec![1.0, 0.0, 0.0])];
        let loss_at = |theta: f64| {
            let z = Matrix::from_rows(&[
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0],
                vec![theta.cos(), theta.sin(), 0.0],
            ])
            .unwrap();
            loss_cont(&z, &[0, 0, 1], &anchors, 0.5).unwrap()
        };
        let mut prev = loss_at(1.5);
        for k in 1..=15 {
            let cur = loss_at(1.5 - 0.1 * k as f64);
            assert!(cur < prev);
            prev = cur;
        }
        let no_positive = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert!(loss_cont(&no_positive, &[0, 2], &anchors, 0.5).is_err());
    }

    #[test]
    fn losses_pass_gradient_check() {
        let s = random_optimal_structure(3, 5, 4).unwrap();
        let p = ProjectorParams::init(4, 4, 5, 5).unwrap();
        let mut g = rng::gaussian(6, &[]);
        let batch = TrainBatch {
            features: Matrix::new(6, 4, g.vector(24)).unwrap(),
            labels: vec![0, 1, 2, 0, 1, 2],
        };
        for term in [LossTerm::Matching, LossTerm::Contrastive, LossTerm::Total] {
            let err = loss_grad_check(&p, &batch, &s, &[2], 0.5, term, 1e-5).unwrap();
            assert!(err < 1e-4, "{term:?}: {err}");
        }
    }

    #[test]
    fn batches_are_balanced_and_cover_everything() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let batches = balanced_batches(&labels, 6, 1, &[0]);
        assert_eq!(batches.len(), 5);
        for b in &batches {
            for c in 0..3 {
                assert_eq!(b.iter().filter(|i| labels[**i] == c).count(), 2);
            }
        }
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    fn toy_set() -> FeatureSet {
        let mut set = FeatureSet::new(4);
        let mut g = rng::gaussian(12, &[]);
        for c in 0..3 {
            for _ in 0..8 {
                let mut x = g.vector(4).iter().map(|v| 0.3 * v).collect::<Vec<_>>();
                x[c] += 2.0;
                set.push(c, &format!("c{c}"), &x).unwrap();
            }
        }
        set
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged_and_training_descends() {
        let s = random_optimal_structure(3, 5, 0).unwrap();
        let init = ProjectorParams::init(4, 4, 5, 1).unwrap();
        let set = toy_set();
        let mut cfg = ProjectorTrainConfig {
            epochs: 1,
            batch_size: 24,
            max_lr: 0.0,
            warmup_epochs: 0,
            momentum: 0.0,
            tau: 0.5,
            seed: 0,
        };
        let (same, _) = train_projector(&mut |_| Ok(set.clone()), &s, &[], init.clone(), &cfg).unwrap();
        assert_eq!(same, init);

        cfg.max_lr = 0.05;
        cfg.epochs = 1;
        let (trained, _) = train_projector(&mut |_| Ok(set.clone()), &s, &[], init.clone(), &cfg).unwrap();
        let batch = TrainBatch {
            features: set.features().clone(),
            labels: set.labels().to_vec(),
        };
        let before = batch_losses(&init, &batch, &s, &[], 0.5).unwrap().total;
        let after = batch_losses(&trained, &batch, &s, &[], 0.5).unwrap().total;
        assert!(after < before, "{after} >= {before}");
    }
}
