//! Memory-aware prototype calibration.
//!
//! A few-shot prototype is completed from base-class knowledge: attributes
//! associated with the class are scored by a semantic and a visual
//! cross-attention term, the encoded attribute prototypes are aggregated
//! with the softmax of those scores, added to the encoded prototype and
//! decoded back to feature space:
//!
//! ```text
//! w_i  = [<g1a(s_i), g1c(s_k)>/(2 sqrt d_s) + <g2a(f_i), g2c(p_k)>/(2 sqrt d_f)] r_ik
//! xi_k = h_e(p_k) + sum_i softmax(w)_i h_e(f_i)      (unmasked i only)
//! p^_k = h_d(xi_k)
//! ```
//!
//! The encoder is one softplus layer `d_f -> d_f/2`; the decoder is linear.
//! Row-vector convention throughout: `y = x W + b`.

use log::{debug, info};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributePool, SemanticKnowledge};
use crate::error::{Error, Result};
use crate::optim::{CosineSchedule, Sgd};
use crate::rng;
use crate::session::FeatureSet;
use crate::tensor::{dot, grad_check, softplus, Matrix, NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcParams {
    /// Encoder `d_f x h`, `1 x h`.
    pub enc_w: Matrix,
    pub enc_b: Matrix,
    /// Decoder `h x d_f`, `1 x d_f`.
    pub dec_w: Matrix,
    pub dec_b: Matrix,
    /// Semantic attention maps, `d_s x d_attn`.
    pub sem_attr: Matrix,
    pub sem_class: Matrix,
    /// Visual attention maps, `d_f x d_attn`.
    pub vis_attr: Matrix,
    pub vis_class: Matrix,
}

impl MpcParams {
    /// Seeded initialization; `d_attn = d_s`, hidden width `d_f / 2`.
    pub fn init(d_f: usize, d_s: usize, seed: u64) -> Result<Self> {
        let h = d_f / 2;
        if h == 0 || d_s == 0 {
            return Err(Error::InvalidConfig(format!(
                "d_f = {d_f}, d_s = {d_s} too small for calibration"
            )));
        }
        let mut g = rng::gaussian(seed, &[0x3c]);
        let mut dense = |rows: usize, cols: usize| {
            let s = 1.0 / (rows as f64).sqrt();
            Matrix::new(rows, cols, g.vector(rows * cols)).map(|m| m.scale(s))
        };
        Ok(Self {
            enc_w: dense(d_f, h)?,
            enc_b: Matrix::zeros(1, h),
            dec_w: dense(h, d_f)?,
            dec_b: Matrix::zeros(1, d_f),
            sem_attr: dense(d_s, d_s)?,
            sem_class: dense(d_s, d_s)?,
            vis_attr: dense(d_f, d_s)?,
            vis_class: dense(d_f, d_s)?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.enc_w.rows()
    }

    pub fn semantic_dim(&self) -> usize {
        self.sem_attr.rows()
    }

    fn list(&self) -> [&Matrix; 8] {
        [
            &self.enc_w,
            &self.enc_b,
            &self.dec_w,
            &self.dec_b,
            &self.sem_attr,
            &self.sem_class,
            &self.vis_attr,
            &self.vis_class,
        ]
    }

    fn list_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.dec_w,
            &mut self.dec_b,
            &mut self.sem_attr,
            &mut self.sem_class,
            &mut self.vis_attr,
            &mut self.vis_class,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.list().iter().all(|m| m.is_finite())
    }

    /// `h_e(x)` for a single row.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let h = self.enc_w.cols();
        (0..h)
            .map(|j| {
                let mut acc = self.enc_b.get(0, j);
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * self.enc_w.get(i, j);
                }
                softplus(acc)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeSource {
    Raw,
    Calibrated,
    BaseExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub mean: Vec<f64>,
    pub source: PrototypeSource,
    pub shot_count: usize,
}

/// The calibration network recorded on a tape, batched over classes.
struct Graph {
    tape: Tape,
    params: [NodeId; 8],
    protos: NodeId,
    class_sem: NodeId,
    attr_vis: NodeId,
    attr_sem: NodeId,
    mask: NodeId,
    target: NodeId,
    output: NodeId,
    loss: NodeId,
}

impl Graph {
    fn build(d_f: usize, d_s: usize) -> Self {
        let mut t = Tape::new();
        let names = [
            "enc_w",
            "enc_b",
            "dec_w",
            "dec_b",
            "sem_attr",
            "sem_class",
            "vis_attr",
            "vis_class",
        ];
        let params = names.map(|n| t.input(n));
        let [enc_w, enc_b, dec_w, dec_b, sem_attr, sem_class, vis_attr, vis_class] = params;
        let protos = t.input("prototypes");
        let class_sem = t.input("class_semantic");
        let attr_vis = t.input("attribute_visual");
        let attr_sem = t.input("attribute_semantic");
        let mask = t.input("mask");
        let target = t.input("target");

        let enc_p = t.linear(protos, enc_w, enc_b);
        let enc_p = t.softplus(enc_p);
        let enc_f = t.linear(attr_vis, enc_w, enc_b);
        let enc_f = t.softplus(enc_f);

        let q_sem = t.matmul(class_sem, sem_class);
        let k_sem = t.matmul(attr_sem, sem_attr);
        let sem = t.matmul_t(q_sem, k_sem);
        let sem = t.scale(sem, 1.0 / (2.0 * (d_s as f64).sqrt()));
        let q_vis = t.matmul(protos, vis_class);
        let k_vis = t.matmul(attr_vis, vis_attr);
        let vis = t.matmul_t(q_vis, k_vis);
        let vis = t.scale(vis, 1.0 / (2.0 * (d_f as f64).sqrt()));
        let scores = t.add(sem, vis);
        let attention = t.softmax_rows(scores, Some(mask));

        let aggregated = t.matmul(attention, enc_f);
        let xi = t.add(enc_p, aggregated);
        let output = t.linear(xi, dec_w, dec_b);
        let diff = t.sub(output, target);
        let sq = t.square(diff);
        let loss = t.mean(sq);
        Self {
            tape: t,
            params,
            protos,
            class_sem,
            attr_vis,
            attr_sem,
            mask,
            target,
            output,
            loss,
        }
    }

    fn feeds<'a>(&self, params: &'a MpcParams, batch: &'a Episode) -> Vec<(NodeId, &'a Matrix)> {
        let mut feeds: Vec<(NodeId, &Matrix)> = self.params.iter().copied().zip(params.list()).collect();
        feeds.extend([
            (self.protos, &batch.prototypes),
            (self.class_sem, &batch.class_semantic),
            (self.attr_vis, &batch.attribute_visual),
            (self.attr_sem, &batch.attribute_semantic),
            (self.mask, &batch.mask),
            (self.target, &batch.target),
        ]);
        feeds
    }
}

/// One batch of calibration tasks: rows are classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub prototypes: Matrix,
    pub class_semantic: Matrix,
    pub attribute_visual: Matrix,
    pub attribute_semantic: Matrix,
    /// `C x N_a`, 1 where the class has the attribute.
    pub mask: Matrix,
    pub target: Matrix,
}

/// Mean squared completion error of `params` on an episode.
pub fn meta_loss(params: &MpcParams, episode: &Episode) -> Result<f64> {
    let mut g = Graph::build(params.feature_dim(), params.semantic_dim());
    let feeds = g.feeds(params, episode);
    g.tape.forward(&feeds)?;
    g.tape.scalar(g.loss)
}

/// Finite-difference check of the meta-loss gradient over all parameters.
pub fn meta_loss_grad_check(params: &MpcParams, episode: &Episode, h: f64) -> Result<f64> {
    let mut g = Graph::build(params.feature_dim(), params.semantic_dim());
    let feeds = g.feeds(params, episode);
    let ids = g.params;
    grad_check(&mut g.tape, g.loss, &feeds, &ids, h)
}

/// Masked relevance scores of every pooled attribute for one class.
/// Masked entries are exactly zero.
pub fn relevance_weights(
    prototype: &[f64],
    class_semantic: &[f64],
    mask: &[f64],
    pool: &AttributePool,
    params: &MpcParams,
) -> Result<Vec<f64>> {
    if mask.len() != pool.len() {
        return Err(Error::shape("relevance_weights", "mask length differs from pool size"));
    }
    if mask.iter().all(|m| *m == 0.0) {
        return Err(Error::AllMasked(pool.len()));
    }
    let d_f = prototype.len() as f64;
    let d_s = class_semantic.len() as f64;
    let q_sem = row_times(class_semantic, &params.sem_class);
    let q_vis = row_times(prototype, &params.vis_class);
    Ok((0..pool.len())
        .map(|i| {
            if mask[i] == 0.0 {
                return 0.0;
            }
            let k_sem = row_times(pool.semantic().row(i), &params.sem_attr);
            let k_vis = row_times(pool.visual().row(i), &params.vis_attr);
            (dot(&k_sem, &q_sem) / (2.0 * d_s.sqrt()) + dot(&k_vis, &q_vis) / (2.0 * d_f.sqrt())) * mask[i]
        })
        .collect())
}

fn row_times(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum())
        .collect()
}

/// Completes one prototype. Fails with `AllMasked` for a class that shares
/// no attribute with the pool; callers fall back to the raw prototype.
pub fn calibrate(
    prototype: &[f64],
    class_semantic: &[f64],
    mask: &[f64],
    pool: &AttributePool,
    params: &MpcParams,
) -> Result<Vec<f64>> {
    if mask.len() != pool.len() {
        return Err(Error::shape("calibrate", "mask length differs from pool size"));
    }
    if mask.iter().all(|m| *m == 0.0) {
        return Err(Error::AllMasked(pool.len()));
    }
    let episode = Episode {
        prototypes: Matrix::row_vector(prototype)?,
        class_semantic: Matrix::row_vector(class_semantic)?,
        attribute_visual: pool.visual().clone(),
        attribute_semantic: pool.semantic().clone(),
        mask: Matrix::row_vector(mask)?,
        target: Matrix::zeros(1, prototype.len()),
    };
    let mut g = Graph::build(params.feature_dim(), params.semantic_dim());
    let feeds = g.feeds(params, &episode);
    g.tape.forward(&feeds)?;
    Ok(g.tape.value(g.output)?.row(0).to_vec())
}

/// `alpha * p + (1 - alpha) * p_hat`.
pub fn blend(p: &[f64], p_hat: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if p.len() != p_hat.len() {
        return Err(Error::shape("blend", "prototype lengths differ"));
    }
    Ok(p.iter()
        .zip(p_hat)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect())
}

/// Calibrates and blends every raw prototype whose class appears in
/// `knowledge`. Uncovered classes keep their raw prototype.
pub fn calibrate_all(
    raw: &[Prototype],
    knowledge: &SemanticKnowledge,
    params: &MpcParams,
    alpha: f64,
) -> Result<Vec<Prototype>> {
    raw.iter()
        .map(|p| {
            let k = knowledge.position(p.class_id).ok_or(Error::MissingClass(p.class_id))?;
            let mask = knowledge.assoc.column(k);
            let p_hat = match calibrate(&p.mean, knowledge.class_semantic.row(k), &mask, &knowledge.pool, params) {
                Ok(v) => v,
                Err(Error::AllMasked(_)) => {
                    debug!("class {} shares no pooled attribute; using raw prototype", p.class_id);
                    p.mean.clone()
                }
                Err(e) => return Err(e),
            };
            Ok(Prototype {
                class_id: p.class_id,
                mean: blend(&p.mean, &p_hat, alpha)?,
                source: PrototypeSource::Calibrated,
                shot_count: p.shot_count,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub shots: usize,
    pub episodes: usize,
    pub max_lr: f64,
    pub warmup: usize,
    pub momentum: f64,
    pub seed: u64,
}

/// Episodic training on base classes: every episode draws `shots` samples
/// of each base class, and the network learns to map the few-shot mean to
/// the full-data mean. Returns the trained parameters and the loss trace.
pub fn meta_train(
    base: &FeatureSet,
    knowledge: &SemanticKnowledge,
    init: MpcParams,
    cfg: &MetaTrainConfig,
) -> Result<(MpcParams, Vec<f64>)> {
    let classes = base.classes();
    let mut indices = Vec::with_capacity(classes.len());
    let mut targets = Vec::with_capacity(classes.len());
    let mut semantics = Vec::with_capacity(classes.len());
    let mut masks = Vec::with_capacity(classes.len());
    for &c in &classes {
        let idx = base.indices_of(c);
        if idx.len() <= cfg.shots {
            return Err(Error::InsufficientSamples {
                class: base.class_name(c).unwrap_or_default().to_string(),
                available: idx.len(),
                required: cfg.shots + 1,
            });
        }
        let rows = base.features().select_rows(&idx);
        targets.push(column_mean(&rows));
        let k = knowledge.position(c).ok_or(Error::MissingClass(c))?;
        semantics.push(knowledge.class_semantic.row(k).to_vec());
        masks.push(knowledge.assoc.column(k));
        indices.push(idx);
    }
    let d_f = base.dim();
    let fixed = Episode {
        prototypes: Matrix::zeros(classes.len(), d_f),
        class_semantic: Matrix::from_rows(&semantics)?,
        attribute_visual: knowledge.pool.visual().clone(),
        attribute_semantic: knowledge.pool.semantic().clone(),
        mask: Matrix::from_rows(&masks)?,
        target: Matrix::from_rows(&targets)?,
    };

    let mut params = init;
    let mut g = Graph::build(params.feature_dim(), params.semantic_dim());
    let schedule = CosineSchedule {
        max_lr: cfg.max_lr,
        warmup_steps: cfg.warmup,
        total_steps: cfg.episodes,
    };
    let mut opt = Sgd::new(cfg.momentum, &params.list());
    let mut trace = Vec::with_capacity(cfg.episodes);
    let mut episode = fixed;
    for step in 0..cfg.episodes {
        let mut r = rng::stream(cfg.seed, &[0x3e7a, step as u64]);
        let mut protos = Vec::with_capacity(classes.len());
        for idx in &indices {
            let pick: Vec<usize> = sample_indices(&mut r, idx.len(), cfg.shots)
                .into_iter()
                .map(|i| idx[i])
                .collect();
            protos.push(column_mean(&base.features().select_rows(&pick)));
        }
        episode.prototypes = Matrix::from_rows(&protos)?;
        let feeds = g.feeds(&params, &episode);
        g.tape.forward(&feeds)?;
        let loss = g.tape.scalar(g.loss)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        trace.push(loss);
        let grads = g.tape.backward(g.loss)?;
        let grad_list: Vec<&Matrix> = g.params.iter().map(|id| grads.get(*id)).collect();
        opt.step(schedule.lr(step), &mut params.list_mut(), &grad_list);
        if step % 500 == 0 {
            debug!("meta-train episode {step}: loss {loss:.6}");
        }
    }
    if !params.is_finite() {
        return Err(Error::TrainingDiverged {
            step: cfg.episodes,
            loss: f64::NAN,
        });
    }
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        info!(
            "meta-training: loss {first:.6} -> {last:.6} over {} episodes",
            trace.len()
        );
    }
    Ok((params, trace))
}

pub(crate) fn column_mean(rows: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; rows.cols()];
    for r in 0..rows.rows() {
        mean.iter_mut().zip(rows.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows.rows() as f64);
    mean
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal_pool(names: &[&str], d_f: usize, d_s: usize) -> AttributePool {
        let n = names.len();
        let mut sem = Matrix::zeros(n, d_s);
        let mut vis = Matrix::zeros(n, d_f);
        for i in 0..n {
            sem.set(i, i, 1.0).unwrap();
            vis.set(i, i, 1.0).unwrap();
        }
        AttributePool::from_parts(names.iter().map(|s| s.to_string()).collect(), sem, vis).unwrap()
    }

    fn identity_attention(d_f: usize, d_s: usize) -> MpcParams {
        let mut p = MpcParams::init(d_f, d_s, 0).unwrap();
        p.sem_attr = Matrix::identity(d_s);
        p.sem_class = Matrix::identity(d_s);
        p.vis_attr = Matrix::new(
            d_f,
            d_s,
            Matrix::identity(d_f)
                .select_columns(&(0..d_s).collect::<Vec<_>>())
                .into_data(),
        )
        .unwrap();
        p.vis_class = p.vis_attr.clone();
        p
    }

    #[test]
    fn all_masked_is_reported() {
        let pool = orthonormal_pool(&["a", "b"], 4, 4);
        let p = MpcParams::init(4, 4, 1).unwrap();
        let e = relevance_weights(&[1.0; 4], &[1.0; 4], &[0.0, 0.0], &pool, &p);
        assert!(matches!(e, Err(Error::AllMasked(2))));
        assert!(matches!(
            calibrate(&[1.0; 4], &[1.0; 4], &[0.0, 0.0], &pool, &p),
            Err(Error::AllMasked(_))
        ));
    }

    #[test]
    fn identity_maps_give_sum_of_scaled_terms() {
        let (d_f, d_s) = (4, 4);
        let pool = orthonormal_pool(&["a", "b", "c"], d_f, d_s);
        let params = identity_attention(d_f, d_s);
        let w = relevance_weights(
            &[1.0, 0.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0, 0.0],
            &[1.0, 1.0, 0.0],
            &pool,
            &params,
        )
        .unwrap();
        let expect = 1.0 / (2.0 * 2.0) + 1.0 / (2.0 * 2.0);
        assert!((w[0] - expect).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn semantic_term_is_linear_in_class_embedding() {
        let (d_f, d_s) = (4, 4);
        let pool = orthonormal_pool(&["a"], d_f, d_s);
        let params = identity_attention(d_f, d_s);
        let p = [0.0, 1.0, 0.0, 0.0];
        let w1 = relevance_weights(&p, &[1.0, 0.0, 0.0, 0.0], &[1.0], &pool, &params).unwrap()[0];
        let w3 = relevance_weights(&p, &[3.0, 0.0, 0.0, 0.0], &[1.0], &pool, &params).unwrap()[0];
        assert!((w3 - 3.0 * w1).abs() < 1e-15);
    }

    #[test]
    fn single_attribute_adds_its_encoding() {
        let (d_f, d_s) = (6, 3);
        let pool = orthonormal_pool(&["a", "b"], d_f, d_s);
        let params = MpcParams::init(d_f, d_s, 7).unwrap();
        let p = [0.3, -0.2, 0.5, 0.1, 0.0, 0.9];
        let out = calibrate(&p, &[0.1, 0.2, 0.3], &[0.0, 1.0], &pool, &params).unwrap();
        let xi: Vec<f64> = params
            .encode(&p)
            .iter()
            .zip(params.encode(pool.visual().row(1)))
            .map(|(a, b)| a + b)
            .collect();
        for j in 0..d_f {
            let mut y = params.dec_b.get(0, j);
            for (i, x) in xi.iter().enumerate() {
                y += x * params.dec_w.get(i, j);
            }
            assert!((out[j] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn blend_arithmetic() {
        assert_eq!(blend(&[1.0, 0.0], &[0.0, 1.0], 0.6).unwrap(), vec![0.6, 0.4]);
        assert_eq!(blend(&[1.0, 2.0], &[5.0, 5.0], 1.0).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(blend(&[1.0], &[1.0], 1.5), Err(Error::InvalidConfig(_))));
    }

    fn toy_episode(d_f: usize, d_s: usize, classes: usize, attrs: usize, seed: u64) -> Episode {
        let mut g = rng::gaussian(seed, &[]);
        let mut m = |r: usize, c: usize| Matrix::new(r, c, g.vector(r * c)).unwrap();
        let mut mask = Matrix::zeros(classes, attrs);
        for c in 0..classes {
            mask.set(c, c % attrs, 1.0).unwrap();
            mask.set(c, (c + 1) % attrs, 1.0).unwrap();
        }
        Episode {
            prototypes: m(classes, d_f),
            class_semantic: m(classes, d_s),
            attribute_visual: m(attrs, d_f),
            attribute_semantic: m(attrs, d_s),
            mask,
            target: m(classes, d_f),
        }
    }

    #[test]
    fn meta_loss_gradient_matches_finite_differences() {
        let params = MpcParams::init(6, 3, 2).unwrap();
        let ep = toy_episode(6, 3, 3, 4, 9);
        assert!(meta_loss_grad_check(&params, &ep, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn small_step_decreases_meta_loss() {
        let d_f = 6;
        let mut base = FeatureSet::new(d_f);
        let mut g = rng::gaussian(4, &[]);
        for c in 0..3 {
            for _ in 0..4 {
                let x: Vec<f64> = g.vector(d_f).iter().map(|v| v + c as f64).collect();
                base.push(c, &format!("c{c}"), &x).unwrap();
            }
        }
        let pool = orthonormal_pool(&["a", "b", "c"], d_f, 3);
        let mut r = Matrix::zeros(3, 3);
        for c in 0..3 {
            r.set(c, c, 1.0).unwrap();
        }
        let knowledge = SemanticKnowledge {
            pool,
            class_semantic: Matrix::identity(3),
            assoc: crate::attributes::AssociationMatrix::new(r, vec![0, 1, 2]).unwrap(),
        };
        let init = MpcParams::init(d_f, 3, 5).unwrap();
        let cfg = MetaTrainConfig {
            shots: 2,
            episodes: 1,
            max_lr: 1e-2,
            warmup: 1,
            momentum: 0.0,
            seed: 0,
        };
        let (trained, trace) = meta_train(&base, &knowledge, init.clone(), &cfg).unwrap();
        // Re-evaluate the same episode before and after the step.
        let cfg_eval = MetaTrainConfig { max_lr: 0.0, ..cfg };
        let (_, before) = meta_train(&base, &knowledge, init, &cfg_eval).unwrap();
        let (_, after) = meta_train(&base, &knowledge, trained, &cfg_eval).unwrap();
        assert_eq!(before[0], trace[0]);
        assert!(after[0] < before[0]);

        let too_many = MetaTrainConfig { shots: 4, ..cfg };
        assert!(matches!(
            meta_train(&base, &knowledge, MpcParams::init(d_f, 3, 5).unwrap(), &too_many),
            Err(Error::InsufficientSamples { .. })
        ));
    }
}
