//! The session loop: base-session setup followed by incremental sessions.
//!
//! Per incremental session: calibrate the novel prototypes, transfer
//! covariances, extend the repository, resample the augmented set, update
//! the target structure, fine-tune the projector and refresh the replay
//! buffer — in that order.

use std::fmt::Write as _;

use log::{info, warn};

use crate::attributes::{build_knowledge, AttributePool, AttributeTable, SemanticEmbeddings, SemanticKnowledge};
use crate::augment::{
    base_stats, mean_and_variance, novel_covariance, sample_augmented, transfer_weights, ClassStats,
    PrototypeRepository, SampleCounts,
};
use crate::error::{Error, Result};
use crate::eval::{ncm_rows, session_metrics, similarity_stats, RunReport, SessionRecord};
use crate::geometry::{
    fixed_structure, initial_structure, random_optimal_structure, smr, theorem1_update, InitialStructure,
    StructureMatrix,
};
use crate::mpc::{calibrate_all, meta_train, MetaTrainConfig, MpcParams, Prototype, PrototypeSource};
use crate::projector::{project_rows, train_projector, ProjectorParams, ProjectorTrainConfig};
use crate::rng::derive_seed;
use crate::session::config::{SessionConfig, Strategy};
use crate::session::FeatureSet;
use crate::tensor::{dot, Matrix};

/// Attribute table and embeddings shared by all sessions.
#[derive(Debug, Clone)]
pub struct KnowledgeInputs {
    pub table: AttributeTable,
    pub embeddings: SemanticEmbeddings,
}

/// Everything carried from one session to the next.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub cfg: SessionConfig,
    pub strategy: Strategy,
    /// Index of the last completed session.
    pub t: usize,
    pub pool: AttributePool,
    pub mpc: MpcParams,
    pub projector: ProjectorParams,
    pub repo: PrototypeRepository,
    pub structure: StructureMatrix,
    /// Raw exemplars of novel classes, with global labels.
    pub replay: FeatureSet,
    /// Class names by global id.
    pub class_names: Vec<String>,
    fixed: Option<StructureMatrix>,
}

impl SessionState {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.projector.input_dim()
    }

    pub fn is_base(&self, class_id: usize) -> bool {
        class_id < self.cfg.base_classes
    }
}

/// Diagnostics of one session, rendered into the per-session log.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub t: usize,
    pub classes: usize,
    pub smr: f64,
    pub rank_deficient: bool,
    pub optimality: f64,
    pub meta_loss: Option<(f64, f64)>,
    pub epoch_losses: Vec<f64>,
    pub uncovered: Vec<usize>,
}

impl SessionLog {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "session {}", self.t);
        let _ = writeln!(s, "classes {}", self.classes);
        if let Some((a, b)) = self.meta_loss {
            let _ = writeln!(s, "calibration_loss {a:.9} -> {b:.9}");
        }
        if !self.uncovered.is_empty() {
            let _ = writeln!(s, "uncovered_classes {:?}", self.uncovered);
        }
        let _ = writeln!(s, "smr {:.9}", self.smr);
        let _ = writeln!(s, "rank_deficient {}", self.rank_deficient);
        let _ = writeln!(s, "optimality_deviation {:.3e}", self.optimality);
        for (e, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(s, "epoch {e} loss {l:.9}");
        }
        s
    }
}

fn seed_for(cfg: &SessionConfig, tags: &[u64]) -> u64 {
    derive_seed(cfg.seed, tags)
}

fn counts(cfg: &SessionConfig) -> SampleCounts {
    SampleCounts {
        base: cfg.samples_base,
        novel: cfg.samples_novel,
    }
}

/// Resampling round of epoch `epoch` in session `t`.
fn round(t: usize, epoch: usize) -> u64 {
    ((t as u64) << 32) | epoch as u64
}

fn train_config(cfg: &SessionConfig, t: usize) -> ProjectorTrainConfig {
    ProjectorTrainConfig {
        epochs: if t == 0 {
            cfg.base_epochs
        } else {
            cfg.incremental_epochs
        },
        batch_size: cfg.batch_size,
        max_lr: cfg.proj_lr,
        warmup_epochs: cfg.proj_warmup_epochs,
        momentum: cfg.proj_momentum,
        tau: cfg.tau,
        seed: seed_for(cfg, &[0x7a1, t as u64]),
    }
}

/// Target structure for this session under the chosen strategy.
fn target_structure(
    state_fixed: &mut Option<StructureMatrix>,
    cfg: &SessionConfig,
    strategy: Strategy,
    init: &InitialStructure,
    t: usize,
) -> Result<(StructureMatrix, bool)> {
    match strategy {
        Strategy::Concm | Strategy::Frozen => {
            let up = theorem1_update(init)?;
            if up.rank_deficient {
                warn!("session {t}: initial structure was rank deficient");
            }
            Ok((up.structure, up.rank_deficient))
        }
        Strategy::Rm => {
            let r = random_optimal_structure(init.num_classes(), init.dim(), seed_for(cfg, &[0x4a3, t as u64]))?;
            Ok((
                StructureMatrix::new(r.columns().clone(), init.class_ids().to_vec())?,
                false,
            ))
        }
        Strategy::Fs => {
            if state_fixed.is_none() {
                let total = cfg.fs_total_classes.unwrap_or(cfg.total_classes());
                *state_fixed = Some(fixed_structure(init, total)?);
            }
            let p = state_fixed.as_ref().expect("set above").prefix(init.num_classes())?;
            Ok((
                StructureMatrix::new(p.columns().clone(), init.class_ids().to_vec())?,
                false,
            ))
        }
    }
}

/// Base session: knowledge pool, calibration network, base statistics,
/// first target structure and projector training.
pub fn run_base_session(
    cfg: &SessionConfig,
    strategy: Strategy,
    base: &FeatureSet,
    inputs: &KnowledgeInputs,
) -> Result<(SessionState, SessionLog)> {
    cfg.validate()?;
    let classes = base.classes();
    if classes.len() != cfg.base_classes {
        return Err(Error::ProtocolViolation(format!(
            "base set has {} classes, config expects {}",
            classes.len(),
            cfg.base_classes
        )));
    }
    let d_f = base.dim();
    let class_names: Vec<String> = classes
        .iter()
        .map(|c| base.class_name(*c).unwrap_or_default().to_string())
        .collect();
    info!(
        "base session: {} classes, {} samples, d_f = {d_f}",
        classes.len(),
        base.len()
    );

    let pool = AttributePool::build(base, &inputs.table, &inputs.embeddings)?;
    let listed: Vec<(usize, String)> = classes.iter().copied().zip(class_names.iter().cloned()).collect();
    let knowledge = build_knowledge(&pool, &listed, &inputs.embeddings, &inputs.table)?;
    let mpc_init = MpcParams::init(d_f, inputs.embeddings.dim(), seed_for(cfg, &[0x3c0]))?;
    let meta_cfg = MetaTrainConfig {
        shots: cfg.mpc_shots,
        episodes: cfg.mpc_episodes,
        max_lr: cfg.mpc_lr,
        warmup: cfg.mpc_warmup,
        momentum: cfg.mpc_momentum,
        seed: seed_for(cfg, &[0x3c1]),
    };
    let (mpc, trace) = meta_train(base, &knowledge, mpc_init, &meta_cfg)?;
    let meta_loss = trace.first().copied().zip(trace.last().copied());

    let mut repo = PrototypeRepository::new();
    for s in base_stats(base)? {
        repo.push(s)?;
    }
    let projector = ProjectorParams::init(d_f, cfg.d_hidden.unwrap_or(d_f), cfg.d_g, seed_for(cfg, &[0x960]))?;
    let mut state = SessionState {
        cfg: cfg.clone(),
        strategy,
        t: 0,
        pool,
        mpc,
        projector,
        repo,
        structure: StructureMatrix::new(Matrix::zeros(cfg.d_g, 0), vec![])?,
        replay: FeatureSet::new(d_f),
        class_names,
        fixed: None,
    };
    let mut log = adapt(&mut state, 0, &[], &FeatureSet::new(d_f))?;
    log.meta_loss = meta_loss;
    Ok((state, log))
}

/// Shared tail of every session: resample, update the structure, train.
/// `novel` holds this session's real shots (global labels); anchors are
/// placed on `new_classes`.
fn adapt(state: &mut SessionState, t: usize, new_classes: &[usize], novel: &FeatureSet) -> Result<SessionLog> {
    let cfg = state.cfg.clone();
    let seed = seed_for(&cfg, &[0xa06]);
    let repo = state.repo.clone();
    let replay = state.replay.clone();
    let counts = counts(&cfg);
    let epoch_data = |epoch: usize| -> Result<FeatureSet> {
        let mut set = sample_augmented(&repo, counts, seed, round(t, epoch))?;
        set.extend(novel)?;
        set.extend(&replay)?;
        Ok(set)
    };

    let ids: Vec<usize> = (0..state.num_classes()).collect();
    let prev = (t > 0).then_some(&state.structure);
    let first = epoch_data(0)?;
    let init = initial_structure(prev, &state.projector, &ids, &first)?;
    let (structure, rank_deficient) = target_structure(&mut state.fixed, &cfg, state.strategy, &init, t)?;
    let smr_value = smr(&init, &structure)?;
    let optimality = structure.optimality_deviation();
    info!("session {t}: {} classes, smr {smr_value:.4}", ids.len());

    let mut epoch_losses = Vec::new();
    if state.strategy != Strategy::Frozen {
        let mut cached = Some(first);
        let mut data = |epoch: usize| match (epoch, cached.take()) {
            (0, Some(set)) => Ok(set),
            _ => epoch_data(epoch),
        };
        let (trained, losses) = train_projector(
            &mut data,
            &structure,
            new_classes,
            state.projector.clone(),
            &train_config(&cfg, t),
        )?;
        state.projector = trained;
        epoch_losses = losses;
    }
    state.structure = structure;
    Ok(SessionLog {
        t,
        classes: ids.len(),
        smr: smr_value,
        rank_deficient,
        optimality,
        meta_loss: None,
        epoch_losses,
        uncovered: Vec::new(),
    })
}

/// Prototypes of one session's novel classes, in class order.
#[derive(Debug, Clone)]
pub struct NovelPrototypes {
    /// Plain few-shot means.
    pub raw: Vec<Prototype>,
    /// Calibrated and blended with the raw means.
    pub blended: Vec<Prototype>,
    /// Population variance of each class's shots.
    pub variances: Vec<Vec<f64>>,
    pub knowledge: SemanticKnowledge,
}

/// Raw and calibrated prototypes of the classes in `novel` (global labels).
pub fn novel_prototypes(state: &SessionState, novel: &FeatureSet, inputs: &KnowledgeInputs) -> Result<NovelPrototypes> {
    let classes = novel.classes();
    let listed: Vec<(usize, String)> = classes
        .iter()
        .map(|c| (*c, novel.class_name(*c).unwrap_or_default().to_string()))
        .collect();
    let knowledge = build_knowledge(&state.pool, &listed, &inputs.embeddings, &inputs.table)?;
    let mut raw = Vec::with_capacity(classes.len());
    let mut vars = Vec::with_capacity(classes.len());
    for &c in &classes {
        let rows = novel.class_rows(c);
        let (mean, var) = mean_and_variance(&rows);
        raw.push(Prototype {
            class_id: c,
            mean,
            source: PrototypeSource::Raw,
            shot_count: rows.rows(),
        });
        vars.push(var);
    }
    let blended = calibrate_all(&raw, &knowledge, &state.mpc, state.cfg.alpha)?;
    Ok(NovelPrototypes {
        raw,
        blended,
        variances: vars,
        knowledge,
    })
}

/// One incremental session on `novel` (local labels `0..n_way`).
pub fn run_incremental_session(
    state: &mut SessionState,
    novel: &FeatureSet,
    inputs: &KnowledgeInputs,
) -> Result<SessionLog> {
    let cfg = state.cfg.clone();
    if state.t >= cfg.sessions {
        return Err(Error::Order(format!(
            "all {} incremental sessions have already run",
            cfg.sessions
        )));
    }
    let classes = novel.classes();
    if classes.len() != cfg.n_way {
        return Err(Error::ProtocolViolation(format!(
            "session has {} classes, expected {}",
            classes.len(),
            cfg.n_way
        )));
    }
    for &c in &classes {
        let name = novel.class_name(c).unwrap_or_default();
        let shots = novel.indices_of(c).len();
        if shots != cfg.k_shot {
            return Err(Error::ProtocolViolation(format!(
                "class `{name}` has {shots} shots, expected {}",
                cfg.k_shot
            )));
        }
        if state.class_names.iter().any(|n| n == name) {
            return Err(Error::ProtocolViolation(format!(
                "class `{name}` was already introduced"
            )));
        }
    }
    if novel.dim() != state.feature_dim() {
        return Err(Error::shape(
            "run_incremental_session",
            "feature dimension differs from the base session",
        ));
    }
    let t = state.t + 1;
    let offset = state.num_classes();
    let global = novel.relabeled(offset);

    let NovelPrototypes {
        blended,
        variances: vars,
        knowledge,
        ..
    } = novel_prototypes(state, &global, inputs)?;
    let uncovered: Vec<usize> = (0..classes.len())
        .filter(|k| knowledge.assoc.is_uncovered(*k))
        .map(|k| knowledge.assoc.class_ids()[k])
        .collect();
    let base = state.repo.base();
    for (p, var) in blended.iter().zip(&vars) {
        let w = transfer_weights(&p.mean, &base, cfg.gamma)?;
        let cov = novel_covariance(var, &base, &w, cfg.beta)?;
        let name = global.class_name(p.class_id).unwrap_or_default().to_string();
        state.repo.push(ClassStats {
            class_id: p.class_id,
            name: name.clone(),
            mean: p.mean.clone(),
            cov_diag: cov,
            exact: false,
        })?;
        state.class_names.push(name);
    }

    let new_classes: Vec<usize> = (offset..state.num_classes()).collect();
    let mut log = adapt(state, t, &new_classes, &global)?;
    log.uncovered = uncovered;

    for &c in &new_classes {
        let idx = global.indices_of(c);
        let keep = select_exemplars(&global, &idx, cfg.replay);
        for i in keep {
            state
                .replay
                .push(c, global.class_name(c).unwrap_or_default(), global.sample(i))?;
        }
    }
    state.t = t;
    Ok(log)
}

/// All shots when they fit; otherwise the `budget` closest to the class mean.
fn select_exemplars(set: &FeatureSet, idx: &[usize], budget: usize) -> Vec<usize> {
    if idx.len() <= budget {
        return idx.to_vec();
    }
    let (mean, _) = mean_and_variance(&set.features().select_rows(idx));
    let mut scored: Vec<(f64, usize)> = idx
        .iter()
        .map(|&i| {
            let d: f64 = set.sample(i).iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = scored.into_iter().take(budget).map(|(_, i)| i).collect();
    keep.sort_unstable();
    keep
}

/// Classifies the test samples of every class seen so far.
pub fn evaluate(state: &SessionState, test: &FeatureSet, smr: Option<f64>) -> Result<SessionRecord> {
    let seen = state.num_classes();
    let subset = test.filter(|c| c < seen);
    if subset.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no test samples for the {seen} seen classes"
        )));
    }
    let z = project_rows(&state.projector, subset.features())?;
    let rows = state.structure.as_rows();
    let ids = state.structure.class_ids();
    let preds: Vec<usize> = (0..z.rows()).map(|i| ids[ncm_rows(z.row(i), &rows)]).collect();
    let m = session_metrics(&preds, subset.labels(), |c| state.is_base(c))?;
    let sim = similarity_stats(&z, subset.labels()).ok();
    Ok(SessionRecord {
        t: state.t,
        top1: m.top1,
        bacc: m.bacc,
        nacc: if state.t == 0 { None } else { m.nacc },
        hm: if state.t == 0 { None } else { m.hm },
        ber: if state.t == 0 { None } else { m.ber },
        smr,
        sim_cls: sim.as_ref().map(|s| s.sim_cls),
        sim_in: sim.as_ref().map(|s| s.sim_in),
    })
}

/// All inputs of one run.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub base: FeatureSet,
    /// Incremental session sets with local labels.
    pub sessions: Vec<FeatureSet>,
    pub knowledge: KnowledgeInputs,
    /// Test set with global labels. Without one, each session is scored on
    /// the training samples seen so far.
    pub test: Option<FeatureSet>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub logs: Vec<SessionLog>,
    pub state: SessionState,
}

/// Runs the base session and every incremental session, scoring after each.
pub fn run_all(cfg: &SessionConfig, strategy: Strategy, bench: &Benchmark) -> Result<RunOutput> {
    if bench.sessions.len() != cfg.sessions {
        return Err(Error::ProtocolViolation(format!(
            "benchmark has {} incremental sessions, config expects {}",
            bench.sessions.len(),
            cfg.sessions
        )));
    }
    let (mut state, log) = run_base_session(cfg, strategy, &bench.base, &bench.knowledge)?;
    let mut seen_train = bench.base.clone();
    let score = |state: &SessionState, seen: &FeatureSet, smr: f64| match &bench.test {
        Some(test) => evaluate(state, test, Some(smr)),
        None => evaluate(state, seen, Some(smr)),
    };
    let mut records = vec![score(&state, &seen_train, log.smr)?];
    let mut logs = vec![log];
    for novel in &bench.sessions {
        let offset = state.num_classes();
        let log = run_incremental_session(&mut state, novel, &bench.knowledge)?;
        seen_train.extend(&novel.relabeled(offset))?;
        records.push(score(&state, &seen_train, log.smr)?);
        logs.push(log);
    }
    let report = RunReport::from_sessions(records)?;
    Ok(RunOutput { report, logs, state })
}

/// `1 - cos(estimate, truth)`; the angular error of a prototype.
pub fn prototype_bias(estimate: &[f64], truth: &[f64]) -> f64 {
    let n = (dot(estimate, estimate) * dot(truth, truth)).sqrt();
    if n == 0.0 {
        return 1.0;
    }
    1.0 - dot(estimate, truth) / n
}
