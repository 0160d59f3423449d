//! Seeded synthetic benchmark with planted attribute structure.
//!
//! Every attribute owns a visual direction `v_a`, a semantic vector `u_a`
//! and a positive variance profile. A class draws a few attributes; its mean
//! is a shared offset plus the sum of its attribute directions plus a small
//! residual, its diagonal covariance is the average profile of its
//! attributes, and its semantic embedding is the normalized sum of its
//! attribute semantics plus noise. Classes that share attributes therefore
//! have similar means *and* similar variances, and an attribute-based
//! completion of a noisy prototype is informative by construction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeTable, SemanticEmbeddings};
use crate::error::{Error, Result};
use crate::rng;
use crate::session::manifest::Manifest;
use crate::session::pipeline::{Benchmark, KnowledgeInputs};
use crate::session::FeatureSet;
use crate::tensor::normalized;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub base_classes: usize,
    pub n_way: usize,
    pub sessions: usize,
    pub k_shot: usize,
    /// Training samples per base class.
    pub base_samples: usize,
    /// Test samples per class.
    pub test_samples: usize,
    pub d_f: usize,
    pub d_s: usize,
    pub attributes: usize,
    pub attributes_per_class: usize,
    /// Norm scale of the shared mean offset.
    pub shared_scale: f64,
    /// Per-dimension std of attribute directions.
    pub attribute_scale: f64,
    /// Per-dimension std of the class-specific mean residual.
    pub residual_scale: f64,
    /// Within-class std multiplier.
    pub noise_scale: f64,
    /// Std of the class-embedding noise before normalization.
    pub semantic_noise: f64,
    /// Geometric dimension the benchmark is meant for; must exceed the
    /// total class count.
    pub d_g: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            base_classes: 10,
            n_way: 5,
            sessions: 4,
            k_shot: 5,
            base_samples: 100,
            test_samples: 40,
            d_f: 64,
            d_s: 16,
            attributes: 12,
            attributes_per_class: 3,
            shared_scale: 1.0,
            attribute_scale: 0.35,
            residual_scale: 0.1,
            noise_scale: 0.6,
            semantic_noise: 0.1,
            d_g: 64,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn total_classes(&self) -> usize {
        self.base_classes + self.n_way * self.sessions
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.base_classes < 2 || self.n_way == 0 || self.k_shot == 0 {
            return bad("need at least 2 base classes and a positive way/shot count".into());
        }
        if self.d_g <= self.total_classes() {
            return bad(format!(
                "d_g = {} must exceed the total class count {}",
                self.d_g,
                self.total_classes()
            ));
        }
        if self.attributes_per_class == 0 || self.attributes_per_class > self.attributes {
            return bad(format!(
                "attributes_per_class = {} must lie in [1, {}]",
                self.attributes_per_class, self.attributes
            ));
        }
        if self.base_classes * self.attributes_per_class < self.attributes {
            return bad(format!(
                "{} base classes with {} attributes each cannot cover {} attributes",
                self.base_classes, self.attributes_per_class, self.attributes
            ));
        }
        if self.base_samples < 2 || self.test_samples == 0 {
            return bad("need at least 2 base samples and 1 test sample per class".into());
        }
        if self.d_f < 2 || self.d_s == 0 {
            return bad("d_f must be at least 2 and d_s positive".into());
        }
        for (name, v) in [
            ("shared_scale", self.shared_scale),
            ("attribute_scale", self.attribute_scale),
            ("residual_scale", self.residual_scale),
            ("noise_scale", self.noise_scale),
            ("semantic_noise", self.semantic_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8], source_name: &str) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, &path.display().to_string())
    }
}

/// Planted parameters of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTruth {
    pub id: usize,
    pub name: String,
    /// 0 for base classes, otherwise the incremental session index.
    pub session: usize,
    pub attributes: Vec<String>,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub attributes: Vec<String>,
    pub classes: Vec<ClassTruth>,
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub bench: Benchmark,
    pub truth: GroundTruth,
}

fn class_name(id: usize) -> String {
    format!("class_{id:03}")
}

fn attribute_name(i: usize) -> String {
    format!("attr_{i:02}")
}

/// Draws the whole benchmark from `cfg.seed`.
pub fn synth_benchmark(cfg: &GenConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let d = cfg.d_f;
    let mut g = rng::gaussian(cfg.seed, &[0x5e0]);
    let attr_names: Vec<String> = (0..cfg.attributes).map(attribute_name).collect();

    let shared: Vec<f64> = g.vector(d).iter().map(|v| v.abs() * cfg.shared_scale).collect();
    let directions: Vec<Vec<f64>> = (0..cfg.attributes)
        .map(|_| g.vector(d).iter().map(|v| v * cfg.attribute_scale).collect())
        .collect();
    let profiles: Vec<Vec<f64>> = (0..cfg.attributes)
        .map(|_| g.vector(d).iter().map(|v| (0.5 * v).exp()).collect())
        .collect();
    let semantics: Vec<Vec<f64>> = (0..cfg.attributes)
        .map(|_| normalized(&g.vector(cfg.d_s)).expect("gaussian vector is nonzero"))
        .collect();

    // Base classes cycle through a shuffled attribute list first so every
    // attribute is owned by at least one base class.
    let mut r = rng::stream(cfg.seed, &[0x5e1]);
    let mut cycle: Vec<usize> = (0..cfg.attributes).collect();
    cycle.shuffle(&mut r);
    let total = cfg.total_classes();
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(total);
    let mut next = 0usize;
    for c in 0..total {
        let mut attrs: Vec<usize> = Vec::with_capacity(cfg.attributes_per_class);
        if c < cfg.base_classes && next < cfg.attributes {
            while attrs.len() < cfg.attributes_per_class && next < cfg.attributes {
                attrs.push(cycle[next]);
                next += 1;
            }
        }
        while attrs.len() < cfg.attributes_per_class {
            let a = r.gen_range(0..cfg.attributes);
            if !attrs.contains(&a) {
                attrs.push(a);
            }
        }
        attrs.sort_unstable();
        assignments.push(attrs);
    }

    let mut table = std::collections::BTreeMap::new();
    let mut embeddings = SemanticEmbeddings::new(cfg.d_s);
    for (i, n) in attr_names.iter().enumerate() {
        embeddings.insert(n, semantics[i].clone())?;
    }
    let mut classes = Vec::with_capacity(total);
    for (c, attrs) in assignments.iter().enumerate() {
        let mut mean = shared.clone();
        let mut cov = vec![0.0; d];
        for &a in attrs {
            mean.iter_mut().zip(&directions[a]).for_each(|(m, v)| *m += v);
            cov.iter_mut().zip(&profiles[a]).for_each(|(s, p)| *s += p);
        }
        let scale = cfg.noise_scale * cfg.noise_scale / attrs.len() as f64;
        cov.iter_mut().for_each(|s| *s *= scale);
        mean.iter_mut()
            .zip(g.vector(d))
            .for_each(|(m, e)| *m += cfg.residual_scale * e);

        let mut sem = vec![0.0; cfg.d_s];
        for &a in attrs {
            sem.iter_mut().zip(&semantics[a]).for_each(|(s, u)| *s += u);
        }
        sem.iter_mut()
            .zip(g.vector(cfg.d_s))
            .for_each(|(s, e)| *s += cfg.semantic_noise * e);
        let sem = normalized(&sem).ok_or_else(|| Error::DegenerateInput("zero class embedding".into()))?;

        let name = class_name(c);
        embeddings.insert(&name, sem)?;
        let names: Vec<String> = attrs.iter().map(|a| attr_names[*a].clone()).collect();
        table.insert(name.clone(), names.clone());
        let session = if c < cfg.base_classes {
            0
        } else {
            1 + (c - cfg.base_classes) / cfg.n_way
        };
        classes.push(ClassTruth {
            id: c,
            name,
            session,
            attributes: names,
            mean,
            cov_diag: cov,
        });
    }

    let draw = |set: &mut FeatureSet, label: usize, truth: &ClassTruth, n: usize, tag: u64| -> Result<()> {
        let mut s = rng::gaussian(cfg.seed, &[0x5e2, tag, truth.id as u64]);
        let std: Vec<f64> = truth.cov_diag.iter().map(|v| v.sqrt()).collect();
        for _ in 0..n {
            let x: Vec<f64> = truth.mean.iter().zip(&std).map(|(m, sd)| m + sd * s.sample()).collect();
            set.push(label, &truth.name, &x)?;
        }
        Ok(())
    };
    let mut base = FeatureSet::new(d);
    let mut test = FeatureSet::new(d);
    let mut sessions: Vec<FeatureSet> = (0..cfg.sessions).map(|_| FeatureSet::new(d)).collect();
    for truth in &classes {
        if truth.session == 0 {
            draw(&mut base, truth.id, truth, cfg.base_samples, 0)?;
        } else {
            let local = (truth.id - cfg.base_classes) % cfg.n_way;
            draw(&mut sessions[truth.session - 1], local, truth, cfg.k_shot, 0)?;
        }
        draw(&mut test, truth.id, truth, cfg.test_samples, 1)?;
    }
    Ok(SyntheticBenchmark {
        bench: Benchmark {
            base,
            sessions,
            knowledge: KnowledgeInputs {
                table: AttributeTable::new(table),
                embeddings,
            },
            test: Some(test),
        },
        truth: GroundTruth {
            attributes: attr_names,
            classes,
        },
    })
}

/// Generates the benchmark and writes it under `dir` with a manifest.
/// The configuration is validated before anything is written.
pub fn write_benchmark(cfg: &GenConfig, dir: &Path) -> Result<Manifest> {
    let synth = synth_benchmark(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, contents: &str| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    };
    synth.bench.base.save(&dir.join("base.csv"))?;
    let mut session_files = Vec::with_capacity(cfg.sessions);
    for (i, s) in synth.bench.sessions.iter().enumerate() {
        let name = format!("session_{}.csv", i + 1);
        s.save(&dir.join(&name))?;
        session_files.push(name);
    }
    synth
        .bench
        .test
        .as_ref()
        .expect("synthetic benchmarks carry a test set")
        .save(&dir.join("test.csv"))?;
    write("attributes.json", &synth.bench.knowledge.table.to_json())?;
    write("semantic.csv", &synth.bench.knowledge.embeddings.to_csv())?;
    let mut truth = serde_json::to_string_pretty(&synth.truth).expect("truth serializes");
    truth.push('\n');
    write("truth.json", &truth)?;
    let manifest = Manifest {
        base: "base.csv".into(),
        sessions: session_files,
        attributes: "attributes.json".into(),
        semantic: "semantic.csv".into(),
        test: Some("test.csv".into()),
    };
    write("manifest.json", &manifest.to_json())?;
    Ok(manifest)
}
