//! The three training phases, the from-scratch baseline, evaluation and
//! checkpoints.
//!
//! Phase 1 trains per-domain concept tables with a shared encoder and
//! decoder, one batch per source per epoch. Phase 2 clusters the concept
//! tables into prototypes once and trains the prototypes with the shared
//! parameters, concept tables frozen. Adaptation initializes a target
//! concept table from the prototypes and trains only that table on a few
//! target batches.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregation::{build_prototypes, init_target_table};
use crate::autograd::{Graph, Mat, Var};
use crate::data::{Batch, Batcher, DomainSpec, InteractionSequence, QMatrix};
use crate::dataset::Dataset;
use crate::embedding::{proto_q_matrix, ConceptTable, PrototypeTable};
use crate::encoders::EncoderKind;
use crate::error::{Error, Result};
use crate::metrics::{PredictionLog, Summary};
use crate::model::{
    concepts_key, forward, init_params, pooled_states, record_predictions, shared_names, Forward,
    ModelConfig, PreparedBatch, QuestionRep, PROTOTYPES, TARGET_CONCEPTS,
};
use crate::params::{clip_global_norm, Adam, Binder, ParamStore};
use crate::rng::{seeded, stream};

pub const CHECKPOINT_FORMAT: &str = "dgkt.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub cluster: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub adapt_epochs: usize,
    /// Optimizer steps for the target-only baseline.
    pub scratch_epochs: usize,
    pub lambda: f64,
    pub target_batches: usize,
    pub clip_norm: f64,
    /// Evaluate on the test splits every this many epochs (0: only at the
    /// end of a phase).
    pub eval_every: usize,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            k: 5,
            lr: 1e-4,
            batch_size: 32,
            phase1_epochs: 12_000,
            phase2_epochs: 6_000,
            adapt_epochs: 50,
            scratch_epochs: 12_000,
            lambda: 0.7,
            target_batches: 1,
            clip_norm: 5.0,
            eval_every: 0,
            seeds: Seeds {
                model: 0,
                data: 0,
                cluster: 0,
            },
        }
    }
}

impl TrainConfig {
    /// Small model and short schedules for a single CPU.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                d: 32,
                n_heads: 4,
                n_layers: 1,
                ..ModelConfig::default()
            },
            lr: 1e-3,
            phase1_epochs: 600,
            phase2_epochs: 300,
            scratch_epochs: 600,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds {
            model: seed,
            data: seed,
            cluster: seed,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.k == 0 || self.batch_size == 0 || self.target_batches == 0 {
            return bad("k, batch_size and target_batches must be positive");
        }
        if self.phase1_epochs == 0 || self.phase2_epochs == 0 || self.adapt_epochs == 0 || self.scratch_epochs == 0 {
            return bad("epoch counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cfl,
    Refine,
    Adapt,
    Scratch,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Cfl => "cfl",
            Phase::Refine => "refine",
            Phase::Adapt => "adapt",
            Phase::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub epochs: usize,
    pub final_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeInfo {
    pub labels: Vec<usize>,
    pub domains: Vec<(u32, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetInfo {
    pub domain_id: u32,
    pub init_choices: Vec<usize>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub phase: Phase,
    pub config: TrainConfig,
    pub source_domains: Vec<u32>,
    pub prototypes: Option<PrototypeInfo>,
    pub target: Option<TargetInfo>,
    pub lineage: Vec<PhaseSummary>,
    pub params: ParamStore,
}

impl Checkpoint {
    fn new(phase: Phase, config: TrainConfig, params: ParamStore) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            phase,
            config,
            source_domains: Vec::new(),
            prototypes: None,
            target: None,
            lineage: Vec::new(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_json(&bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            format_version: u32,
        }
        let header: Header = serde_json::from_slice(bytes)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", header.format)));
        }
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersion {
                what: "checkpoint".into(),
                found: header.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn prototype_table(&self) -> Result<PrototypeTable> {
        let info = self
            .prototypes
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no prototypes".into()))?;
        Ok(PrototypeTable {
            embeddings: self.params.require(PROTOTYPES)?.clone(),
            labels: info.labels.clone(),
            domains: info.domains.clone(),
        })
    }

    pub fn concept_table(&self, domain_id: u32) -> Result<ConceptTable> {
        Ok(ConceptTable {
            embeddings: self.params.require(&concepts_key(domain_id))?.clone(),
            domain_id,
            trainable: self.phase == Phase::Cfl,
        })
    }

    /// How this checkpoint embeds the questions of `domain`.
    pub fn question_rep(&self, domain: &DomainSpec) -> Result<QuestionRep> {
        if let Some(t) = &self.target {
            if t.domain_id == domain.domain_id {
                return Ok(QuestionRep::Target { lambda: t.lambda });
            }
        }
        if let Some(p) = &self.prototypes {
            if p.domains.iter().any(|(d, _, _)| *d == domain.domain_id) {
                let table = self.prototype_table()?;
                let proto_q = proto_q_matrix(&table.domain_assignment(domain.domain_id)?, &domain.q_matrix)?;
                return Ok(QuestionRep::Prototypes {
                    proto_q: Arc::new(proto_q),
                });
            }
        }
        if self.params.contains(&concepts_key(domain.domain_id)) {
            return Ok(QuestionRep::Concepts);
        }
        Err(Error::InvalidArgument(format!(
            "checkpoint knows nothing about domain {}",
            domain.domain_id
        )))
    }

    /// Digest of every tensor except the target concept table.
    pub fn frozen_digest(&self) -> String {
        self.params.digest(self.params.names().filter(|n| *n != TARGET_CONCEPTS))
    }
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub domain: u32,
    pub auc: f64,
    pub acc: f64,
    pub loss: f64,
    pub n_predictions: usize,
}

pub trait MetricSink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()>;
}

impl MetricSink for Vec<MetricRecord> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NoMetrics;

impl MetricSink for NoMetrics {
    fn record(&mut self, _: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

/// Appends records as JSON lines.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> MetricSink for JsonlSink<W> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, rec)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

fn needs_relation(cfg: &ModelConfig) -> bool {
    cfg.encoder == EncoderKind::Ra
}

/// Mixes the domain id into a seed so every domain gets its own stream.
fn domain_seed(seed: u64, domain_id: u32) -> u64 {
    seed ^ (u64::from(domain_id) + 1).wrapping_mul(0xA076_1D64_78BD_642F)
}

struct Step<'a> {
    phase: Phase,
    epoch: usize,
    trainable: &'a BTreeSet<String>,
}

/// Builds the summed loss of `parts`, backpropagates, clips and updates.
/// Returns the summed loss.
fn optimize(
    store: &mut ParamStore,
    opt: &mut Adam,
    cfg: &TrainConfig,
    step: Step,
    parts: &[(&DomainSpec, &QuestionRep, PreparedBatch)],
) -> Result<f64> {
    let grads = {
        let mut g = Graph::new();
        let mut binder = Binder::new(store, step.trainable);
        let mut total: Option<Var> = None;
        for (domain, rep, batch) in parts {
            let f = forward(&mut g, &mut binder, &cfg.model, domain, rep, batch)?;
            total = Some(match total {
                Some(t) => g.add(t, f.loss),
                None => f.loss,
            });
        }
        let total = total.ok_or_else(|| Error::Empty("no batches in epoch".into()))?;
        let loss = g.scalar(total);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                phase: step.phase.name().into(),
                epoch: step.epoch,
                detail: format!("loss = {loss}"),
            });
        }
        let mut grads = g.backward(total);
        let mut collected = binder.collect(&mut grads);
        if let Some((name, _)) = collected.iter().find(|(_, m)| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                phase: step.phase.name().into(),
                epoch: step.epoch,
                detail: format!("gradient of `{name}`"),
            });
        }
        debug_assert!(collected.keys().all(|k| step.trainable.contains(k)));
        clip_global_norm(&mut collected, cfg.clip_norm);
        (collected, loss)
    };
    let (collected, loss) = grads;
    opt.step(store, &collected)?;
    Ok(loss)
}

fn eval_all(
    ckpt: &Checkpoint,
    datasets: &[&Dataset],
    epoch: usize,
    sink: &mut dyn MetricSink,
) -> Result<()> {
    for ds in datasets {
        let s = evaluate(ckpt, ds)?;
        sink.record(&MetricRecord {
            phase: ckpt.phase,
            epoch,
            domain: ds.spec.domain_id,
            auc: s.auc,
            acc: s.acc,
            loss: s.loss,
            n_predictions: s.n_predictions,
        })?;
    }
    Ok(())
}

/// Shared training loop for the two source phases.
fn train_sources(
    mut ckpt: Checkpoint,
    sources: &[&Dataset],
    trainable: BTreeSet<String>,
    epochs: usize,
    sink: &mut dyn MetricSink,
) -> Result<Checkpoint> {
    let cfg = ckpt.config.clone();
    let reps = sources
        .iter()
        .map(|d| ckpt.question_rep(&d.spec))
        .collect::<Result<Vec<_>>>()?;
    let mut cycles = sources
        .iter()
        .map(|d| {
            Batcher::new(
                d.split.train.clone(),
                cfg.batch_size,
                domain_seed(cfg.seeds.data, d.spec.domain_id) ^ ckpt.phase as u64,
                None,
            )
            .map(|b| b.cycle())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(cfg.lr);
    let started = Instant::now();
    let mut last = f64::NAN;
    for epoch in 0..epochs {
        let mut parts = Vec::with_capacity(sources.len());
        for ((ds, rep), cycle) in sources.iter().zip(&reps).zip(cycles.iter_mut()) {
            let batch = cycle.next().expect("batch cycles are endless");
            parts.push((&ds.spec, rep, PreparedBatch::new(&batch, &ds.spec, needs_relation(&cfg.model))?));
        }
        let step = Step {
            phase: ckpt.phase,
            epoch,
            trainable: &trainable,
        };
        last = optimize(&mut ckpt.params, &mut opt, &cfg, step, &parts)?;
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && epoch + 1 < epochs {
            eval_all(&ckpt, sources, epoch + 1, sink)?;
        }
    }
    ckpt.lineage.push(PhaseSummary {
        phase: ckpt.phase,
        epochs,
        final_loss: last,
        wall_seconds: started.elapsed().as_secs_f64(),
    });
    eval_all(&ckpt, sources, epochs, sink)?;
    Ok(ckpt)
}

fn check_sources(sources: &[&Dataset]) -> Result<()> {
    if sources.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 source domains, got {}",
            sources.len()
        )));
    }
    let mut ids = BTreeSet::new();
    for s in sources {
        if !ids.insert(s.spec.domain_id) {
            return Err(Error::InvalidArgument(format!("duplicate domain id {}", s.spec.domain_id)));
        }
    }
    Ok(())
}

/// Fresh parameters for the given source domains (phase 1 state before any
/// step).
pub fn init_sources(sources: &[&Dataset], cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    check_sources(sources)?;
    let specs: Vec<&DomainSpec> = sources.iter().map(|d| &d.spec).collect();
    let params = init_params(&cfg.model, &specs, &mut seeded(cfg.seeds.model, stream::INIT))?;
    let mut ckpt = Checkpoint::new(Phase::Cfl, cfg.clone(), params);
    ckpt.source_domains = specs.iter().map(|s| s.domain_id).collect();
    Ok(ckpt)
}

/// Concept feature learning: concept tables and shared parameters.
pub fn train_phase1_cfl(sources: &[&Dataset], cfg: &TrainConfig, sink: &mut dyn MetricSink) -> Result<Checkpoint> {
    let ckpt = init_sources(sources, cfg)?;
    let mut trainable = shared_names(&ckpt.params);
    for s in sources {
        trainable.insert(concepts_key(s.spec.domain_id));
    }
    train_sources(ckpt, sources, trainable, cfg.phase1_epochs, sink)
}

/// Clusters the phase-1 concept tables into prototypes.
pub fn cluster_concepts(ckpt: &Checkpoint, sources: &[&Dataset]) -> Result<Checkpoint> {
    if ckpt.phase != Phase::Cfl {
        return Err(Error::InvalidArgument(format!(
            "prototype refinement needs a phase-1 checkpoint, got `{}`",
            ckpt.phase.name()
        )));
    }
    check_sources(sources)?;
    let tables = sources
        .iter()
        .map(|d| ckpt.concept_table(d.spec.domain_id))
        .collect::<Result<Vec<_>>>()?;
    let protos = build_prototypes(&tables, ckpt.config.k, ckpt.config.seeds.cluster)?;
    let mut next = ckpt.clone();
    next.phase = Phase::Refine;
    next.params.insert(PROTOTYPES, protos.embeddings);
    next.prototypes = Some(PrototypeInfo {
        labels: protos.labels,
        domains: protos.domains,
    });
    Ok(next)
}

/// Prototype refinement: prototypes and shared parameters, concept tables
/// frozen.
pub fn train_phase2_refine(
    ckpt: &Checkpoint,
    sources: &[&Dataset],
    sink: &mut dyn MetricSink,
) -> Result<Checkpoint> {
    let clustered = cluster_concepts(ckpt, sources)?;
    let mut trainable = shared_names(&clustered.params);
    trainable.insert(PROTOTYPES.into());
    let epochs = clustered.config.phase2_epochs;
    train_sources(clustered, sources, trainable, epochs, sink)
}

fn target_batches(target: &Dataset, cfg: &TrainConfig) -> Result<Vec<Batch>> {
    let batcher = Batcher::new(
        target.split.train.clone(),
        cfg.batch_size,
        domain_seed(cfg.seeds.data, target.spec.domain_id),
        Some(cfg.target_batches),
    )?;
    Ok(batcher.epoch(0).collect())
}

/// Target table initialized from the prototypes, before any adaptation step.
pub fn prepare_target(ckpt: &Checkpoint, target: &Dataset, lambda: f64) -> Result<Checkpoint> {
    if ckpt.phase != Phase::Refine {
        return Err(Error::InvalidArgument(format!(
            "adaptation needs a refined checkpoint, got `{}`",
            ckpt.phase.name()
        )));
    }
    if ckpt.source_domains.contains(&target.spec.domain_id) {
        return Err(Error::InvalidArgument(format!(
            "domain {} is a source domain",
            target.spec.domain_id
        )));
    }
    let protos = ckpt.prototype_table()?;
    let table = init_target_table(
        &protos,
        target.spec.n_concepts,
        domain_seed(ckpt.config.seeds.model, target.spec.domain_id),
        lambda,
    )?;
    let mut next = ckpt.clone();
    next.phase = Phase::Adapt;
    next.config.lambda = lambda;
    next.params.insert(TARGET_CONCEPTS, table.embeddings);
    next.target = Some(TargetInfo {
        domain_id: target.spec.domain_id,
        init_choices: table.init_choices,
        lambda,
    });
    Ok(next)
}

fn train_target(
    mut ckpt: Checkpoint,
    target: &Dataset,
    trainable: BTreeSet<String>,
    epochs: usize,
    sink: &mut dyn MetricSink,
) -> Result<Checkpoint> {
    let cfg = ckpt.config.clone();
    let rep = ckpt.question_rep(&target.spec)?;
    let prepared = target_batches(target, &cfg)?
        .iter()
        .map(|b| PreparedBatch::new(b, &target.spec, needs_relation(&cfg.model)))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(cfg.lr);
    let started = Instant::now();
    let mut last = f64::NAN;
    for epoch in 0..epochs {
        let parts: Vec<_> = prepared.iter().map(|b| (&target.spec, &rep, b.clone())).collect();
        let step = Step {
            phase: ckpt.phase,
            epoch,
            trainable: &trainable,
        };
        last = optimize(&mut ckpt.params, &mut opt, &cfg, step, &parts)?;
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && epoch + 1 < epochs {
            eval_all(&ckpt, &[target], epoch + 1, sink)?;
        }
    }
    ckpt.lineage.push(PhaseSummary {
        phase: ckpt.phase,
        epochs,
        final_loss: last,
        wall_seconds: started.elapsed().as_secs_f64(),
    });
    eval_all(&ckpt, &[target], epochs, sink)?;
    Ok(ckpt)
}

/// Target adaptation: only the target concept table is updated.
pub fn adapt_target(ckpt: &Checkpoint, target: &Dataset, sink: &mut dyn MetricSink) -> Result<Checkpoint> {
    let lambda = ckpt.config.lambda;
    adapt_target_with(ckpt, target, lambda, sink)
}

pub fn adapt_target_with(
    ckpt: &Checkpoint,
    target: &Dataset,
    lambda: f64,
    sink: &mut dyn MetricSink,
) -> Result<Checkpoint> {
    ckpt.config.validate()?;
    let prepared = prepare_target(ckpt, target, lambda)?;
    let trainable = BTreeSet::from([TARGET_CONCEPTS.to_owned()]);
    let epochs = prepared.config.adapt_epochs;
    train_target(prepared, target, trainable, epochs, sink)
}

/// Baseline: the same model trained only on the limited target batches,
/// every tensor trainable.
pub fn train_from_scratch(target: &Dataset, cfg: &TrainConfig, sink: &mut dyn MetricSink) -> Result<Checkpoint> {
    cfg.validate()?;
    let params = init_params(&cfg.model, &[&target.spec], &mut seeded(cfg.seeds.model, stream::INIT))?;
    let ckpt = Checkpoint::new(Phase::Scratch, cfg.clone(), params);
    let trainable: BTreeSet<String> = ckpt.params.names().map(str::to_owned).collect();
    train_target(ckpt, target, trainable, cfg.scratch_epochs, sink)
}

fn test_batches(seqs: &[InteractionSequence], batch_size: usize) -> Vec<Batch> {
    seqs.chunks(batch_size)
        .map(|c| Batch {
            sequences: c.to_vec(),
        })
        .collect()
}

/// Runs `visit` on the forward pass of every test batch, in order.
fn for_each_test_batch(
    ckpt: &Checkpoint,
    ds: &Dataset,
    mut visit: impl FnMut(&Graph, &Forward, &PreparedBatch),
) -> Result<()> {
    if ds.split.test.is_empty() {
        return Err(Error::Empty(format!("domain {} has no test sequences", ds.spec.domain_id)));
    }
    let rep = ckpt.question_rep(&ds.spec)?;
    let none = BTreeSet::new();
    for batch in test_batches(&ds.split.test, ckpt.config.batch_size) {
        let prepared = PreparedBatch::new(&batch, &ds.spec, needs_relation(&ckpt.config.model))?;
        if prepared.n_targets() == 0 {
            continue;
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&ckpt.params, &none);
        let f = forward(&mut g, &mut binder, &ckpt.config.model, &ds.spec, &rep, &prepared)?;
        visit(&g, &f, &prepared);
    }
    Ok(())
}

/// AUC, accuracy and loss over the test split.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset) -> Result<Summary> {
    let mut log = PredictionLog::default();
    for_each_test_batch(ckpt, ds, |g, f, p| record_predictions(g, f, p, &mut log))?;
    log.summary()
}

/// Knowledge states of the test sequences, mean-pooled per sequence.
pub fn pooled_test_states(ckpt: &Checkpoint, ds: &Dataset) -> Result<Mat> {
    let mut rows: Vec<Mat> = Vec::new();
    for_each_test_batch(ckpt, ds, |g, f, p| rows.push(pooled_states(g, f, p)))?;
    let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Attention weights of every layer for the given sequences.
pub fn attention_maps(
    ckpt: &Checkpoint,
    ds: &Dataset,
    sequences: &[InteractionSequence],
) -> Result<Vec<Vec<Mat>>> {
    let rep = ckpt.question_rep(&ds.spec)?;
    let batch = Batch {
        sequences: sequences.to_vec(),
    };
    let prepared = PreparedBatch::new(&batch, &ds.spec, needs_relation(&ckpt.config.model))?;
    let none = BTreeSet::new();
    let mut g = Graph::new();
    let mut binder = Binder::new(&ckpt.params, &none);
    let f = forward(&mut g, &mut binder, &ckpt.config.model, &ds.spec, &rep, &prepared)?;
    Ok(f.attention
        .iter()
        .filter_map(|&a| g.attention_weights(a))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub auc: f64,
    pub acc: f64,
    pub n_predictions: usize,
}

/// Adapts a refined checkpoint once per `lambda` and evaluates each result.
pub fn sweep_lambda(ckpt: &Checkpoint, target: &Dataset, values: &[f64]) -> Result<Vec<SweepPoint>> {
    values
        .iter()
        .map(|&lambda| {
            let adapted = adapt_target_with(ckpt, target, lambda, &mut NoMetrics)?;
            let s = evaluate(&adapted, target)?;
            Ok(SweepPoint {
                lambda,
                auc: s.auc,
                acc: s.acc,
                n_predictions: s.n_predictions,
            })
        })
        .collect()
}

/// Tensor digests keyed by name, for freeze checks.
pub fn tensor_digests(store: &ParamStore) -> BTreeMap<String, String> {
    store.names().map(|n| (n.to_owned(), store.digest([n]))).collect()
}

/// Proto-question matrix of one source domain under a refined checkpoint.
pub fn source_proto_q(ckpt: &Checkpoint, domain: &DomainSpec) -> Result<QMatrix> {
    let table = ckpt.prototype_table()?;
    proto_q_matrix(&table.domain_assignment(domain.domain_id)?, &domain.q_matrix)
}
