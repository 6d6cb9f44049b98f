//! The full knowledge-tracing model: question representation, encoder,
//! decoder and loss over a batch.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::data::{Batch, DomainSpec, QMatrix, PAD_ID};
use crate::decoder::{self, DecoderParams, PROB_CLAMP};
use crate::embedding::{anchor_to_prototypes, mean_rows};
use crate::encoders::{self, EncoderInputs, EncoderKind};
use crate::error::{Error, Result};
use crate::metrics::PredictionLog;
use crate::params::{Binder, ParamStore};
use crate::seqin::DEFAULT_EPS;

pub const PROTOTYPES: &str = "prototypes";
pub const TARGET_CONCEPTS: &str = "target_concepts";

pub fn concepts_key(domain_id: u32) -> String {
    format!("concepts/{domain_id}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub encoder: EncoderKind,
    /// Apply sequence instance normalization inside the encoder.
    pub seqin: bool,
    pub positional: bool,
    pub max_len: usize,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            n_heads: 4,
            n_layers: 2,
            encoder: EncoderKind::Ra,
            seqin: true,
            positional: true,
            max_len: 200,
            eps: DEFAULT_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.n_layers == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument("model sizes must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        Ok(())
    }
}

/// How questions are embedded.
#[derive(Clone, Debug)]
pub enum QuestionRep {
    /// Mean of the domain's own concept table.
    Concepts,
    /// Mean of the prototypes linked to each question.
    Prototypes { proto_q: Arc<QMatrix> },
    /// Target concept mean anchored to its nearest prototype.
    Target { lambda: f64 },
}

/// Encoder, normalization, relevance and decoder tensors.
pub fn is_shared(name: &str) -> bool {
    name.starts_with("encoder/")
        || name.starts_with("seqin/")
        || name.starts_with("relevance/")
        || name.starts_with("decoder/")
}

pub fn shared_names(store: &ParamStore) -> BTreeSet<String> {
    store.names().filter(|n| is_shared(n)).map(str::to_owned).collect()
}

/// Fresh store with one concept table per domain plus encoder and decoder.
pub fn init_params(cfg: &ModelConfig, domains: &[&DomainSpec], rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let scale = 1.0 / (cfg.d as f64).sqrt();
    for dom in domains {
        store.init_uniform(&concepts_key(dom.domain_id), dom.n_concepts, cfg.d, scale, rng);
    }
    encoders::init_encoder(&mut store, cfg, rng);
    DecoderParams::init(cfg.d, rng).insert_into(&mut store);
    Ok(store)
}

/// A batch laid out as flat `B * T` arrays, trimmed to its longest sequence.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub questions: Vec<u32>,
    pub responses: Vec<u8>,
    pub lens: Arc<Vec<usize>>,
    pub loss_weights: Arc<Vec<f64>>,
    pub relation: Option<Arc<Vec<u8>>>,
}

impl PreparedBatch {
    pub fn new(batch: &Batch, domain: &DomainSpec, with_relation: bool) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        for s in &batch.sequences {
            s.check()?;
            if s.domain_id != domain.domain_id {
                return Err(Error::InvalidArgument(format!(
                    "sequence of domain {} fed with domain {}",
                    s.domain_id, domain.domain_id
                )));
            }
        }
        let lens: Vec<usize> = batch.sequences.iter().map(|s| s.valid_len()).collect();
        let t = lens.iter().copied().max().unwrap_or(0).max(1);
        let b = batch.len();
        let mut questions = Vec::with_capacity(b * t);
        let mut responses = Vec::with_capacity(b * t);
        let mut weights = Vec::with_capacity(b * t);
        let mut relation = with_relation.then(|| Vec::with_capacity(b * t * t));
        for s in &batch.sequences {
            let n = s.valid_len();
            for i in 0..t {
                let valid = i < n;
                questions.push(if valid { s.questions[i] } else { PAD_ID });
                responses.push(if valid { s.responses[i] } else { 0 });
                weights.push(if valid && i >= 1 { 1.0 } else { 0.0 });
            }
            if let Some(rel) = relation.as_mut() {
                let r = encoders::relevance_matrix(&questions[questions.len() - t..], &domain.q_matrix)?;
                for row in r.iter().take(t) {
                    rel.extend_from_slice(&row[..t]);
                }
            }
        }
        Ok(Self {
            batch: b,
            seq_len: t,
            questions,
            responses,
            lens: Arc::new(lens),
            loss_weights: Arc::new(weights),
            relation: relation.map(Arc::new),
        })
    }

    pub fn n_targets(&self) -> usize {
        self.loss_weights.iter().filter(|&&w| w > 0.0).count()
    }
}

pub struct Forward {
    pub loss: Var,
    pub predictions: Var,
    pub states: Var,
    pub features: Var,
    pub question_embeddings: Var,
    pub attention: Vec<Var>,
}

pub fn question_embeddings(
    g: &mut Graph,
    binder: &mut Binder,
    domain: &DomainSpec,
    rep: &QuestionRep,
    questions: &[u32],
) -> Result<Var> {
    match rep {
        QuestionRep::Concepts => {
            let table = binder.get(g, &concepts_key(domain.domain_id))?;
            mean_rows(g, table, questions, &domain.q_matrix)
        }
        QuestionRep::Prototypes { proto_q } => {
            let table = binder.get(g, PROTOTYPES)?;
            mean_rows(g, table, questions, proto_q)
        }
        QuestionRep::Target { lambda } => {
            let table = binder.get(g, TARGET_CONCEPTS)?;
            let protos = binder.get(g, PROTOTYPES)?;
            let e = mean_rows(g, table, questions, &domain.q_matrix)?;
            let active: Vec<bool> = questions.iter().map(|&q| q != PAD_ID).collect();
            Ok(anchor_to_prototypes(g, e, protos, *lambda, &active))
        }
    }
}

/// Builds the whole batch computation; `loss` is the mean cross-entropy
/// over valid steps after the first.
pub fn forward(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    domain: &DomainSpec,
    rep: &QuestionRep,
    batch: &PreparedBatch,
) -> Result<Forward> {
    if batch.seq_len > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_len {}",
            batch.seq_len, cfg.max_len
        )));
    }
    let e_q = question_embeddings(g, binder, domain, rep, &batch.questions)?;
    let correct: Vec<f64> = batch.responses.iter().map(|&r| f64::from(r)).collect();
    let wrong: Vec<f64> = batch
        .responses
        .iter()
        .zip(&batch.questions)
        .map(|(&r, &q)| if q != PAD_ID && r == 0 { 1.0 } else { 0.0 })
        .collect();
    let left = g.scale_rows(e_q, Arc::new(correct));
    let right = g.scale_rows(e_q, Arc::new(wrong));
    let mqr = g.concat_cols(&[left, right]);
    let inputs = EncoderInputs {
        mq: e_q,
        mqr,
        batch: batch.batch,
        seq_len: batch.seq_len,
        lens: batch.lens.clone(),
        relation: batch.relation.clone(),
    };
    let enc = encoders::encode(g, binder, cfg, &inputs)?;
    let predictions = decoder::decode_graph(g, binder, enc.states, e_q)?;
    if batch.n_targets() == 0 {
        return Err(Error::Empty("batch has no step with history".into()));
    }
    let targets = Arc::new(batch.responses.iter().map(|&r| f64::from(r)).collect());
    let loss = g.bce(predictions, targets, batch.loss_weights.clone(), PROB_CLAMP);
    Ok(Forward {
        loss,
        predictions,
        states: enc.states,
        features: enc.features,
        question_embeddings: e_q,
        attention: enc.attention,
    })
}

/// Appends the scored steps of a forward pass to `log`.
pub fn record_predictions(g: &Graph, fwd: &Forward, batch: &PreparedBatch, log: &mut PredictionLog) {
    let p = g.value(fwd.predictions);
    for (i, &w) in batch.loss_weights.iter().enumerate() {
        if w > 0.0 {
            log.push(p[[i, 0]], batch.responses[i]);
        }
    }
}

/// Knowledge states mean-pooled over each sequence's scored steps.
pub fn pooled_states(g: &Graph, fwd: &Forward, batch: &PreparedBatch) -> Mat {
    let s = g.value(fwd.states);
    let d = s.ncols();
    let mut out = Mat::zeros((batch.batch, d));
    for b in 0..batch.batch {
        let mut n = 0.0;
        for t in 0..batch.seq_len {
            let r = b * batch.seq_len + t;
            if batch.loss_weights[r] > 0.0 {
                out.row_mut(b).scaled_add(1.0, &s.row(r));
                n += 1.0;
            }
        }
        if n > 0.0 {
            out.row_mut(b).mapv_inplace(|v| v / n);
        }
    }
    out
}
