//! Finite-difference gradient cases shared by the gradient suite and the
//! acceptance run. Each returns the worst relative error.

use std::sync::Arc;

use super::*;
use dgkt_core::autograd::{AttentionSpec, Graph, Mat, Var};
use dgkt_core::data::QMatrix;
use dgkt_core::encoders::EncoderKind;
use dgkt_core::model::{self, ModelConfig, PreparedBatch, QuestionRep, PROTOTYPES, TARGET_CONCEPTS};
use dgkt_core::params::ParamStore;
use dgkt_core::rng::seeded;
use rand_chacha::ChaCha8Rng;

pub const FLOOR: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    seeded(seed, 0)
}

pub fn seqin() -> f64 {
    let mut r = rng(1);
    let (t, d) = (4, 8);
    let lens = Arc::new(vec![4, 3]);
    let inputs = vec![
        random_mat(&mut r, 2 * t, d, 1.0),
        random_mat(&mut r, 1, d, 1.5),
        random_mat(&mut r, 1, d, 1.0),
        random_mat(&mut r, 1, d, 1.0),
    ];
    let w = random_mat(&mut r, 2 * t, d, 1.0);
    check_inputs(&inputs, FLOOR, |g, v| {
        let y = g.seq_in(v[0], v[1], v[2], v[3], lens.clone(), t, 1e-5);
        project(g, y, &w)
    })
}

pub fn attention(strict: bool, with_relation: bool, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, t, d, heads) = (2, 4, 8, 2);
    let relation: Vec<u8> = (0..b * t * t).map(|i| ((i * 7 + 3) % 3) as u8).collect();
    let relation = Arc::new(relation);
    let mut inputs = vec![
        random_mat(&mut r, b * t, d, 1.0),
        random_mat(&mut r, b * t, d, 1.0),
        random_mat(&mut r, b * t, d, 1.0),
    ];
    if with_relation {
        inputs.push(random_mat(&mut r, 1, 3, 1.0));
    }
    let w = random_mat(&mut r, b * t, d, 1.0);
    check_inputs(&inputs, FLOOR, |g, v| {
        let relevance = with_relation.then(|| {
            // a < b < c through the same reparameterization the encoder uses
            let sp = g.softplus(v[3]);
            let tri = g.constant(ndarray::array![[1.0, 1.0, 1.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]]);
            g.matmul(sp, tri)
        });
        let y = g.attention(
            v[0],
            v[1],
            v[2],
            relevance,
            AttentionSpec {
                batch: b,
                seq_len: t,
                heads,
                strict,
                relation: with_relation.then(|| relation.clone()),
            },
        );
        project(g, y, &w)
    })
}

fn tiny_config(encoder: EncoderKind) -> ModelConfig {
    ModelConfig {
        d: 8,
        n_heads: 2,
        n_layers: 2,
        encoder,
        seqin: true,
        positional: true,
        max_len: 4,
        eps: 1e-5,
    }
}

/// Parameters with SeqIN and decoder moved off their identity/zero init so
/// that every tensor gets a non-trivial gradient.
fn tiny_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let domain = tiny_domain(0);
    let mut r = rng(seed);
    let mut store = model::init_params(cfg, &[&domain], &mut r).unwrap();
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for n in names {
        let m = store.get_mut(&n).unwrap();
        let noise = random_mat(&mut r, m.nrows(), m.ncols(), 0.3);
        *m += &noise;
    }
    store.init_uniform(PROTOTYPES, 3, cfg.d, 0.5, &mut r);
    store.init_uniform(TARGET_CONCEPTS, domain.n_concepts, cfg.d, 0.5, &mut r);
    store
}

fn model_err(cfg: &ModelConfig, rep: &QuestionRep, names: &[&str], seed: u64) -> f64 {
    let domain = tiny_domain(0);
    let store = tiny_store(cfg, seed);
    let batch = PreparedBatch::new(&tiny_batch(0), &domain, cfg.encoder == EncoderKind::Ra).unwrap();
    check_store(&store, names, FLOOR, |g: &mut Graph, b| -> Var {
        model::forward(g, b, cfg, &domain, rep, &batch).unwrap().loss
    })
}

/// Whole-model loss gradient for every tensor whose name starts with one
/// of `prefixes`.
fn encoder_err(kind: EncoderKind, prefixes: &[&str], seed: u64) -> f64 {
    let cfg = tiny_config(kind);
    let store = tiny_store(&cfg, seed);
    let names: Vec<&str> = store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect();
    model_err(&cfg, &QuestionRep::Concepts, &names, seed)
}

pub fn dkt() -> f64 {
    encoder_err(EncoderKind::Dkt, &["encoder/dkt", "seqin/", "concepts/"], 4)
}

pub fn saint() -> f64 {
    encoder_err(EncoderKind::Saint, &["encoder/saint", "seqin/"], 5)
}

pub fn ra() -> f64 {
    encoder_err(EncoderKind::Ra, &["encoder/ra", "relevance/", "seqin/", "concepts/"], 6)
}

pub fn decoder() -> f64 {
    encoder_err(EncoderKind::Ra, &["decoder/"], 7)
}

pub fn lambda_mix(lambda: f64) -> f64 {
    let cfg = tiny_config(EncoderKind::Ra);
    model_err(&cfg, &QuestionRep::Target { lambda }, &[TARGET_CONCEPTS, PROTOTYPES], 8)
}

pub fn prototypes() -> f64 {
    let cfg = tiny_config(EncoderKind::Ra);
    // questions 0..4 map onto prototypes {0}, {1}, {0,1}, {2}, {1,2}
    let proto_q = QMatrix::from_dense(&[
        vec![1, 0, 1, 0, 0],
        vec![0, 1, 1, 0, 1],
        vec![0, 0, 0, 1, 1],
    ])
    .unwrap();
    let rep = QuestionRep::Prototypes {
        proto_q: Arc::new(proto_q),
    };
    model_err(&cfg, &rep, &[PROTOTYPES], 9)
}

pub fn bce() -> f64 {
    let p = Mat::from_shape_fn((6, 1), |(i, _)| 0.1 + 0.13 * i as f64);
    let targets = Arc::new(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let weights = Arc::new(vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    check_inputs(&[p], FLOOR, |g, v| g.bce(v[0], targets.clone(), weights.clone(), 1e-7))
}
