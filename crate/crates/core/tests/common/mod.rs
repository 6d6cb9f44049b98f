#![allow(dead_code)]

pub mod brute;
pub mod cases;

use std::collections::BTreeSet;

use dgkt_core::autograd::{Graph, Mat, Var};
use dgkt_core::data::{Batch, DomainSpec, InteractionSequence, QMatrix, PAD_ID};
use dgkt_core::dataset::Dataset;
use dgkt_core::params::{Binder, ParamStore};
use dgkt_core::pipeline::TrainConfig;
use dgkt_core::synth::{generate_multisource, MultiSource, SyntheticDomainConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Worst elementwise relative error between analytic and central-difference
/// gradients, `|a - n| / max(|a|, |n|, floor)`.
fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Gradient check for a scalar function of plain input matrices. `build`
/// must return a `1 x 1` node and be deterministic.
pub fn check_inputs<F>(inputs: &[Mat], floor: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Mat]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|m| g.param(m.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let mut worst = 0.0_f64;
    for (i, m) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Mat::zeros(m.dim()));
        for idx in 0..m.len() {
            let (r, c) = (idx / m.ncols(), idx % m.ncols());
            let mut plus = inputs.to_vec();
            plus[i][[r, c]] += STEP;
            let mut minus = inputs.to_vec();
            minus[i][[r, c]] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[[r, c]], numeric, floor));
        }
    }
    worst
}

/// Gradient check over every entry of the named tensors of a parameter
/// store.
pub fn check_store<F>(store: &ParamStore, names: &[&str], floor: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &mut Binder) -> Var,
{
    let trainable: BTreeSet<String> = names.iter().map(|s| s.to_string()).collect();
    let eval = |s: &ParamStore| {
        let none = BTreeSet::new();
        let mut g = Graph::new();
        let mut b = Binder::new(s, &none);
        let out = build(&mut g, &mut b);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let mut binder = Binder::new(store, &trainable);
    let out = build(&mut g, &mut binder);
    let mut grads = g.backward(out);
    let collected = binder.collect(&mut grads);
    let mut worst = 0.0_f64;
    for name in names {
        let m = store.require(name).unwrap();
        let analytic = collected.get(*name).cloned().unwrap_or_else(|| Mat::zeros(m.dim()));
        for idx in 0..m.len() {
            let (r, c) = (idx / m.ncols(), idx % m.ncols());
            let mut plus = store.clone();
            plus.get_mut(name).unwrap()[[r, c]] += STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap()[[r, c]] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[[r, c]], numeric, floor));
        }
    }
    worst
}

/// Weighted sum of all entries, so every output element gets a distinct,
/// O(1) upstream gradient.
pub fn project(g: &mut Graph, x: Var, weights: &Mat) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(x, w);
    g.sum_all(p)
}

/// Small four-concept domain.
pub fn tiny_domain(domain_id: u32) -> DomainSpec {
    DomainSpec::new(
        domain_id,
        QMatrix::from_dense(&[
            vec![1, 0, 1, 0, 0],
            vec![0, 1, 1, 0, 0],
            vec![0, 0, 0, 1, 1],
            vec![0, 0, 0, 0, 1],
        ])
        .unwrap(),
    )
}

pub fn sequence(domain_id: u32, student: &str, steps: &[(u32, u8)], window: usize) -> InteractionSequence {
    let mut s = InteractionSequence {
        student_id: student.into(),
        domain_id,
        questions: vec![PAD_ID; window],
        responses: vec![0; window],
        mask: vec![0; window],
    };
    for (i, &(q, r)) in steps.iter().enumerate() {
        s.questions[i] = q;
        s.responses[i] = r;
        s.mask[i] = 1;
    }
    s
}

/// Two short sequences of different lengths over [`tiny_domain`].
pub fn tiny_batch(domain_id: u32) -> Batch {
    Batch {
        sequences: vec![
            sequence(domain_id, "a", &[(0, 1), (2, 0), (0, 1), (4, 1)], 4),
            sequence(domain_id, "b", &[(3, 0), (1, 1), (3, 1)], 4),
        ],
    }
}

pub fn small_domain(n_students: usize, n_questions: usize, n_concepts: usize, shift: f64, seed: u64) -> SyntheticDomainConfig {
    SyntheticDomainConfig {
        n_students,
        n_questions,
        n_concepts,
        concepts_per_question: (1, 2),
        learn_rate: 0.25,
        learn_rate_spread: 0.5,
        guess: 0.2,
        slip: 0.1,
        difficulty_shift: shift,
        interactions_per_student: (20, 30),
        repeat_prob: 0.6,
        seed,
    }
}

/// Three small sources and a target; every student fits in one window.
pub fn small_world(seed: u64) -> (MultiSource, Vec<Dataset>, Dataset) {
    let ms = generate_multisource(
        &[
            small_domain(60, 20, 5, -0.5, seed * 10 + 1),
            small_domain(60, 25, 6, 0.0, seed * 10 + 2),
            small_domain(60, 30, 7, 0.5, seed * 10 + 3),
        ],
        &small_domain(100, 24, 6, 0.2, seed * 10 + 4),
    )
    .unwrap();
    let sources = ms.sources.iter().map(|d| d.to_dataset(40, 20, 0.8, seed).unwrap()).collect();
    let target = ms.target.to_dataset(40, 20, 0.8, seed).unwrap();
    (ms, sources, target)
}

pub fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk().with_seed(3);
    cfg.model.d = 8;
    cfg.model.n_heads = 2;
    cfg.batch_size = 16;
    cfg.k = 4;
    cfg.lr = 3e-3;
    cfg.phase1_epochs = 20;
    cfg.phase2_epochs = 10;
    cfg.adapt_epochs = 10;
    cfg.scratch_epochs = 20;
    cfg
}
