mod common;

use std::sync::Arc;

use common::*;
use dgkt_core::aggregation::kmeans;
use dgkt_core::autograd::{AttentionSpec, Graph, Mat};
use dgkt_core::data::{window_and_filter, Batch, DomainSpec, Interaction, QMatrix, PAD_ID};
use dgkt_core::embedding::{question_embedding, target_question_embedding, ConceptTable, PrototypeTable, TargetConceptTable};
use dgkt_core::encoders::{EncoderKind, RelevanceParams};
use dgkt_core::metrics::auc;
use dgkt_core::model::{self, ModelConfig, PreparedBatch, QuestionRep};
use dgkt_core::params::{Binder, ParamStore};
use dgkt_core::rng::seeded;
use dgkt_core::seqin::{seqin_forward, SeqInParams};
use dgkt_core::synth::{generate_domain, SyntheticDomainConfig};
use proptest::prelude::*;

fn mat(t: usize, d: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0..3.0f64, t * d).prop_map(move |v| Mat::from_shape_vec((t, d), v).unwrap())
}

fn seqin_params(d: usize) -> impl Strategy<Value = SeqInParams> {
    (
        prop::collection::vec(0.2..2.0f64, d),
        prop::collection::vec(-1.0..1.0f64, d),
        prop::collection::vec(-1.0..1.0f64, d),
    )
        .prop_map(|(g, b, p)| SeqInParams {
            gamma: g.into(),
            beta: b.into(),
            pad: p.into(),
            epsilon: 1e-5,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seqin_prefix_outputs_ignore_the_future(
        (t, d, cut) in (2usize..24, 1usize..6).prop_flat_map(|(t, d)| (Just(t), Just(d), 1..t)),
        seed in any::<u64>(),
    ) {
        let mut r = seeded(seed, 0);
        let a = random_mat(&mut r, t, d, 2.0);
        let mut b = random_mat(&mut r, t, d, 2.0);
        b.slice_mut(ndarray::s![..cut, ..]).assign(&a.slice(ndarray::s![..cut, ..]));
        let params = SeqInParams { pad: random_mat(&mut r, 1, d, 1.0).row(0).to_owned(), ..SeqInParams::identity(d) };
        let mask = vec![1u8; t];
        let ya = seqin_forward(&a, &mask, &params).unwrap();
        let yb = seqin_forward(&b, &mask, &params).unwrap();
        for i in 0..cut {
            for c in 0..d {
                prop_assert_eq!(ya[[i, c]].to_bits(), yb[[i, c]].to_bits());
            }
        }
    }

    #[test]
    fn seqin_is_shift_and_scale_invariant(
        m in mat(10, 3),
        pad in prop::collection::vec(-1.0..1.0f64, 3),
        c in 0.25..8.0f64,
        u in prop::collection::vec(-5.0..5.0f64, 3),
    ) {
        // epsilon only guards division by zero; it is taken negligible here so
        // the exact invariance of the statistics is what gets tested
        let p1 = SeqInParams { pad: pad.clone().into(), epsilon: 1e-12, ..SeqInParams::identity(3) };
        let mut m2 = m.clone();
        let mut pad2 = pad.clone();
        for j in 0..3 {
            m2.column_mut(j).mapv_inplace(|v| c * v + u[j]);
            pad2[j] = c * pad[j] + u[j];
        }
        let p2 = SeqInParams { pad: pad2.into(), ..p1.clone() };
        let mask = vec![1u8; 10];
        let y1 = seqin_forward(&m, &mask, &p1).unwrap();
        let y2 = seqin_forward(&m2, &mask, &p2).unwrap();
        for (a, b) in y1.iter().zip(y2.iter()) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn seqin_padded_steps_are_zero(m in mat(8, 2), len in 1usize..8, params in seqin_params(2)) {
        let mask: Vec<u8> = (0..8).map(|i| u8::from(i < len)).collect();
        let y = seqin_forward(&m, &mask, &params).unwrap();
        let full = seqin_forward(&m.slice(ndarray::s![..len, ..]).to_owned(), &vec![1; len], &params).unwrap();
        for i in 0..8 {
            for c in 0..2 {
                let want = if i < len { full[[i, c]] } else { 0.0 };
                prop_assert_eq!(y[[i, c]].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        pairs in prop::collection::vec((-4.0..4.0f64, 0u8..2), 2..60),
    ) {
        let (s, y): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        prop_assume!(y.contains(&0) && y.contains(&1));
        let a = auc(&s, &y).unwrap();
        let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(a, auc(&t, &y).unwrap());
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((a + auc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn windows_reproduce_each_history(
        lens in prop::collection::vec(0usize..90, 1..6),
        window in 2usize..40,
        min_total in 1usize..30,
    ) {
        let mut log = Vec::new();
        for (s, &n) in lens.iter().enumerate() {
            for i in 0..n {
                log.push(Interaction {
                    student_id: format!("s{s}"),
                    question_id: ((s * 31 + i * 7) % 13) as u32,
                    concept_ids: vec![0],
                    correct: ((s + i) % 3 == 0) as u8,
                    position: i as u32,
                });
            }
        }
        // interleave students as a real log would be
        log.sort_by_key(|it| (it.position, it.student_id.clone()));
        let seqs = window_and_filter(&log, 3, window, min_total).unwrap();
        for (s, &n) in lens.iter().enumerate() {
            let id = format!("s{s}");
            let mine: Vec<_> = seqs.iter().filter(|q| q.student_id == id).collect();
            if n < min_total {
                prop_assert!(mine.is_empty());
                continue;
            }
            prop_assert_eq!(mine.len(), n.div_ceil(window));
            let mut rebuilt = Vec::new();
            for q in &mine {
                prop_assert_eq!(q.domain_id, 3);
                prop_assert_eq!(q.window_length(), window);
                q.check().unwrap();
                for i in 0..q.valid_len() {
                    rebuilt.push((q.questions[i], q.responses[i]));
                }
            }
            let original: Vec<_> = log
                .iter()
                .filter(|it| it.student_id == id)
                .map(|it| (it.question_id, it.correct))
                .collect();
            prop_assert_eq!(rebuilt, original);
        }
    }

    #[test]
    fn kmeans_trace_never_increases(
        n in 3usize..40,
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= n);
        let mut r = seeded(seed, 1);
        let pts = random_mat(&mut r, n, 3, 2.0);
        let km = kmeans(&pts, k, seed, 300, 1e-9).unwrap();
        for w in km.sse_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0), "{:?}", km.sse_trace);
        }
        let mut used = vec![false; k];
        for &l in &km.labels {
            used[l] = true;
        }
        prop_assert!(used.iter().all(|&u| u), "empty cluster");
    }

    #[test]
    fn question_embeddings_stay_in_the_hull(
        seed in any::<u64>(),
        lambda in 0.0..=1.0f64,
    ) {
        let mut r = seeded(seed, 2);
        let dense: Vec<Vec<u8>> = (0..5)
            .map(|c| (0..7).map(|q| u8::from((q + c) % 3 == 0 || c == q % 5)).collect())
            .collect();
        let domain = DomainSpec::new(0, QMatrix::from_dense(&dense).unwrap());
        let table = ConceptTable { embeddings: random_mat(&mut r, 5, 4, 1.0), domain_id: 0, trainable: true };
        let protos = PrototypeTable {
            embeddings: random_mat(&mut r, 3, 4, 1.0),
            labels: vec![0, 1, 2],
            domains: vec![(9, 0, 3)],
        };
        let target = TargetConceptTable { embeddings: table.embeddings.clone(), init_choices: vec![0; 5], lambda };
        for q in 0..7 {
            let e = question_embedding(q, &domain, &table).unwrap();
            let rows: Vec<usize> = domain.q_matrix.concepts(q).iter().map(|&c| c as usize).collect();
            for j in 0..4 {
                let lo = rows.iter().map(|&c| table.embeddings[[c, j]]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|&c| table.embeddings[[c, j]]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(e[j] >= lo - 1e-12 && e[j] <= hi + 1e-12);
            }
            // the anchored embedding lies on the segment between e_q and a prototype
            let t = target_question_embedding(q, &domain, &target, &protos).unwrap();
            let near = (0..3)
                .min_by(|&a, &b| {
                    let da = (&protos.embeddings.row(a) - &e).mapv(|v| v * v).sum();
                    let db = (&protos.embeddings.row(b) - &e).mapv(|v| v * v).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            let want = &protos.embeddings.row(near) * (1.0 - lambda) + &e * lambda;
            for j in 0..4 {
                prop_assert!((t[j] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_embedding_is_lipschitz_in_lambda(
        seed in any::<u64>(),
        l1 in 0.0..=1.0f64,
        l2 in 0.0..=1.0f64,
    ) {
        let mut r = seeded(seed, 3);
        let domain = tiny_domain(0);
        let protos = PrototypeTable {
            embeddings: random_mat(&mut r, 3, 4, 1.0),
            labels: vec![0, 1, 2],
            domains: vec![(9, 0, 3)],
        };
        let emb = random_mat(&mut r, 4, 4, 1.0);
        let at = |lambda| TargetConceptTable { embeddings: emb.clone(), init_choices: vec![0; 4], lambda };
        let table = ConceptTable { embeddings: emb.clone(), domain_id: 0, trainable: true };
        for q in 0..5 {
            let e = question_embedding(q, &domain, &table).unwrap();
            let at0 = target_question_embedding(q, &domain, &at(0.0), &protos).unwrap();
            let o1 = target_question_embedding(q, &domain, &at(l1), &protos).unwrap();
            let o2 = target_question_embedding(q, &domain, &at(l2), &protos).unwrap();
            let lhs = (&o1 - &o2).mapv(|v| v * v).sum().sqrt();
            let rhs = (l1 - l2).abs() * (&e - &at0).mapv(|v| v * v).sum().sqrt();
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn permuting_concepts_keeps_question_embeddings(seed in any::<u64>()) {
        let mut r = seeded(seed, 4);
        let dense = vec![vec![1, 0, 1, 0], vec![0, 1, 1, 0], vec![1, 0, 0, 1]];
        let perm = [2usize, 0, 1];
        let emb = random_mat(&mut r, 3, 5, 1.0);
        let mut dense2 = vec![Vec::new(); 3];
        let mut emb2 = Mat::zeros((3, 5));
        for (old, &new) in perm.iter().enumerate() {
            dense2[new] = dense[old].clone();
            emb2.row_mut(new).assign(&emb.row(old));
        }
        let d1 = DomainSpec::new(0, QMatrix::from_dense(&dense).unwrap());
        let d2 = DomainSpec::new(0, QMatrix::from_dense(&dense2).unwrap());
        let t1 = ConceptTable { embeddings: emb, domain_id: 0, trainable: true };
        let t2 = ConceptTable { embeddings: emb2, domain_id: 0, trainable: true };
        for q in 0..4 {
            let a = question_embedding(q, &d1, &t1).unwrap();
            let b = question_embedding(q, &d2, &t2).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjusted_attention_is_a_distribution(
        seed in any::<u64>(),
        u in prop::collection::vec(-3.0..3.0f64, 3),
        strict in any::<bool>(),
    ) {
        let mut r = seeded(seed, 5);
        let (b, t, d, heads) = (2, 6, 8, 2);
        let relation: Vec<u8> = (0..b * t * t).map(|_| rand::Rng::gen_range(&mut r, 0..3u8)).collect();
        let w = RelevanceParams { u_a: u[0], u_b: u[1], u_c: u[2] }.weights();
        let mut g = Graph::new();
        let q = g.constant(random_mat(&mut r, b * t, d, 2.0));
        let k = g.constant(random_mat(&mut r, b * t, d, 2.0));
        let v = g.constant(random_mat(&mut r, b * t, d, 2.0));
        let lam = g.constant(ndarray::array![[w[0], w[1], w[2]]]);
        let out = g.attention(q, k, v, Some(lam), AttentionSpec {
            batch: b, seq_len: t, heads, strict, relation: Some(Arc::new(relation)),
        });
        let weights = g.attention_weights(out).unwrap();
        for m in &weights {
            for j in 0..t {
                let row = m.row(j);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                let visible = if strict { j } else { j + 1 };
                prop_assert!(row.iter().skip(visible).all(|&x| x == 0.0));
                if visible > 0 {
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                }
            }
        }
        // the first step of a strict layer has no history and outputs zeros
        if strict {
            for bi in 0..b {
                prop_assert!(g.value(out).row(bi * t).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn larger_relation_gets_no_less_mass(
        u in prop::collection::vec(-3.0..3.0f64, 3),
        rel in prop::collection::vec(0u8..3, 5),
    ) {
        // equal logits: only the relevance weights shape the distribution
        let t = 6;
        let mut flat = vec![0u8; t * t];
        for i in 0..5 {
            flat[5 * t + i] = rel[i];
        }
        let w = RelevanceParams { u_a: u[0], u_b: u[1], u_c: u[2] }.weights();
        let mut g = Graph::new();
        let q = g.constant(Mat::zeros((t, 4)));
        let k = g.constant(Mat::zeros((t, 4)));
        let v = g.constant(Mat::zeros((t, 4)));
        let lam = g.constant(ndarray::array![[w[0], w[1], w[2]]]);
        let out = g.attention(q, k, v, Some(lam), AttentionSpec {
            batch: 1, seq_len: t, heads: 1, strict: true, relation: Some(Arc::new(flat)),
        });
        let m = &g.attention_weights(out).unwrap()[0];
        for i in 0..5 {
            for j in 0..5 {
                if rel[i] > rel[j] {
                    prop_assert!(m[[5, i]] > m[[5, j]]);
                }
                if rel[i] == rel[j] {
                    prop_assert_eq!(m[[5, i]], m[[5, j]]);
                }
            }
        }
    }
}

fn causality_config(encoder: EncoderKind) -> ModelConfig {
    ModelConfig {
        d: 8,
        n_heads: 2,
        n_layers: 2,
        encoder,
        seqin: true,
        positional: true,
        max_len: 12,
        eps: 1e-5,
    }
}

fn predictions(cfg: &ModelConfig, store: &ParamStore, domain: &DomainSpec, steps: &[(u32, u8)]) -> Vec<f64> {
    let batch = Batch { sequences: vec![sequence(0, "x", steps, steps.len())] };
    let prepared = PreparedBatch::new(&batch, domain, cfg.encoder == EncoderKind::Ra).unwrap();
    let none = Default::default();
    let mut g = Graph::new();
    let mut binder = Binder::new(store, &none);
    let f = model::forward(&mut g, &mut binder, cfg, domain, &QuestionRep::Concepts, &prepared).unwrap();
    g.value(f.predictions).column(0).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The prediction for step t may use the question at t but nothing else
    /// from step t onwards.
    #[test]
    fn encoders_are_causal(
        kind in prop::sample::select(vec![EncoderKind::Dkt, EncoderKind::Saint, EncoderKind::Ra]),
        steps in prop::collection::vec((0u32..5, 0u8..2), 4..12),
        other in prop::collection::vec((0u32..5, 0u8..2), 12),
        cut_frac in 0.0..1.0f64,
        seed in any::<u64>(),
    ) {
        let cfg = causality_config(kind);
        let domain = tiny_domain(0);
        let store = model::init_params(&cfg, &[&domain], &mut seeded(seed, 6)).unwrap();
        let t = steps.len();
        let cut = 1 + ((t - 1) as f64 * cut_frac) as usize;
        let mut changed = steps.clone();
        for i in cut..t {
            changed[i] = other[i];
        }
        // the question at the cut is visible to its own prediction
        changed[cut].0 = steps[cut].0;
        let a = predictions(&cfg, &store, &domain, &steps);
        let b = predictions(&cfg, &store, &domain, &changed);
        for i in 0..=cut {
            prop_assert_eq!(a[i].to_bits(), b[i].to_bits(), "{:?} step {}", kind, i);
        }
    }
}

#[test]
fn seqin_cost_is_linear_in_length() {
    use std::time::Instant;
    let d = 16;
    let params = SeqInParams::identity(d);
    let time = |t: usize| {
        let m = Mat::from_shape_fn((t, d), |(i, j)| ((i * 13 + j * 7) % 17) as f64);
        let mask = vec![1u8; t];
        let start = Instant::now();
        for _ in 0..5 {
            std::hint::black_box(seqin_forward(&m, &mask, &params).unwrap());
        }
        start.elapsed().as_secs_f64()
    };
    time(1000);
    let small = time(2000);
    let large = time(32000);
    // 16x the length; a quadratic rescan would cost ~256x
    assert!(large / small < 64.0, "ratio {}", large / small);
}

#[test]
fn faster_learners_end_stronger() {
    let base = SyntheticDomainConfig {
        n_students: 150,
        n_questions: 30,
        n_concepts: 6,
        concepts_per_question: (1, 2),
        learn_rate: 0.05,
        learn_rate_spread: 0.0,
        guess: 0.2,
        slip: 0.1,
        difficulty_shift: 0.0,
        interactions_per_student: (40, 40),
        repeat_prob: 0.5,
        seed: 11,
    };
    let fast = SyntheticDomainConfig { learn_rate: 0.4, ..base.clone() };
    let last_quartile = |cfg: &SyntheticDomainConfig| {
        let dom = generate_domain(cfg, 0).unwrap();
        let tail: Vec<f64> = dom
            .interactions
            .iter()
            .filter(|it| it.position >= 30)
            .map(|it| f64::from(it.correct))
            .collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let (slow, quick) = (last_quartile(&base), last_quartile(&fast));
    assert!(quick >= slow, "fast {quick} < slow {slow}");
}

#[test]
fn pad_id_never_reaches_the_embedding() {
    // a padded batch row must produce a zero question embedding
    let domain = tiny_domain(0);
    let batch = Batch {
        sequences: vec![sequence(0, "a", &[(0, 1), (1, 0), (2, 1)], 3), sequence(0, "b", &[(3, 1), (4, 0)], 3)],
    };
    let p = PreparedBatch::new(&batch, &domain, false).unwrap();
    assert_eq!(p.questions[5], PAD_ID);
    let cfg = causality_config(EncoderKind::Dkt);
    let store = model::init_params(&cfg, &[&domain], &mut seeded(1, 7)).unwrap();
    let none = Default::default();
    let mut g = Graph::new();
    let mut binder = Binder::new(&store, &none);
    let f = model::forward(&mut g, &mut binder, &cfg, &domain, &QuestionRep::Concepts, &p).unwrap();
    assert!(g.value(f.question_embeddings).row(5).iter().all(|&v| v == 0.0));
}
