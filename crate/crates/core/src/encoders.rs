//! Knowledge-state encoders.
//!
//! Every encoder maps the question embeddings `M_q` (`B*T x d`) and the
//! question-response embeddings `M_qr` (`B*T x 2d`) to a state matrix whose
//! row `t` of each sequence summarizes responses strictly before `t` (and
//! questions up to `t`); that row is what the decoder uses to predict the
//! response at `t`. The first step of every sequence has no history and gets
//! a learned start vector.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Mat, RowMix, Var};
use crate::data::{QMatrix, PAD_ID};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Binder, ParamStore};
use crate::seqin::{self, SeqInSite};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Dkt,
    Saint,
    Ra,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Dkt => "dkt",
            EncoderKind::Saint => "saint",
            EncoderKind::Ra => "ra",
        }
    }

    pub fn prefix(self) -> String {
        format!("encoder/{}", self.name())
    }

    pub fn seqin_site(self) -> SeqInSite {
        match self {
            EncoderKind::Dkt => SeqInSite::DktH,
            EncoderKind::Saint => SeqInSite::SaintO,
            EncoderKind::Ra => SeqInSite::RaX,
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dkt" => Ok(EncoderKind::Dkt),
            "saint" => Ok(EncoderKind::Saint),
            "ra" | "dgrkt" => Ok(EncoderKind::Ra),
            other => Err(Error::InvalidArgument(format!("unknown encoder `{other}`"))),
        }
    }
}

pub const RELEVANCE_KEYS: [&str; 3] = ["relevance/u_a", "relevance/u_b", "relevance/u_c"];

/// Unconstrained relevance parameters. The weights are
/// `a = s(u_a)`, `b = a + s(u_b)`, `c = b + s(u_c)` with `s` = softplus, so
/// `0 < a < b < c` holds for any parameter values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelevanceParams {
    pub u_a: f64,
    pub u_b: f64,
    pub u_c: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl RelevanceParams {
    /// Parameters producing the given weights; requires `0 < a < b < c`.
    pub fn from_weights(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(0.0 < a && a < b && b < c) {
            return Err(Error::InvalidArgument(format!(
                "relevance weights must satisfy 0 < a < b < c, got {a}, {b}, {c}"
            )));
        }
        Ok(Self {
            u_a: inv_softplus(a),
            u_b: inv_softplus(b - a),
            u_c: inv_softplus(c - b),
        })
    }

    pub fn weights(&self) -> [f64; 3] {
        let a = softplus(self.u_a);
        let b = a + softplus(self.u_b);
        let c = b + softplus(self.u_c);
        [a, b, c]
    }

    pub fn read(store: &ParamStore) -> Result<Self> {
        let v = |k: &str| -> Result<f64> { Ok(store.require(k)?[[0, 0]]) };
        Ok(Self {
            u_a: v(RELEVANCE_KEYS[0])?,
            u_b: v(RELEVANCE_KEYS[1])?,
            u_c: v(RELEVANCE_KEYS[2])?,
        })
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        for (k, v) in RELEVANCE_KEYS.iter().zip([self.u_a, self.u_b, self.u_c]) {
            store.insert(*k, Mat::from_elem((1, 1), v));
        }
    }
}

/// Builds the `1 x 3` row `(a, b, c)` from the bound relevance parameters.
pub fn relevance_weights(g: &mut Graph, binder: &mut Binder) -> Result<Var> {
    let parts = RELEVANCE_KEYS
        .iter()
        .map(|k| binder.get(g, k))
        .collect::<Result<Vec<_>>>()?;
    let u = g.concat_cols(&parts);
    let s = g.softplus(u);
    let cum = g.constant(ndarray::array![[1.0, 1.0, 1.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]]);
    Ok(g.matmul(s, cum))
}

/// `R(i, j) = [q_i = q_j] + [concepts of q_i and q_j intersect]`, for every
/// pair of steps. Padding steps relate to nothing.
pub fn relevance_matrix(questions: &[u32], q_matrix: &QMatrix) -> Result<Vec<Vec<u8>>> {
    let t = questions.len();
    for &q in questions {
        if q != PAD_ID && q as usize >= q_matrix.n_questions() {
            return Err(Error::InvalidArgument(format!("question {q} outside vocabulary")));
        }
    }
    let mut r = vec![vec![0u8; t]; t];
    for i in 0..t {
        for j in 0..t {
            let (qi, qj) = (questions[i], questions[j]);
            if qi == PAD_ID || qj == PAD_ID {
                continue;
            }
            let same = u8::from(qi == qj);
            let shared = u8::from(q_matrix.share_concept(qi as usize, qj as usize));
            r[i][j] = same + shared;
        }
    }
    Ok(r)
}

/// Layout of one batch as the encoders see it.
pub struct EncoderInputs {
    pub mq: Var,
    pub mqr: Var,
    pub batch: usize,
    pub seq_len: usize,
    pub lens: Arc<Vec<usize>>,
    /// Per-sequence relation matrices, `[b * T * T + j * T + i]`.
    pub relation: Option<Arc<Vec<u8>>>,
}

pub struct EncoderOutput {
    pub states: Var,
    /// Pre-normalization features at the normalization site.
    pub features: Var,
    pub attention: Vec<Var>,
}

fn uniform(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
    let scale = 1.0 / (rows as f64).sqrt();
    store.init_uniform(name, rows, cols, scale, rng);
}

fn init_block(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) {
    for w in ["wq", "wk", "wv", "wo", "ff1", "ff2"] {
        uniform(store, &format!("{prefix}/{w}"), d, d, rng);
    }
    store.insert(format!("{prefix}/ff1_b"), Mat::zeros((1, d)));
    store.insert(format!("{prefix}/ff2_b"), Mat::zeros((1, d)));
}

/// Initializes every tensor of the configured encoder, including its
/// normalization site and (for the relation-aware encoder) the relevance
/// parameters.
pub fn init_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let d = cfg.d;
    let p = cfg.encoder.prefix();
    match cfg.encoder {
        EncoderKind::Dkt => {
            uniform(store, &format!("{p}/w_x"), 2 * d, 4 * d, rng);
            uniform(store, &format!("{p}/w_h"), d, 4 * d, rng);
            let mut b = Mat::zeros((1, 4 * d));
            // forget-gate bias
            b.slice_mut(ndarray::s![.., d..2 * d]).fill(1.0);
            store.insert(format!("{p}/b"), b);
        }
        EncoderKind::Saint => {
            uniform(store, &format!("{p}/w_in"), 2 * d, d, rng);
            store.init_uniform(&format!("{p}/pos_q"), cfg.max_len, d, 0.1, rng);
            store.init_uniform(&format!("{p}/pos_r"), cfg.max_len, d, 0.1, rng);
            store.init_uniform(&format!("{p}/start_r"), 1, d, 0.1, rng);
            for l in 0..cfg.n_layers {
                init_block(store, &format!("{p}/enc{l}"), d, rng);
                init_block(store, &format!("{p}/dec{l}_self"), d, rng);
                init_block(store, &format!("{p}/dec{l}_cross"), d, rng);
            }
        }
        EncoderKind::Ra => {
            uniform(store, &format!("{p}/w_in"), 2 * d, d, rng);
            store.init_uniform(&format!("{p}/pos"), cfg.max_len, d, 0.1, rng);
            for l in 0..cfg.n_layers {
                init_block(store, &format!("{p}/l{l}"), d, rng);
            }
            RelevanceParams::from_weights(1.0, 1.5, 2.0)
                .expect("ordered defaults")
                .insert_into(store);
        }
    }
    store.init_uniform(&format!("{p}/start"), 1, d, 0.1, rng);
    crate::seqin::SeqInParams::identity(d).insert_into(store, cfg.encoder.seqin_site());
}

struct Block<'a> {
    prefix: &'a str,
    query: Var,
    key: Var,
    value: Var,
    residual: Option<Var>,
    strict: bool,
}

#[allow(clippy::too_many_arguments)]
fn attention_block(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    inp: &EncoderInputs,
    blk: Block,
    relevance: Option<Var>,
    attention: &mut Vec<Var>,
) -> Result<Var> {
    let p = blk.prefix;
    let wq = binder.get(g, &format!("{p}/wq"))?;
    let wk = binder.get(g, &format!("{p}/wk"))?;
    let wv = binder.get(g, &format!("{p}/wv"))?;
    let wo = binder.get(g, &format!("{p}/wo"))?;
    let q = g.matmul(blk.query, wq);
    let k = g.matmul(blk.key, wk);
    let v = g.matmul(blk.value, wv);
    let spec = AttentionSpec {
        batch: inp.batch,
        seq_len: inp.seq_len,
        heads: cfg.n_heads,
        strict: blk.strict,
        relation: if relevance.is_some() {
            inp.relation.clone()
        } else {
            None
        },
    };
    let a = g.attention(q, k, v, relevance, spec);
    attention.push(a);
    let mut h = g.matmul(a, wo);
    if let Some(r) = blk.residual {
        h = g.add(h, r);
    }
    let f1 = binder.get(g, &format!("{p}/ff1"))?;
    let f1b = binder.get(g, &format!("{p}/ff1_b"))?;
    let f2 = binder.get(g, &format!("{p}/ff2"))?;
    let f2b = binder.get(g, &format!("{p}/ff2_b"))?;
    let z = g.matmul(h, f1);
    let z = g.add_row(z, f1b);
    let z = g.relu(z);
    let z = g.matmul(z, f2);
    let z = g.add_row(z, f2b);
    Ok(g.add(h, z))
}

fn positions(g: &mut Graph, binder: &mut Binder, name: &str, inp: &EncoderInputs) -> Result<Var> {
    let table = binder.get(g, name)?;
    if inp.seq_len > g.value(table).nrows() {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds positional table of {}",
            inp.seq_len,
            g.value(table).nrows()
        )));
    }
    let recipes: RowMix = (0..inp.batch)
        .flat_map(|_| (0..inp.seq_len).map(|t| vec![(t, 1.0)]))
        .collect();
    Ok(g.mix_rows(table, Arc::new(recipes)))
}

/// Replaces the first row of every sequence with the learned start vector.
fn with_start(g: &mut Graph, binder: &mut Binder, prefix: &str, x: Var, inp: &EncoderInputs) -> Result<Var> {
    let start = binder.get(g, &format!("{prefix}/start"))?;
    let keep: Vec<f64> = (0..inp.batch * inp.seq_len)
        .map(|r| if r % inp.seq_len == 0 { 0.0 } else { 1.0 })
        .collect();
    let kept = g.scale_rows(x, Arc::new(keep));
    let recipes: RowMix = (0..inp.batch * inp.seq_len)
        .map(|r| if r % inp.seq_len == 0 { vec![(0, 1.0)] } else { Vec::new() })
        .collect();
    let s = g.mix_rows(start, Arc::new(recipes));
    Ok(g.add(kept, s))
}

/// Row `t` of each sequence takes row `t - 1` of `x`; row 0 becomes zero.
fn shift_down(g: &mut Graph, x: Var, inp: &EncoderInputs) -> Var {
    let recipes: RowMix = (0..inp.batch * inp.seq_len)
        .map(|r| {
            if r % inp.seq_len == 0 {
                Vec::new()
            } else {
                vec![(r - 1, 1.0)]
            }
        })
        .collect();
    g.mix_rows(x, Arc::new(recipes))
}

fn normalize(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    x: Var,
    inp: &EncoderInputs,
) -> Result<Var> {
    if cfg.seqin {
        seqin::apply(
            g,
            binder,
            cfg.encoder.seqin_site(),
            x,
            inp.lens.clone(),
            inp.seq_len,
            cfg.eps,
        )
    } else {
        Ok(x)
    }
}

pub fn encode(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    inp: &EncoderInputs,
) -> Result<EncoderOutput> {
    match cfg.encoder {
        EncoderKind::Dkt => dkt_encode(g, binder, cfg, inp),
        EncoderKind::Saint => saint_encode(g, binder, cfg, inp),
        EncoderKind::Ra => dgrkt_encode(g, binder, cfg, inp),
    }
}

/// LSTM over the question-response embeddings; the normalization acts on
/// the hidden states, which are then shifted one step so that row t holds
/// the state after interaction t - 1.
pub fn dkt_encode(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    inp: &EncoderInputs,
) -> Result<EncoderOutput> {
    let p = cfg.encoder.prefix();
    let d = cfg.d;
    let (bsz, t_len) = (inp.batch, inp.seq_len);
    let w_x = binder.get(g, &format!("{p}/w_x"))?;
    let w_h = binder.get(g, &format!("{p}/w_h"))?;
    let bias = binder.get(g, &format!("{p}/b"))?;
    let xw = g.matmul(inp.mqr, w_x);
    let xw = g.add_row(xw, bias);
    let mut h = g.constant(Mat::zeros((bsz, d)));
    let mut c = g.constant(Mat::zeros((bsz, d)));
    let mut hs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let rows: RowMix = (0..bsz).map(|b| vec![(b * t_len + t, 1.0)]).collect();
        let xt = g.mix_rows(xw, Arc::new(rows));
        let hw = g.matmul(h, w_h);
        let z = g.add(xt, hw);
        let zi = g.slice_cols(z, 0, d);
        let zf = g.slice_cols(z, d, 2 * d);
        let zg = g.slice_cols(z, 2 * d, 3 * d);
        let zo = g.slice_cols(z, 3 * d, 4 * d);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let gg = g.tanh(zg);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, c);
        let ig = g.mul(i, gg);
        c = g.add(fc, ig);
        let tc = g.tanh(c);
        h = g.mul(o, tc);
        hs.push(h);
    }
    // time-major -> sequence-major
    let stacked = g.concat_rows(&hs);
    let perm: RowMix = (0..bsz * t_len)
        .map(|r| {
            let (b, t) = (r / t_len, r % t_len);
            vec![(t * bsz + b, 1.0)]
        })
        .collect();
    let features = g.mix_rows(stacked, Arc::new(perm));
    let normed = normalize(g, binder, cfg, features, inp)?;
    let shifted = shift_down(g, normed, inp);
    let states = with_start(g, binder, &p, shifted, inp)?;
    Ok(EncoderOutput {
        states,
        features,
        attention: Vec::new(),
    })
}

/// Transformer-style encoder/decoder: the encoder self-attends over the
/// questions (current step included) and is normalized; the decoder
/// self-attends over the responses shifted by one step and cross-attends to
/// the normalized encoder output.
pub fn saint_encode(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    inp: &EncoderInputs,
) -> Result<EncoderOutput> {
    let p = cfg.encoder.prefix();
    let mut attention = Vec::new();
    let mut e = inp.mq;
    if cfg.positional {
        let pos = positions(g, binder, &format!("{p}/pos_q"), inp)?;
        e = g.add(e, pos);
    }
    for l in 0..cfg.n_layers {
        let prefix = format!("{p}/enc{l}");
        e = attention_block(
            g,
            binder,
            cfg,
            inp,
            Block {
                prefix: &prefix,
                query: e,
                key: e,
                value: e,
                residual: Some(e),
                strict: false,
            },
            None,
            &mut attention,
        )?;
    }
    let features = e;
    let o = normalize(g, binder, cfg, features, inp)?;

    let w_in = binder.get(g, &format!("{p}/w_in"))?;
    let r = g.matmul(inp.mqr, w_in);
    let r = shift_down(g, r, inp);
    let start = binder.get(g, &format!("{p}/start_r"))?;
    let first: RowMix = (0..inp.batch * inp.seq_len)
        .map(|i| if i % inp.seq_len == 0 { vec![(0, 1.0)] } else { Vec::new() })
        .collect();
    let s = g.mix_rows(start, Arc::new(first));
    let mut dec = g.add(r, s);
    if cfg.positional {
        let pos = positions(g, binder, &format!("{p}/pos_r"), inp)?;
        dec = g.add(dec, pos);
    }
    for l in 0..cfg.n_layers {
        let sp = format!("{p}/dec{l}_self");
        let s = attention_block(
            g,
            binder,
            cfg,
            inp,
            Block {
                prefix: &sp,
                query: dec,
                key: dec,
                value: dec,
                residual: Some(dec),
                strict: false,
            },
            None,
            &mut attention,
        )?;
        let cp = format!("{p}/dec{l}_cross");
        dec = attention_block(
            g,
            binder,
            cfg,
            inp,
            Block {
                prefix: &cp,
                query: s,
                key: o,
                value: o,
                residual: Some(s),
                strict: false,
            },
            None,
            &mut attention,
        )?;
    }
    Ok(EncoderOutput {
        states: dec,
        features,
        attention,
    })
}

/// Relation-aware attention encoder followed by the normalization. Queries
/// and keys come from the question embeddings, values from the projected
/// question-response embeddings. The first layer attends strictly to the
/// past; deeper layers attend to the previous layer's (already shifted)
/// outputs up to the current step.
pub fn dgrkt_encode(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    inp: &EncoderInputs,
) -> Result<EncoderOutput> {
    let p = cfg.encoder.prefix();
    let mut attention = Vec::new();
    let relevance = relevance_weights(g, binder)?;
    let w_in = binder.get(g, &format!("{p}/w_in"))?;
    let mut qk = inp.mq;
    let mut v = g.matmul(inp.mqr, w_in);
    if cfg.positional {
        let pos = positions(g, binder, &format!("{p}/pos"), inp)?;
        qk = g.add(qk, pos);
        v = g.add(v, pos);
    }
    let mut x = v;
    for l in 0..cfg.n_layers {
        let prefix = format!("{p}/l{l}");
        x = attention_block(
            g,
            binder,
            cfg,
            inp,
            Block {
                prefix: &prefix,
                query: qk,
                key: qk,
                value: x,
                residual: if l == 0 { None } else { Some(x) },
                strict: l == 0,
            },
            Some(relevance),
            &mut attention,
        )?;
    }
    let features = with_start(g, binder, &p, x, inp)?;
    let states = normalize(g, binder, cfg, features, inp)?;
    Ok(EncoderOutput {
        states,
        features,
        attention,
    })
}

/// One relation-aware attention layer on a single sequence, without output
/// projection or feed-forward: `x_j = sum_{i<j} w_ij V_i` with
/// `w_ij ∝ lambda_{R(i,j)} * softmax_i(Q_j·K_i / sqrt(d_head))`. The first
/// step has no history and returns zeros.
#[allow(clippy::too_many_arguments)]
pub fn ra_attention_layer(
    m_q: &Mat,
    m_v: &Mat,
    relation: &[Vec<u8>],
    w_q: &Mat,
    w_k: &Mat,
    w_v: &Mat,
    heads: usize,
    relevance: &RelevanceParams,
) -> Result<Mat> {
    let t = m_q.nrows();
    if m_v.nrows() != t || relation.len() != t || relation.iter().any(|r| r.len() != t) {
        return Err(Error::Shape("ra_attention_layer inputs disagree on length".into()));
    }
    let mut g = Graph::new();
    let mq = g.constant(m_q.clone());
    let mv = g.constant(m_v.clone());
    let (wq, wk, wv) = (
        g.constant(w_q.clone()),
        g.constant(w_k.clone()),
        g.constant(w_v.clone()),
    );
    let q = g.matmul(mq, wq);
    let k = g.matmul(mq, wk);
    let v = g.matmul(mv, wv);
    let [a, b, c] = relevance.weights();
    let lam = g.constant(ndarray::array![[a, b, c]]);
    // attention node indexes [j * T + i] with j the query
    let flat: Vec<u8> = (0..t)
        .flat_map(|j| (0..t).map(move |i| (i, j)))
        .map(|(i, j)| relation[i][j])
        .collect();
    let out = g.attention(
        q,
        k,
        v,
        Some(lam),
        AttentionSpec {
            batch: 1,
            seq_len: t,
            heads,
            strict: true,
            relation: Some(Arc::new(flat)),
        },
    );
    Ok(g.value(out).clone())
}
