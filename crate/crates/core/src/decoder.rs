//! Next-response decoder and the masked cross-entropy objective.

use std::sync::Arc;

use ndarray::{Array1, ArrayView1};
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};

/// Probability clamp used inside the loss only.
pub const PROB_CLAMP: f64 = 1e-7;

pub const DECODER_KEYS: [&str; 4] = ["decoder/W1", "decoder/b1", "decoder/W2", "decoder/b2"];

/// Two-layer head on `concat(h, e_q)`. Weights are stored for row-vector
/// inputs: `w1` is `2d x d`, `w2` is `d x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub w1: Mat,
    pub b1: Array1<f64>,
    pub w2: Mat,
    pub b2: f64,
}

impl DecoderParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let s1 = 1.0 / ((2 * d) as f64).sqrt();
        let s2 = 1.0 / (d as f64).sqrt();
        Self {
            w1: Mat::from_shape_fn((2 * d, d), |_| rng.gen_range(-s1..=s1)),
            b1: Array1::zeros(d),
            w2: Mat::from_shape_fn((d, 1), |_| rng.gen_range(-s2..=s2)),
            b2: 0.0,
        }
    }

    pub fn read(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w1: store.require(DECODER_KEYS[0])?.clone(),
            b1: store.require(DECODER_KEYS[1])?.row(0).to_owned(),
            w2: store.require(DECODER_KEYS[2])?.clone(),
            b2: store.require(DECODER_KEYS[3])?[[0, 0]],
        })
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        store.insert(DECODER_KEYS[0], self.w1.clone());
        store.insert(DECODER_KEYS[1], self.b1.clone().insert_axis(ndarray::Axis(0)));
        store.insert(DECODER_KEYS[2], self.w2.clone());
        store.insert(DECODER_KEYS[3], Mat::from_elem((1, 1), self.b2));
    }
}

/// `sigmoid(relu(concat(h, e_q) W1 + b1) W2 + b2)` for every row.
pub fn decode_graph(g: &mut Graph, binder: &mut Binder, h: Var, e_q: Var) -> Result<Var> {
    let w1 = binder.get(g, DECODER_KEYS[0])?;
    let b1 = binder.get(g, DECODER_KEYS[1])?;
    let w2 = binder.get(g, DECODER_KEYS[2])?;
    let b2 = binder.get(g, DECODER_KEYS[3])?;
    let x = g.concat_cols(&[h, e_q]);
    let z = g.matmul(x, w1);
    let z = g.add_row(z, b1);
    let z = g.relu(z);
    let z = g.matmul(z, w2);
    let z = g.add_row(z, b2);
    Ok(g.sigmoid(z))
}

pub fn decode(h_next: ArrayView1<f64>, e_q_next: ArrayView1<f64>, params: &DecoderParams) -> Result<f64> {
    let d = h_next.len();
    if e_q_next.len() != d || params.w1.dim() != (2 * d, params.b1.len()) || params.w2.nrows() != params.b1.len() {
        return Err(Error::Shape("decoder input and parameter shapes disagree".into()));
    }
    let mut store = ParamStore::new();
    params.insert_into(&mut store);
    let none = Default::default();
    let mut binder = Binder::new(&store, &none);
    let mut g = Graph::new();
    let h = g.constant(h_next.to_owned().insert_axis(ndarray::Axis(0)));
    let e = g.constant(e_q_next.to_owned().insert_axis(ndarray::Axis(0)));
    let y = decode_graph(&mut g, &mut binder, h, e)?;
    Ok(g.scalar(y))
}

/// Per-step loss weights: 1 for valid steps t >= 1 (0-based), else 0.
pub fn loss_weights(mask: &[u8]) -> Vec<f64> {
    mask.iter()
        .enumerate()
        .map(|(t, &m)| if t >= 1 && m == 1 { 1.0 } else { 0.0 })
        .collect()
}

/// Mean binary cross-entropy over steps with mask 1. The caller aligns
/// the inputs so that the first step of each sequence is already excluded.
pub fn masked_bce(predictions: &[f64], targets: &[u8], mask: &[u8]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.len() != mask.len() {
        return Err(Error::Shape("predictions, targets and mask differ in length".into()));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| f64::from(m == 1)).collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Empty("no valid steps to score".into()));
    }
    let mut g = Graph::new();
    let p = g.constant(Mat::from_shape_vec((predictions.len(), 1), predictions.to_vec()).unwrap());
    let y = Arc::new(targets.iter().map(|&r| f64::from(r)).collect());
    let loss = g.bce(p, y, Arc::new(weights), PROB_CLAMP);
    Ok(g.scalar(loss))
}
