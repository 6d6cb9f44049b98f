//! Sequence instance normalization.
//!
//! Step t is normalized with the mean and population standard deviation of
//! `{p, m_1, ..., m_t}` where `p` is a learnable padding vector, so the
//! output at t never depends on later steps. Statistics are per feature and
//! per sequence; nothing is carried across sequences.

use std::sync::Arc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Where in an encoder the normalization is applied; also the checkpoint
/// key suffix `seqin/<site>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqInSite {
    DktH,
    SaintO,
    RaX,
}

impl SeqInSite {
    pub fn key(self) -> &'static str {
        match self {
            SeqInSite::DktH => "seqin/dkt_h",
            SeqInSite::SaintO => "seqin/saint_o",
            SeqInSite::RaX => "seqin/ra_x",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqInParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub pad: Array1<f64>,
    pub epsilon: f64,
}

impl SeqInParams {
    /// γ = 1, β = 0, p = 0.
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
            pad: Array1::zeros(d),
            epsilon: DEFAULT_EPS,
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore, site: SeqInSite) {
        let row = |v: &Array1<f64>| v.clone().insert_axis(ndarray::Axis(0));
        store.insert(format!("{}/gamma", site.key()), row(&self.gamma));
        store.insert(format!("{}/beta", site.key()), row(&self.beta));
        store.insert(format!("{}/pad", site.key()), row(&self.pad));
    }
}

/// Applies the normalization to `x` (`B*T x d`, sequence-major) with the
/// parameters bound under `site`.
pub fn apply(
    g: &mut Graph,
    binder: &mut Binder,
    site: SeqInSite,
    x: Var,
    lens: Arc<Vec<usize>>,
    seq_len: usize,
    eps: f64,
) -> Result<Var> {
    let gamma = binder.get(g, &format!("{}/gamma", site.key()))?;
    let beta = binder.get(g, &format!("{}/beta", site.key()))?;
    let pad = binder.get(g, &format!("{}/pad", site.key()))?;
    Ok(g.seq_in(x, gamma, beta, pad, lens, seq_len, eps))
}

/// Normalizes one `T x d` sequence. Steps with mask 0 come out as zeros.
pub fn seqin_forward(m: &Mat, mask: &[u8], params: &SeqInParams) -> Result<Mat> {
    let (t, d) = m.dim();
    if t == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if mask.len() != t {
        return Err(Error::Shape(format!("mask length {} != {t}", mask.len())));
    }
    if params.gamma.len() != d || params.beta.len() != d || params.pad.len() != d {
        return Err(Error::Shape(format!("parameters do not match width {d}")));
    }
    if !(params.epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let len = mask.iter().take_while(|&&v| v == 1).count();
    if mask[len..].iter().any(|&v| v != 0) {
        return Err(Error::InvalidArgument("mask is not a prefix of ones".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let row = |v: &Array1<f64>| v.clone().insert_axis(ndarray::Axis(0));
    let gamma = g.constant(row(&params.gamma));
    let beta = g.constant(row(&params.beta));
    let pad = g.constant(row(&params.pad));
    let y = g.seq_in(x, gamma, beta, pad, Arc::new(vec![len]), t, params.epsilon);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scalar_hand_case() {
        // p = 0, m_1 = 2: mean 1, population std 1
        let p = SeqInParams {
            epsilon: 1e-12,
            ..SeqInParams::identity(1)
        };
        let out = seqin_forward(&array![[2.0]], &[1], &p).unwrap();
        assert!((out[[0, 0]] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn first_step_closed_form() {
        // with p and m_1 only: mean (p+m)/2, std |m-p|/2
        let p = SeqInParams {
            pad: array![0.5],
            ..SeqInParams::identity(1)
        };
        let m1 = 3.0;
        let out = seqin_forward(&array![[m1]], &[1], &p).unwrap();
        let mu = (0.5 + m1) / 2.0;
        let sd = (m1 - 0.5f64).abs() / 2.0;
        assert_eq!(out[[0, 0]], (m1 - mu) / (sd + DEFAULT_EPS));
    }

    #[test]
    fn constant_sequence_equal_to_pad_is_zero() {
        let mut p = SeqInParams::identity(2);
        p.pad = array![0.1, -0.3];
        let m = Mat::from_shape_fn((5, 2), |(_, c)| p.pad[c]);
        let out = seqin_forward(&m, &[1; 5], &p).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-9), "{out:?}");
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let p = SeqInParams {
            gamma: array![0.0, 0.0],
            beta: array![1.5, -2.0],
            pad: array![0.3, 0.1],
            epsilon: DEFAULT_EPS,
        };
        let m = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let out = seqin_forward(&m, &[1, 1, 1], &p).unwrap();
        for row in out.outer_iter() {
            assert_eq!(row, array![1.5, -2.0]);
        }
    }

    #[test]
    fn masked_steps_are_zero_and_errors() {
        let p = SeqInParams::identity(1);
        let out = seqin_forward(&array![[1.0], [2.0], [7.0]], &[1, 1, 0], &p).unwrap();
        assert_eq!(out[[2, 0]], 0.0);
        assert!(seqin_forward(&Mat::zeros((0, 1)), &[], &p).is_err());
        assert!(seqin_forward(&array![[1.0], [2.0]], &[0, 1], &p).is_err());
    }
}
