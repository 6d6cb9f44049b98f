//! AUC, accuracy and the proxy A-distance probe.

use rand::seq::SliceRandom;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

/// Area under the ROC curve from average ranks (ties count one half).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined("labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of ranks of positives, 1-based, ties averaged; kept doubled to stay integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        // average rank of the group is (i + 1 + j + 1) / 2
        rank_sum2 += pos_in_group * (i as u128 + j as u128 + 2);
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // U = rank_sum - p(p+1)/2
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Fraction of predictions on the right side of 0.5.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Shape("accuracy needs equally long, non-empty inputs".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= 0.5) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Collects predictions across batches.
#[derive(Clone, Debug, Default)]
pub struct PredictionLog {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    loss_sum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub auc: f64,
    pub acc: f64,
    pub loss: f64,
    pub n_predictions: usize,
}

impl PredictionLog {
    pub fn push(&mut self, score: f64, label: u8) {
        let p = score.clamp(crate::decoder::PROB_CLAMP, 1.0 - crate::decoder::PROB_CLAMP);
        self.loss_sum -= if label == 1 { p.ln() } else { (1.0 - p).ln() };
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn summary(&self) -> Result<Summary> {
        if self.is_empty() {
            return Err(Error::Empty("no predictions".into()));
        }
        Ok(Summary {
            auc: auc(&self.scores, &self.labels)?,
            acc: accuracy(&self.scores, &self.labels)?,
            loss: self.loss_sum / self.len() as f64,
            n_predictions: self.len(),
        })
    }
}

const PROBE_MIN: usize = 20;
const PROBE_EPOCHS: usize = 500;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-3;

/// `2 (1 - 2 err)` with `err` the held-out error of a logistic-regression
/// domain classifier trained on a stratified half of the pooled features.
pub fn proxy_a_distance(a: &Mat, b: &Mat, seed: u64) -> Result<f64> {
    if a.nrows() < PROBE_MIN || b.nrows() < PROBE_MIN {
        return Err(Error::InvalidArgument(format!(
            "proxy A-distance needs at least {PROBE_MIN} samples per domain, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape("feature widths differ".into()));
    }
    let d = a.ncols();
    let mut rng = seeded(seed, stream::PROBE);
    let mut split = |m: &Mat, label: f64| {
        let mut idx: Vec<usize> = (0..m.nrows()).collect();
        idx.shuffle(&mut rng);
        let half = idx.len() / 2;
        let rows = |ids: &[usize]| -> Vec<(Vec<f64>, f64)> {
            ids.iter().map(|&i| (m.row(i).to_vec(), label)).collect()
        };
        (rows(&idx[..half]), rows(&idx[half..]))
    };
    let (mut train, mut test) = split(a, 0.0);
    let (tb, sb) = split(b, 1.0);
    train.extend(tb);
    test.extend(sb);

    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for (x, _) in &train {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for (x, _) in &train {
        for ((s, v), m) in sd.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let standardize = |x: &[f64]| -> Vec<f64> {
        x.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect()
    };
    let train: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (standardize(x), *y)).collect();
    let test: Vec<(Vec<f64>, f64)> = test.iter().map(|(x, y)| (standardize(x), *y)).collect();

    let mut w = vec![0.0; d];
    let mut bias = 0.0;
    for _ in 0..PROBE_EPOCHS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z: f64 = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += err * v / n;
            }
            gb += err / n;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_LR * (g + PROBE_L2 * *wi);
        }
        bias -= PROBE_LR * gb;
    }
    let wrong = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (z >= 0.0) != (*y == 1.0)
        })
        .count();
    let err = wrong as f64 / test.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0))
}
