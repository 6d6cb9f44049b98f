//! Concept clustering into prototypes and target-table initialization.

use rand::Rng;

use crate::autograd::Mat;
use crate::embedding::{ConceptTable, PrototypeTable, TargetConceptTable};
use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

pub const KMEANS_RESTARTS: usize = 16;
pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Mat,
    pub sse: f64,
    /// Within-cluster SSE after every Lloyd iteration of the kept restart.
    pub sse_trace: Vec<f64>,
    pub restart: usize,
}

impl KMeans {
    /// Binary `k x n` assignment matrix.
    pub fn assignment(&self) -> Vec<Vec<u8>> {
        let mut a = vec![vec![0u8; self.labels.len()]; self.centroids.nrows()];
        for (j, &c) in self.labels.iter().enumerate() {
            a[c][j] = 1;
        }
        a
    }
}

fn dist2(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sse(points: &Mat, labels: &[usize], centroids: &Mat) -> f64 {
    points
        .outer_iter()
        .zip(labels)
        .map(|(p, &c)| dist2(p, centroids.row(c)))
        .sum()
}

fn plus_plus(points: &Mat, k: usize, rng: &mut impl Rng) -> Mat {
    let n = points.nrows();
    let mut centroids = Mat::zeros((k, points.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.outer_iter().map(|p| dist2(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, points.row(pick)));
        }
    }
    centroids
}

fn assign(points: &Mat, centroids: &Mat) -> Vec<usize> {
    points
        .outer_iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, row) in centroids.outer_iter().enumerate() {
                let d = dist2(p, row);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn means(points: &Mat, labels: &[usize], k: usize) -> (Mat, Vec<usize>) {
    let mut sums = Mat::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (p, &c) in points.outer_iter().zip(labels) {
        sums.row_mut(c).scaled_add(1.0, &p);
        counts[c] += 1;
    }
    for (mut row, &n) in sums.outer_iter_mut().zip(&counts) {
        if n > 0 {
            row.mapv_inplace(|v| v / n as f64);
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its centroid (taken from a cluster with
/// more than one member) into each empty cluster.
fn repair(points: &Mat, labels: &mut [usize], centroids: &mut Mat) {
    let k = centroids.nrows();
    loop {
        let (_, counts) = means(points, labels, k);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.outer_iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = dist2(p, centroids.row(labels[i]));
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("n >= k leaves a cluster with two members");
        labels[i] = empty;
        let (m, _) = means(points, labels, k);
        centroids.assign(&m);
    }
}

fn lloyd(points: &Mat, k: usize, max_iters: usize, tol: f64, rng: &mut impl Rng) -> (Vec<usize>, Mat, Vec<f64>) {
    let mut centroids = plus_plus(points, k, rng);
    let mut labels = assign(points, &centroids);
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        let (mut next, _) = means(points, &labels, k);
        // empty clusters keep their previous position until repaired
        let (_, counts) = means(points, &labels, k);
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                next.row_mut(c).assign(&centroids.row(c));
            }
        }
        repair(points, &mut labels, &mut next);
        let shift = next
            .outer_iter()
            .zip(centroids.outer_iter())
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        trace.push(sse(points, &labels, &centroids));
        if shift < tol {
            break;
        }
        labels = assign(points, &centroids);
    }
    repair(points, &mut labels, &mut centroids);
    (labels, centroids, trace)
}

/// k-means with k-means++ seeding, keeping the restart with the lowest SSE
/// (earliest restart on ties).
pub fn kmeans(points: &Mat, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} points cannot form {k} clusters")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite point".into()));
    }
    let mut rng = seeded(seed, stream::KMEANS);
    let mut best: Option<KMeans> = None;
    for restart in 0..KMEANS_RESTARTS {
        let (labels, centroids, sse_trace) = lloyd(points, k, max_iters.max(1), tol, &mut rng);
        let total = sse(points, &labels, &centroids);
        if best.as_ref().map_or(true, |b| total < b.sse) {
            best = Some(KMeans {
                labels,
                centroids,
                sse: total,
                sse_trace,
                restart,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Clusters the concatenated source concept tables and averages each
/// cluster into a prototype.
pub fn build_prototypes(tables: &[ConceptTable], k: usize, seed: u64) -> Result<PrototypeTable> {
    let Some(first) = tables.first() else {
        return Err(Error::Empty("no concept tables to cluster".into()));
    };
    let d = first.embeddings.ncols();
    if tables.iter().any(|t| t.embeddings.ncols() != d) {
        return Err(Error::Shape("concept tables differ in width".into()));
    }
    let total: usize = tables.iter().map(|t| t.embeddings.nrows()).sum();
    if total < k {
        return Err(Error::InvalidArgument(format!(
            "{total} source concepts cannot form {k} prototypes"
        )));
    }
    let mut pooled = Mat::zeros((total, d));
    let mut domains = Vec::with_capacity(tables.len());
    let mut at = 0;
    for t in tables {
        let n = t.embeddings.nrows();
        pooled.slice_mut(ndarray::s![at..at + n, ..]).assign(&t.embeddings);
        domains.push((t.domain_id, at, n));
        at += n;
    }
    let km = kmeans(&pooled, k, seed, KMEANS_MAX_ITERS, KMEANS_TOL)?;
    let (embeddings, _) = means(&pooled, &km.labels, k);
    Ok(PrototypeTable {
        embeddings,
        labels: km.labels,
        domains,
    })
}

/// Each target concept starts as a copy of a uniformly drawn prototype.
pub fn init_target_table(
    protos: &PrototypeTable,
    n_concepts: usize,
    seed: u64,
    lambda: f64,
) -> Result<TargetConceptTable> {
    let k = protos.k();
    if k == 0 {
        return Err(Error::InvalidArgument("no prototypes".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut rng = seeded(seed, stream::TARGET_INIT);
    let init_choices: Vec<usize> = (0..n_concepts).map(|_| rng.gen_range(0..k)).collect();
    let mut embeddings = Mat::zeros((n_concepts, protos.embeddings.ncols()));
    for (mut row, &c) in embeddings.outer_iter_mut().zip(&init_choices) {
        row.assign(&protos.embeddings.row(c));
    }
    Ok(TargetConceptTable {
        embeddings,
        init_choices,
        lambda,
    })
}
