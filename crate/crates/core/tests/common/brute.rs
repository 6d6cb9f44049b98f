//! Brute-force references.

use dgkt_core::aggregation::sse;
use dgkt_core::autograd::Mat;

/// Minimum SSE over every assignment of `n` points to `k` non-empty groups.
pub fn exhaustive_sse(points: &Mat, k: usize) -> f64 {
    let n = points.nrows();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.iter().all(|&u| u) {
            let mut cent = Mat::zeros((k, points.ncols()));
            let mut count = vec![0.0; k];
            for (i, &l) in labels.iter().enumerate() {
                cent.row_mut(l).scaled_add(1.0, &points.row(i));
                count[l] += 1.0;
            }
            for (c, n) in count.iter().enumerate() {
                cent.row_mut(c).mapv_inplace(|v| v / n);
            }
            best = best.min(sse(points, &labels, &cent));
        }
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

/// O(n^2) AUC: share of (positive, negative) pairs ranked correctly, ties
/// counting one half.
pub fn pair_count_auc(s: &[f64], y: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}
