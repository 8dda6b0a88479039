//! Dynamic scale filter: one-dimensional local outlier factor over
//! normalized scores, and top-`m` selection where `m` counts the high-side
//! outliers.
//!
//! Distances are absolute differences between scalar scores. The k-distance
//! neighborhood of a point includes every other point within its k-distance,
//! so it can hold more than `k` members when distances tie. A point with at
//! least `k` exact duplicates has k-distance 0 and an unbounded reachability
//! density; such points are marked degenerate and get LOF exactly 1.
//!
//! Neighborhood sums run over members in ascending index order, which keeps
//! the table bit-identical across execution modes.

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::types::LofParams;

#[derive(Debug, Clone, PartialEq)]
pub struct LofTable {
    pub k_distance: Vec<f64>,
    /// Sorted indices of each point's k-distance neighborhood.
    pub neighborhoods: Vec<Vec<usize>>,
    /// Local reachability density; `+inf` for degenerate points.
    pub lrd: Vec<f64>,
    pub lof: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl LofTable {
    pub fn len(&self) -> usize {
        self.lof.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lof.is_empty()
    }

    /// Assembles a table from per-point k-distances and neighborhoods.
    fn from_neighborhoods(
        scores: &[f64],
        k_distance: Vec<f64>,
        neighborhoods: Vec<Vec<usize>>,
        exec: Execution,
    ) -> Self {
        let n = scores.len();
        let degenerate: Vec<bool> = k_distance.iter().map(|&d| d == 0.0).collect();
        let lrd = map_indexed(exec, n, |p| {
            if degenerate[p] {
                return f64::INFINITY;
            }
            let nb = &neighborhoods[p];
            let reach: f64 = nb.iter().map(|&o| k_distance[o].max((scores[p] - scores[o]).abs())).sum();
            nb.len() as f64 / reach
        });
        let lof = map_indexed(exec, n, |p| {
            if degenerate[p] {
                return 1.0;
            }
            let nb = &neighborhoods[p];
            let mean: f64 = nb.iter().map(|&o| lrd[o]).sum::<f64>() / nb.len() as f64;
            mean / lrd[p]
        });
        LofTable { k_distance, neighborhoods, lrd, lof, degenerate }
    }
}

/// Builds the LOF table for `scores` with neighborhood size `params.k`.
pub fn build_lof_table(scores: &[f64], params: &LofParams) -> Result<LofTable> {
    build_lof_table_with(scores, params, Execution::default())
}

pub fn build_lof_table_with(scores: &[f64], params: &LofParams, exec: Execution) -> Result<LofTable> {
    let (n, k) = (scores.len(), params.k);
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::TooFewPoints { n, k });
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParams("scores must be finite".into()));
    }

    // Sorted once and shared; each point then sweeps outward from its rank.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let rows = map_indexed(exec, n, |p| {
        let s = scores[p];
        let dist = |r: usize| (s - scores[order[r]]).abs();
        let here = rank[p];

        // k-th nearest by merging the two sorted directions
        let (mut left, mut right) = (here, here + 1);
        let mut kd = 0.0;
        for _ in 0..k {
            let dl = (left > 0).then(|| dist(left - 1));
            let dr = (right < n).then(|| dist(right));
            match (dl, dr) {
                (Some(a), Some(b)) if a <= b => {
                    kd = a;
                    left -= 1;
                }
                (_, Some(b)) => {
                    kd = b;
                    right += 1;
                }
                (Some(a), None) => {
                    kd = a;
                    left -= 1;
                }
                (None, None) => unreachable!("n > k guarantees k neighbours"),
            }
        }

        // widen to every tie at the boundary
        while left > 0 && dist(left - 1) <= kd {
            left -= 1;
        }
        while right < n && dist(right) <= kd {
            right += 1;
        }
        let mut nb: Vec<usize> = order[left..right].iter().copied().filter(|&j| j != p).collect();
        nb.sort_unstable();
        (kd, nb)
    });
    let (k_distance, neighborhoods) = rows.into_iter().unzip();
    Ok(LofTable::from_neighborhoods(scores, k_distance, neighborhoods, exec))
}

/// Median of a non-empty slice; mean of the two middle values for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Number of high-side outliers: points whose LOF exceeds `tau` and whose
/// score lies strictly above the median.
pub fn count_salient(scores: &[f64], table: &LofTable, params: &LofParams) -> usize {
    if scores.is_empty() {
        return 0;
    }
    let med = median(scores);
    scores.iter().zip(&table.lof).filter(|&(&s, &lof)| lof > params.tau && s > med).count()
}

/// Indices of the `m` highest scores, ties toward the lower index, returned
/// in ascending index order.
pub fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

/// Selects salient tokens: as many of the top scores as there are
/// high-side LOF outliers. With `fallback`, an empty selection becomes the
/// `params.fallback_keep` top tokens. When `scores.len() <= params.k` the
/// filter is disabled and every index is returned.
pub fn dynamic_select(scores: &[f64], params: &LofParams, fallback: bool) -> Vec<usize> {
    dynamic_select_with(scores, params, fallback, Execution::default())
}

pub fn dynamic_select_with(scores: &[f64], params: &LofParams, fallback: bool, exec: Execution) -> Vec<usize> {
    let n = scores.len();
    if n <= params.k {
        return (0..n).collect();
    }
    let table = match build_lof_table_with(scores, params, exec) {
        Ok(t) => t,
        // non-finite scores cannot rank anything
        Err(_) => return Vec::new(),
    };
    let m = count_salient(scores, &table, params);
    if m == 0 && fallback {
        return top_m(scores, params.fallback_keep.min(n));
    }
    top_m(scores, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(k: usize) -> LofParams {
        LofParams { k, tau: 1.0, fallback_keep: 1 }
    }

    #[test]
    fn small_example_values() {
        // Hand evaluation, k = 2:
        //   k-distances: 0.2, 0.1, 0.2, 0.8
        //   neighborhoods: {1,2}, {0,2}, {0,1}, {1,2}
        //   reach sums: 0.3, 0.4, 0.3, 1.5
        let t = build_lof_table(&[0.0, 0.1, 0.2, 0.9], &k(2)).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        for (a, b) in t.k_distance.iter().zip([0.2, 0.1, 0.2, 0.8]) {
            assert!(close(*a, b), "{a} vs {b}");
        }
        assert_eq!(t.neighborhoods, vec![vec![1, 2], vec![0, 2], vec![0, 1], vec![1, 2]]);
        let lrd = [2.0 / 0.3, 2.0 / 0.4, 2.0 / 0.3, 2.0 / 1.5];
        for (a, b) in t.lrd.iter().zip(lrd) {
            assert!(close(*a, b), "{a} vs {b}");
        }
        let lof = [
            (lrd[1] + lrd[2]) / 2.0 / lrd[0],
            (lrd[0] + lrd[2]) / 2.0 / lrd[1],
            (lrd[0] + lrd[1]) / 2.0 / lrd[2],
            (lrd[1] + lrd[2]) / 2.0 / lrd[3],
        ];
        for (a, b) in t.lof.iter().zip(lof) {
            assert!(close(*a, b), "{a} vs {b}");
        }
        // 0.875, 4/3, 0.875, 4.375
        assert!(t.lof[3] > 4.0);
        assert!(t.lof[3] > t.lof[1]);
    }

    #[test]
    fn constant_scores_are_degenerate_inliers() {
        let t = build_lof_table(&[0.3; 10], &k(3)).unwrap();
        assert!(t.lof.iter().all(|&x| x == 1.0));
        assert!(t.degenerate.iter().all(|&d| d));
        assert!(t.neighborhoods.iter().all(|nb| nb.len() == 9));
    }

    #[test]
    fn ties_widen_the_neighborhood() {
        // from 0.5, points at distance 0.25 on both sides tie for the k-th slot
        let t = build_lof_table(&[0.25, 0.5, 0.75, 0.0, 1.0], &k(1)).unwrap();
        assert_eq!(t.neighborhoods[1], vec![0, 2]);
        assert!(t.neighborhoods.iter().all(|nb| !nb.is_empty()));
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(build_lof_table(&[0.1, 0.2], &k(2)), Err(Error::TooFewPoints { n: 2, k: 2 })));
    }

    #[test]
    fn count_small_example() {
        let s = [0.0, 0.1, 0.2, 0.9];
        let t = build_lof_table(&s, &k(2)).unwrap();
        assert_eq!(count_salient(&s, &t, &k(2)), 1);
    }

    #[test]
    fn count_constant_is_zero() {
        let s = [0.5; 8];
        let t = build_lof_table(&s, &k(2)).unwrap();
        assert_eq!(count_salient(&s, &t, &k(2)), 0);
    }

    #[test]
    fn only_high_side_spike_counts() {
        // duplicate mid cluster with a low spike at 0.0 and a high spike at 1.0;
        // an evenly spaced cluster would flag its own edges as well
        let mut s = vec![0.5; 20];
        s.push(0.0);
        s.push(1.0);
        let p = k(3);
        let t = build_lof_table(&s, &p).unwrap();
        assert!(t.lof[20] > 1.0 && t.lof[21] > 1.0, "both tails are LOF outliers");
        assert_eq!(count_salient(&s, &t, &p), 1);
        assert_eq!(dynamic_select(&s, &p, false), vec![21]);
    }

    #[test]
    fn select_examples() {
        assert_eq!(dynamic_select(&[0.0, 0.1, 0.2, 0.9], &k(2), true), vec![3]);
        assert_eq!(dynamic_select(&[0.4; 6], &k(2), true), vec![0]);
        assert!(dynamic_select(&[0.4; 6], &k(2), false).is_empty());
    }

    #[test]
    fn small_inputs_keep_everything() {
        assert_eq!(dynamic_select(&[0.3, 0.9, 0.1], &k(3), false), vec![0, 1, 2]);
        assert_eq!(dynamic_select(&[0.3], &k(20), true), vec![0]);
        assert!(dynamic_select(&[], &k(2), true).is_empty());
    }

    #[test]
    fn fallback_keep_widens() {
        let p = LofParams { k: 2, tau: 1.0, fallback_keep: 3 };
        assert_eq!(dynamic_select(&[0.4; 6], &p, true), vec![0, 1, 2]);
    }

    #[test]
    fn top_m_ties_prefer_low_index() {
        assert_eq!(top_m(&[0.5, 0.9, 0.5, 0.9], 1), vec![1]);
        assert_eq!(top_m(&[0.5, 0.9, 0.5, 0.9], 3), vec![0, 1, 3]);
    }

    #[test]
    fn tau_raises_the_bar() {
        // LOF of the 0.9 point is 4.375
        let s = [0.0, 0.1, 0.2, 0.9];
        let t = build_lof_table(&s, &k(2)).unwrap();
        let at = |tau| count_salient(&s, &t, &LofParams { tau, ..k(2) });
        assert_eq!(at(1.5), 1);
        assert_eq!(at(4.0), 1);
        assert_eq!(at(4.5), 0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn modes_agree() {
        let s: Vec<f64> = (0..400).map(|i| ((i * 7919) % 401) as f64 / 400.0).collect();
        let a = build_lof_table_with(&s, &k(20), Execution::Sequential).unwrap();
        let b = build_lof_table_with(&s, &k(20), Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
