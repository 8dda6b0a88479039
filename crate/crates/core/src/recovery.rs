//! Secondary recovery of background tokens.
//!
//! Tokens left over after the visual filter and text recovery are rescored
//! against the class token, and their high-side outliers become cluster
//! seeds. Every leftover token joins the seed it has the largest dot product
//! with, and each cluster collapses to the mean of its members.

use crate::exec::{map_indexed, Execution};
use crate::outlier::dynamic_select_with;
use crate::types::{dot, LofParams, Matrix};

/// Seeds among the leftover tokens, as sorted positions into
/// `leftover_scores`. Always returns at least one seed for non-empty input.
pub fn seed_centers(leftover_scores: &[f64], params: &LofParams) -> Vec<usize> {
    seed_centers_with(leftover_scores, params, Execution::default())
}

pub fn seed_centers_with(leftover_scores: &[f64], params: &LofParams, exec: Execution) -> Vec<usize> {
    dynamic_select_with(leftover_scores, params, true, exec)
}

/// Assigns each row of `tokens` to a cluster, returned as a position into
/// `seeds`. A row goes to the seed with the largest dot product, ties to
/// the earlier seed; seed rows always belong to their own cluster.
pub fn assign_clusters(tokens: &Matrix, seeds: &[usize]) -> Vec<usize> {
    assign_clusters_with(tokens, seeds, Execution::default())
}

pub fn assign_clusters_with(tokens: &Matrix, seeds: &[usize], exec: Execution) -> Vec<usize> {
    assert!(!seeds.is_empty(), "assign_clusters needs at least one seed");
    let mut own = vec![usize::MAX; tokens.rows()];
    for (c, &s) in seeds.iter().enumerate() {
        own[s] = c;
    }
    map_indexed(exec, tokens.rows(), |i| {
        if own[i] != usize::MAX {
            return own[i];
        }
        let row = tokens.row(i);
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &s) in seeds.iter().enumerate() {
            let sim = dot(row, tokens.row(s));
            if sim > best.1 {
                best = (c, sim);
            }
        }
        best.0
    })
}

/// Averages each cluster into one token.
///
/// `original` gives the original index of each row; members are summed in
/// ascending original-index order so the result does not depend on row
/// order. Returns the merged rows and, for each, its seed's original index.
pub fn merge_clusters(
    tokens: &Matrix,
    original: &[usize],
    assignment: &[usize],
    seeds: &[usize],
) -> (Matrix, Vec<usize>) {
    let d = tokens.cols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); seeds.len()];
    for (row, &c) in assignment.iter().enumerate() {
        members[c].push(row);
    }
    let mut merged = Matrix::zeros(seeds.len(), d);
    for (c, rows) in members.iter_mut().enumerate() {
        debug_assert!(rows.contains(&seeds[c]));
        rows.sort_by_key(|&r| original[r]);
        let mut acc = vec![0.0f64; d];
        for &r in rows.iter() {
            for (a, &x) in acc.iter_mut().zip(tokens.row(r)) {
                *a += f64::from(x);
            }
        }
        let count = rows.len() as f64;
        for (out, a) in merged.row_mut(c).iter_mut().zip(acc) {
            *out = (a / count) as f32;
        }
    }
    let placement = seeds.iter().map(|&s| original[s]).collect();
    (merged, placement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spike_is_sole_seed() {
        let mut s = vec![0.1; 30];
        s[17] = 1.0;
        assert_eq!(seed_centers(&s, &LofParams::with_k(5)), vec![17]);
    }

    #[test]
    fn constant_leftover_falls_back_to_first() {
        assert_eq!(seed_centers(&[0.0; 40], &LofParams::with_k(20)), vec![0]);
    }

    #[test]
    fn single_seed_takes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Matrix::new(10, 3, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(assign_clusters(&t, &[4]), vec![0; 10]);
    }

    #[test]
    fn sign_partition() {
        let t = Matrix::from_rows(2, &[[1.0, 0.0], [-1.0, 0.0], [2.0, 0.5], [-3.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(assign_clusters(&t, &[0, 1]), vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn ties_go_to_earlier_seed() {
        let t = Matrix::from_rows(2, &[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(assign_clusters(&t, &[1, 0]), vec![1, 0, 0]);
    }

    #[test]
    fn seeds_keep_themselves() {
        // row 1 prefers seed 0 by dot product but is itself a seed
        let t = Matrix::from_rows(1, &[[3.0], [1.0], [0.5]]).unwrap();
        assert_eq!(assign_clusters(&t, &[0, 1]), vec![0, 1, 0]);
    }

    #[test]
    fn merge_identical_and_symmetric() {
        let t = Matrix::from_rows(2, &[[0.3, -1.5], [0.3, -1.5], [0.3, -1.5]]).unwrap();
        let (m, p) = merge_clusters(&t, &[4, 9, 11], &[0, 0, 0], &[1]);
        assert_eq!(m.row(0), &[0.3, -1.5]);
        assert_eq!(p, vec![9]);

        let t = Matrix::from_rows(2, &[[0.0, 2.0], [2.0, 0.0]]).unwrap();
        let (m, _) = merge_clusters(&t, &[0, 1], &[0, 0], &[0]);
        assert_eq!(m.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn merge_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Matrix::new(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let original = [10, 11, 12, 13, 14, 15];
        let assignment = [0, 1, 0, 1, 0, 0];
        let (a, pa) = merge_clusters(&t, &original, &assignment, &[0, 1]);

        let perm = [5, 3, 0, 2, 4, 1];
        let tp = t.select_rows(&perm);
        let op: Vec<usize> = perm.iter().map(|&i| original[i]).collect();
        let ap: Vec<usize> = perm.iter().map(|&i| assignment[i]).collect();
        // seeds 0 and 1 sit at positions 2 and 5 after permuting
        let (b, pb) = merge_clusters(&tp, &op, &ap, &[2, 5]);
        assert!(a.bits_eq(&b));
        assert_eq!(pa, pb);
    }
}
