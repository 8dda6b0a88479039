//! Visual and text saliency scores.
//!
//! The visual score of a token is the softmax, over all tokens, of its dot
//! product with the class token scaled by `1/sqrt(D)`. The text score does
//! the same against the text embedding after projecting tokens into the text
//! space, scaled by `1/sqrt(Dt)`. Both feed the dynamic scale filter through
//! min-max normalization.

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::types::{dot, Matrix, ProjectionMap, ScoreKind, ScoreVector, TokenBundle};

/// Numerically stable softmax. The normalizing sum is accumulated left to
/// right so the result does not depend on how logits were produced.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Maps `x` to `(x - min) / (max - min)`. Constant input maps to all zeros.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let (min, max) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = max - min;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|&x| ((x - min) / span).clamp(0.0, 1.0)).collect()
}

/// Row `i` of the result is `weight · tokens[i] + bias`.
pub fn project_tokens(tokens: &Matrix, proj: &ProjectionMap) -> Result<Matrix> {
    project_tokens_with(tokens, proj, Execution::default())
}

pub fn project_tokens_with(tokens: &Matrix, proj: &ProjectionMap, exec: Execution) -> Result<Matrix> {
    if tokens.cols() != proj.in_dim() {
        return Err(Error::DimensionMismatch(format!(
            "projection expects {}-dim tokens, got {}",
            proj.in_dim(),
            tokens.cols()
        )));
    }
    let rows = map_indexed(exec, tokens.rows(), |i| project_row(tokens.row(i), proj));
    Matrix::from_rows(proj.out_dim(), &rows)
}

fn project_row(x: &[f32], proj: &ProjectionMap) -> Vec<f32> {
    (0..proj.out_dim())
        .map(|j| {
            let mut acc = dot(proj.weight.row(j), x);
            if let Some(b) = &proj.bias {
                acc += f64::from(b[j]);
            }
            acc as f32
        })
        .collect()
}

fn scored(logits: Vec<f64>, kind: ScoreKind) -> Result<ScoreVector> {
    let raw = softmax(&logits)?;
    let normalized = minmax_normalize(&raw);
    Ok(ScoreVector { raw, normalized, kind })
}

/// Visual score over all tokens of the bundle.
pub fn visual_score(bundle: &TokenBundle) -> Result<ScoreVector> {
    let rows: Vec<usize> = (0..bundle.len()).collect();
    visual_score_rows(bundle, &rows, Execution::default())
}

/// Visual score restricted to the given rows: the softmax runs over those
/// rows only and the result is indexed like `rows`.
pub fn visual_score_rows(bundle: &TokenBundle, rows: &[usize], exec: Execution) -> Result<ScoreVector> {
    let logits = visual_logits(bundle, rows, exec)?;
    scored(logits, ScoreKind::Visual)
}

pub(crate) fn visual_logits(bundle: &TokenBundle, rows: &[usize], exec: Execution) -> Result<Vec<f64>> {
    let cls = bundle.cls.as_deref().ok_or(Error::MissingCls)?;
    if cls.len() != bundle.dim() {
        return Err(Error::DimensionMismatch(format!(
            "class token has {} entries, tokens have {}",
            cls.len(),
            bundle.dim()
        )));
    }
    let scale = (bundle.dim() as f64).sqrt();
    Ok(map_indexed(exec, rows.len(), |i| dot(bundle.tokens.row(rows[i]), cls) / scale))
}

/// Text score over all tokens of the bundle.
pub fn text_score(bundle: &TokenBundle) -> Result<ScoreVector> {
    let rows: Vec<usize> = (0..bundle.len()).collect();
    text_score_rows(bundle, &rows, Execution::default())
}

/// Text score restricted to the given rows. Without a projection the text
/// embedding must live in token space and tokens are used as-is.
pub fn text_score_rows(bundle: &TokenBundle, rows: &[usize], exec: Execution) -> Result<ScoreVector> {
    let text = bundle.text.as_deref().ok_or(Error::MissingText)?;
    let scale = (text.len() as f64).sqrt();
    let logits = match &bundle.proj {
        Some(proj) => {
            if proj.in_dim() != bundle.dim() || proj.out_dim() != text.len() {
                return Err(Error::DimensionMismatch(format!(
                    "projection {}x{} does not map {}-dim tokens to {}-dim text",
                    proj.out_dim(),
                    proj.in_dim(),
                    bundle.dim(),
                    text.len()
                )));
            }
            map_indexed(exec, rows.len(), |i| {
                let p = project_row(bundle.tokens.row(rows[i]), proj);
                dot(&p, text) / scale
            })
        }
        None => {
            if text.len() != bundle.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "text has {} entries, tokens have {}, and no projection is given",
                    text.len(),
                    bundle.dim()
                )));
            }
            map_indexed(exec, rows.len(), |i| dot(bundle.tokens.row(rows[i]), text) / scale)
        }
    };
    scored(logits, ScoreKind::Text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        for c in [-3.5, 0.0, 7.0, 1e6] {
            let p = softmax(&[c; 4]).unwrap();
            for x in p {
                assert!((x - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_match_shifted() {
        let p = softmax(&[1000.0, 1001.0]).unwrap();
        // naive evaluation on the shifted inputs
        let (a, b) = (0f64.exp(), 1f64.exp());
        let q = [a / (a + b), b / (a + b)];
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(softmax(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..50).map(|_| rng.random_range(-10.0..10.0)).collect();
        let n = minmax_normalize(&v);
        assert_eq!(n.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(n.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn visual_score_two_tokens() {
        let tokens = Matrix::from_rows(4, &[[1.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0]]).unwrap();
        let b = TokenBundle::new(tokens, vec![1.0, 0.0, 0.0, 0.0]);
        let s = visual_score(&b).unwrap();
        // logits 0.5 and 1.0
        let (e0, e1) = (0.5f64.exp(), 1f64.exp());
        assert!((s.raw[0] - e0 / (e0 + e1)).abs() < 1e-12);
        assert!((s.raw[1] - e1 / (e0 + e1)).abs() < 1e-12);
        assert!((s.raw[0] - 0.3775).abs() < 1e-4);
        assert_eq!(s.normalized, vec![0.0, 1.0]);
        assert_eq!(s.kind, ScoreKind::Visual);
    }

    #[test]
    fn identical_tokens_give_uniform_visual_score() {
        let tokens = Matrix::from_rows(3, &[[0.2, -1.0, 4.0]; 7]).unwrap();
        let s = visual_score(&TokenBundle::new(tokens, vec![1.0, 2.0, 3.0])).unwrap();
        for x in &s.raw {
            assert!((x - 1.0 / 7.0).abs() < 1e-12);
        }
        assert!(s.normalized.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn visual_score_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tokens = random_matrix(&mut rng, 600, 32);
        let cls: Vec<f32> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = visual_score(&TokenBundle::new(tokens, cls)).unwrap();
        assert!((s.raw.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(s.raw.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn missing_cls_and_text() {
        let mut b = TokenBundle::new(Matrix::zeros(2, 2), vec![0.0; 2]);
        assert!(matches!(text_score(&b), Err(Error::MissingText)));
        b.cls = None;
        assert!(matches!(visual_score(&b), Err(Error::MissingCls)));
    }

    #[test]
    fn projection_identity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 5, 6);
        let id = ProjectionMap::new(Matrix::identity(6), None).unwrap();
        assert!(project_tokens(&x, &id).unwrap().bits_eq(&x));
        let twice = ProjectionMap::new(Matrix::identity(6).map(|v| 2.0 * v), None).unwrap();
        assert_eq!(project_tokens(&x, &twice).unwrap(), x.map(|v| 2.0 * v));
    }

    #[test]
    fn projection_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_matrix(&mut rng, 8, 16);
        let x = random_matrix(&mut rng, 5, 16);
        let bias: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = ProjectionMap::new(w.clone(), Some(bias.clone())).unwrap();
        let y = project_tokens(&x, &proj).unwrap();
        for i in 0..5 {
            for j in 0..8 {
                let mut acc = 0.0f64;
                for k in 0..16 {
                    acc += w.row(j)[k] as f64 * x.row(i)[k] as f64;
                }
                acc += bias[j] as f64;
                assert!((y.row(i)[j] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_shape_mismatch() {
        let proj = ProjectionMap::new(Matrix::zeros(3, 4), None).unwrap();
        assert!(matches!(project_tokens(&Matrix::zeros(2, 5), &proj), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn orthogonal_text_gives_uniform_score() {
        let tokens = Matrix::from_rows(3, &[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [3.0, -1.0, 0.0]]).unwrap();
        let b = TokenBundle::new(tokens, vec![1.0; 3]).with_text(vec![0.0, 0.0, 1.0]);
        let s = text_score(&b).unwrap();
        for x in &s.raw {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn text_equal_to_cls_matches_visual() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tokens = random_matrix(&mut rng, 40, 12);
        let cls: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plain = TokenBundle::new(tokens, cls.clone()).with_text(cls.clone());
        let v = visual_score(&plain).unwrap();
        let t = text_score(&plain).unwrap();
        assert_eq!(v.raw, t.raw);
        let with_id = plain.clone().with_proj(ProjectionMap::new(Matrix::identity(12), None).unwrap());
        assert_eq!(text_score(&with_id).unwrap().raw, v.raw);
    }

    #[test]
    fn text_aligned_tokens_score_highest() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d, dt) = (12, 6, 4);
        let w = random_matrix(&mut rng, dt, d);
        let text: Vec<f32> = vec![1.0, -0.5, 0.25, 2.0];
        // preimage direction: weight^T · text
        let mut dir = vec![0f32; d];
        for j in 0..dt {
            for k in 0..d {
                dir[k] += w.row(j)[k] * text[j];
            }
        }
        let mut tokens = random_matrix(&mut rng, n, d).map(|x| 0.05 * x);
        for &i in &[3usize, 7] {
            for (t, &v) in tokens.row_mut(i).iter_mut().zip(&dir) {
                *t += 5.0 * v;
            }
        }
        let b = TokenBundle::new(tokens, vec![0.0; d]).with_text(text).with_proj(ProjectionMap::new(w, None).unwrap());
        let s = text_score(&b).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| s.raw[b].total_cmp(&s.raw[a]));
        let mut top = order[..2].to_vec();
        top.sort();
        assert_eq!(top, vec![3, 7]);
    }

    #[test]
    fn restricted_rows_renormalize() {
        let tokens = Matrix::from_rows(1, &[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let b = TokenBundle::new(tokens, vec![1.0]);
        let s = visual_score_rows(&b, &[1, 3], Execution::Sequential).unwrap();
        assert_eq!(s.raw.len(), 2);
        assert!((s.raw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s.normalized, vec![0.0, 1.0]);
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tokens = random_matrix(&mut rng, 300, 24);
        let cls: Vec<f32> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = TokenBundle::new(tokens, cls);
        let rows: Vec<usize> = (0..300).collect();
        let a = visual_score_rows(&b, &rows, Execution::Sequential).unwrap();
        let p = visual_score_rows(&b, &rows, Execution::Parallel).unwrap();
        assert_eq!(a, p);
    }
}
