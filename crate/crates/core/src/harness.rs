//! Synthetic bundles with planted ground truth, and brute-force reference
//! implementations used to cross-check the fast paths.
//!
//! The generator draws from `ChaCha8Rng::seed_from_u64(seed)` (rand_chacha)
//! with standard normals from `rand_distr::StandardNormal`, in a fixed draw
//! order, so a seed reproduces the same bundle bit for bit on every
//! platform.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::outlier::{build_lof_table, LofTable};
use crate::recovery::{assign_clusters, merge_clusters};
use crate::types::{dot, LofParams, Matrix, ProjectionMap, TokenBundle};

pub const GENERATOR_ID: &str = "chacha8/seed_from_u64+standard_normal/v1";

/// Logit gap between the background and the weakest planted token.
const SPIKE_LOGIT_MIN: f64 = 6.0;
/// Planted logits are spread uniformly over this range above the minimum.
const SPIKE_LOGIT_SPREAD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub dt: usize,
    pub n_visual_salient: usize,
    pub n_text_salient: usize,
    pub noise_sigma: f64,
}

impl SynthSpec {
    /// LLaVA-sized layout: 576 tokens with 20 planted tokens of each kind.
    pub fn llava_like(seed: u64) -> Self {
        SynthSpec { seed, n: 576, d: 64, dt: 32, n_visual_salient: 20, n_text_salient: 20, noise_sigma: 1.0 }
    }
}

/// Planted token sets, as sorted original indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub visual: Vec<usize>,
    pub text: Vec<usize>,
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Generates a bundle whose background tokens are isotropic noise, with
/// `n_visual_salient` tokens pushed along the class token and
/// `n_text_salient` tokens pushed along the direction the projection maps
/// onto the text embedding (orthogonal to the class token, so the visual
/// filter does not see them).
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(TokenBundle, GroundTruth)> {
    let SynthSpec { seed, n, d, dt, n_visual_salient, n_text_salient, noise_sigma } = *spec;
    if n == 0 || d < 2 || dt == 0 {
        return Err(Error::InvalidParams("synthetic bundles need n >= 1, d >= 2, dt >= 1".into()));
    }
    if n_visual_salient + n_text_salient > n {
        return Err(Error::InvalidParams(format!(
            "{n_visual_salient} visual + {n_text_salient} text salient tokens exceed n = {n}"
        )));
    }
    if !noise_sigma.is_finite() || noise_sigma <= 0.0 {
        return Err(Error::InvalidParams("noise_sigma must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let cls = normal_vec(&mut rng, d);
    let mut cls_dir = cls.clone();
    unit(&mut cls_dir);
    let cls_norm = cls.iter().map(|x| x * x).sum::<f64>().sqrt();

    let w_scale = 1.0 / (d as f64).sqrt();
    let weight: Vec<f64> = normal_vec(&mut rng, dt * d).into_iter().map(|x| x * w_scale).collect();
    let bias: Vec<f64> = normal_vec(&mut rng, dt).into_iter().map(|x| 0.1 * x).collect();
    let text = normal_vec(&mut rng, dt);

    // direction whose projection aligns with the text, minus its cls part
    let mut text_dir = vec![0.0f64; d];
    for (j, &t) in text.iter().enumerate() {
        for (k, v) in text_dir.iter_mut().enumerate() {
            *v += weight[j * d + k] * t;
        }
    }
    let along_cls: f64 = text_dir.iter().zip(&cls_dir).map(|(a, b)| a * b).sum();
    text_dir.iter_mut().zip(&cls_dir).for_each(|(v, c)| *v -= along_cls * c);
    unit(&mut text_dir);
    let text_gain: f64 =
        (0..dt).map(|j| text[j] * (0..d).map(|k| weight[j * d + k] * text_dir[k]).sum::<f64>()).sum::<f64>()
            / (dt as f64).sqrt();
    let visual_gain = cls_norm / (d as f64).sqrt();

    let mut tokens: Vec<f64> = normal_vec(&mut rng, n * d).into_iter().map(|x| x * noise_sigma).collect();

    let planted = sample(&mut rng, n, n_visual_salient + n_text_salient).into_vec();
    let (vis, txt) = planted.split_at(n_visual_salient);
    for (&i, dir, gain) in
        vis.iter().map(|i| (i, &cls_dir, visual_gain)).chain(txt.iter().map(|i| (i, &text_dir, text_gain)))
    {
        let logit = SPIKE_LOGIT_MIN + SPIKE_LOGIT_SPREAD * rng.random::<f64>();
        // remove the noise component along the planted direction so the
        // logit gap is exact, then place the token at the target logit
        let row = &mut tokens[i * d..(i + 1) * d];
        let along: f64 = row.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
        let amount = logit / gain;
        row.iter_mut().zip(dir.iter()).for_each(|(x, u)| *x += (amount - along) * u);
    }

    let f32s = |v: &[f64]| -> Vec<f32> { v.iter().map(|&x| x as f32).collect() };
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), GENERATOR_ID.into());
    metadata.insert("seed".into(), seed.to_string());
    metadata.insert("noise_sigma".into(), noise_sigma.to_string());

    let mut bundle = TokenBundle::new(Matrix::new(n, d, f32s(&tokens))?, f32s(&cls))
        .with_text(f32s(&text))
        .with_proj(ProjectionMap::new(Matrix::new(dt, d, f32s(&weight))?, Some(f32s(&bias)))?);
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n {
        bundle = bundle.with_grid(side, side);
    }
    bundle.metadata = metadata;

    let mut visual = vis.to_vec();
    let mut text_set = txt.to_vec();
    visual.sort_unstable();
    text_set.sort_unstable();
    Ok((bundle, GroundTruth { visual, text: text_set }))
}

/// Brute-force LOF: all pairwise distances, explicit sort for the k-th
/// neighbor, and a full scan for the neighborhood.
pub fn oracle_lof(scores: &[f64], k: usize) -> Result<LofTable> {
    let n = scores.len();
    if k == 0 || n <= k {
        return Err(Error::TooFewPoints { n, k });
    }
    let mut k_distance = vec![0.0; n];
    let mut neighborhoods = vec![Vec::new(); n];
    for p in 0..n {
        let mut dists: Vec<f64> = (0..n).filter(|&j| j != p).map(|j| (scores[p] - scores[j]).abs()).collect();
        dists.sort_by(f64::total_cmp);
        let kd = dists[k - 1];
        k_distance[p] = kd;
        neighborhoods[p] = (0..n).filter(|&j| j != p && (scores[p] - scores[j]).abs() <= kd).collect();
    }
    let mut lrd = vec![0.0; n];
    let mut degenerate = vec![false; n];
    for p in 0..n {
        if k_distance[p] == 0.0 {
            degenerate[p] = true;
            lrd[p] = f64::INFINITY;
            continue;
        }
        let mut total = 0.0;
        for &o in &neighborhoods[p] {
            total += f64::max(k_distance[o], (scores[p] - scores[o]).abs());
        }
        lrd[p] = neighborhoods[p].len() as f64 / total;
    }
    let mut lof = vec![1.0; n];
    for p in 0..n {
        if degenerate[p] {
            continue;
        }
        let mut total = 0.0;
        for &o in &neighborhoods[p] {
            total += lrd[o];
        }
        lof[p] = total / neighborhoods[p].len() as f64 / lrd[p];
    }
    Ok(LofTable { k_distance, neighborhoods, lrd, lof, degenerate })
}

/// Exhaustive argmax assignment with the same conventions as the fast
/// path: earliest seed wins ties, seeds keep themselves.
pub fn oracle_assign(tokens: &Matrix, seeds: &[usize]) -> Vec<usize> {
    (0..tokens.rows())
        .map(|i| {
            if let Some(c) = seeds.iter().position(|&s| s == i) {
                return c;
            }
            let sims: Vec<f64> = seeds.iter().map(|&s| dot(tokens.row(i), tokens.row(s))).collect();
            let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            sims.iter().position(|&x| x == best).expect("non-empty")
        })
        .collect()
}

/// Per-cluster mean, members summed in ascending original index.
pub fn oracle_merge(tokens: &Matrix, original: &[usize], assignment: &[usize], n_clusters: usize) -> Matrix {
    let d = tokens.cols();
    let mut out = Matrix::zeros(n_clusters, d);
    for c in 0..n_clusters {
        let mut rows: Vec<usize> = (0..tokens.rows()).filter(|&r| assignment[r] == c).collect();
        rows.sort_by_key(|&r| original[r]);
        for j in 0..d {
            let mut total = 0.0f64;
            for &r in &rows {
                total += f64::from(tokens.row(r)[j]);
            }
            out.row_mut(c)[j] = (total / rows.len() as f64) as f32;
        }
    }
    out
}

/// Elementwise agreement of two LOF tables: identical neighborhoods and
/// degeneracy flags, numeric columns within `tol` (infinities must match).
pub fn lof_tables_agree(a: &LofTable, b: &LofTable, tol: f64) -> bool {
    let close =
        |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(&p, &q)| p == q || (p - q).abs() <= tol);
    a.neighborhoods == b.neighborhoods
        && a.degenerate == b.degenerate
        && close(&a.k_distance, &b.k_distance)
        && close(&a.lrd, &b.lrd)
        && close(&a.lof, &b.lof)
}

/// Neighborhood sizes used for randomized LOF cases.
pub const ORACLE_KS: [usize; 4] = [5, 20, 30, 90];

/// Random score vector for oracle checks. Every fourth case is quantized to
/// a coarse grid to force ties and duplicate runs.
pub fn random_lof_case(rng: &mut impl Rng, case: usize) -> (Vec<f64>, usize) {
    let k = ORACLE_KS[case % ORACLE_KS.len()];
    let n = rng.random_range(k + 1..=600.max(k + 1));
    let quantize = case % 4 == 3;
    let scores = (0..n)
        .map(|_| {
            let x: f64 = rng.random();
            if quantize {
                (x * 16.0).floor() / 16.0
            } else {
                x
            }
        })
        .collect();
    (scores, k)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleCheck {
    pub lof_pass: usize,
    pub lof_fail: usize,
    pub assign_pass: usize,
    pub assign_fail: usize,
    pub merge_pass: usize,
    pub merge_fail: usize,
}

impl OracleCheck {
    pub fn all_passed(&self) -> bool {
        self.lof_fail == 0 && self.assign_fail == 0 && self.merge_fail == 0
    }
}

/// Runs `cases` randomized comparisons of each fast path against its
/// reference.
pub fn oracle_check(seed: u64, cases: usize) -> OracleCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleCheck::default();
    for case in 0..cases {
        let (scores, k) = random_lof_case(&mut rng, case);
        let fast = build_lof_table(&scores, &LofParams::with_k(k));
        let slow = oracle_lof(&scores, k);
        match (fast, slow) {
            (Ok(a), Ok(b)) if lof_tables_agree(&a, &b, 1e-9) => out.lof_pass += 1,
            _ => out.lof_fail += 1,
        }

        let rows = rng.random_range(1..=80);
        let d = rng.random_range(1..=24);
        let data: Vec<f32> = (0..rows * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let tokens = Matrix::new(rows, d, data).expect("shape");
        let n_seeds = rng.random_range(1..=rows.min(8));
        let mut seeds = sample(&mut rng, rows, n_seeds).into_vec();
        seeds.sort_unstable();
        let fast = assign_clusters(&tokens, &seeds);
        if fast == oracle_assign(&tokens, &seeds) {
            out.assign_pass += 1;
        } else {
            out.assign_fail += 1;
        }

        let original: Vec<usize> = sample(&mut rng, 10 * rows, rows).into_vec();
        let (merged, _) = merge_clusters(&tokens, &original, &fast, &seeds);
        if merged.bits_eq(&oracle_merge(&tokens, &original, &fast, seeds.len())) {
            out.merge_pass += 1;
        } else {
            out.merge_fail += 1;
        }
    }
    out
}
