//! End-to-end compression: visual filter, text-guided recovery, secondary
//! recovery of the background, and an order-preserving merge of the
//! survivors.

use std::time::Instant;

use crate::cost::{prefill_flops, ModelConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::outlier::dynamic_select_with;
use crate::recovery::{assign_clusters_with, merge_clusters, seed_centers_with};
use crate::scoring::{text_score_rows, visual_score_rows};
use crate::types::{
    validate_bundle, CompressionReport, LofParams, Matrix, OutputSlot, ParamsUsed, ScoreVector, SelectionResult,
    TokenBundle,
};

/// Text prompt length assumed by the cost estimate when none is given.
pub const DEFAULT_TEXT_TOKENS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressOptions {
    /// Filter used for the visual and text passes.
    pub primary: LofParams,
    /// Filter used to pick cluster seeds among the leftover tokens.
    pub secondary: LofParams,
    pub execution: Execution,
    /// When set, the report carries prefill FLOPs before and after.
    pub model: Option<ModelConfig>,
    pub n_text_tokens: usize,
    /// Record wall time in the report.
    pub timing: bool,
}

impl Default for CompressOptions {
    fn default() -> Self {
        CompressOptions {
            primary: LofParams::default(),
            secondary: LofParams::default(),
            execution: Execution::default(),
            model: None,
            n_text_tokens: DEFAULT_TEXT_TOKENS,
            timing: true,
        }
    }
}

impl CompressOptions {
    /// Same filter for both passes.
    pub fn with_k(k: usize) -> Self {
        CompressOptions { primary: LofParams::with_k(k), secondary: LofParams::with_k(k), ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Compression {
    pub selection: SelectionResult,
    /// The output sequence as a bundle; `original_indices` hold placements.
    pub bundle: TokenBundle,
    pub report: CompressionReport,
    /// Visual scores of the input, ordered by original index.
    pub visual_scores: ScoreVector,
}

/// Compresses a bundle. Rows may arrive in any order; all work happens in
/// ascending original-index order, so permuting the input rows does not
/// change the result.
pub fn compress(bundle: &TokenBundle, opts: &CompressOptions) -> Result<Compression> {
    let start = Instant::now();
    validate_bundle(bundle)?;
    opts.primary.validate()?;
    opts.secondary.validate()?;
    if let Some(m) = &opts.model {
        m.validate()?;
    }
    if bundle.cls.is_none() {
        return Err(Error::MissingCls);
    }
    let exec = opts.execution;
    let b = bundle.canonical();
    let n = b.len();
    let idx = &b.original_indices;

    // 1. visual filter
    let all: Vec<usize> = (0..n).collect();
    let visual = visual_score_rows(&b, &all, exec)?;
    let s1 = dynamic_select_with(&visual.normalized, &opts.primary, true, exec);

    // 2. text information recovery over what the visual filter dropped
    let r1 = complement(n, &s1);
    let s2: Vec<usize> = match &b.text {
        Some(_) if !r1.is_empty() => {
            let text = text_score_rows(&b, &r1, exec)?;
            dynamic_select_with(&text.normalized, &opts.primary, false, exec).into_iter().map(|j| r1[j]).collect()
        }
        _ => Vec::new(),
    };

    // 3. secondary recovery of the background
    let r2 = difference(&r1, &s2);
    let (seeds, cluster_of, merged, placement) = if r2.is_empty() {
        (Vec::new(), Vec::new(), Matrix::zeros(0, b.dim()), Vec::new())
    } else {
        let scores = visual_score_rows(&b, &r2, exec)?;
        let seeds = seed_centers_with(&scores.normalized, &opts.secondary, exec);
        let leftover = b.tokens.select_rows(&r2);
        let leftover_idx: Vec<usize> = r2.iter().map(|&p| idx[p]).collect();
        let assignment = assign_clusters_with(&leftover, &seeds, exec);
        let (merged, placement) = merge_clusters(&leftover, &leftover_idx, &assignment, &seeds);
        let seeds = seeds.iter().map(|&j| leftover_idx[j]).collect();
        (seeds, assignment, merged, placement)
    };

    // 4. token merger in original order
    let visual_kept: Vec<usize> = s1.iter().map(|&p| idx[p]).collect();
    let text_recovered: Vec<usize> = s2.iter().map(|&p| idx[p]).collect();
    let mut kept_pos: Vec<usize> = s1.iter().chain(&s2).copied().collect();
    kept_pos.sort_unstable();
    let kept: Vec<usize> = kept_pos.iter().map(|&p| idx[p]).collect();
    let output_order = order_output(&kept, &placement)?;

    let mut rows: Vec<&[f32]> = Vec::with_capacity(output_order.len());
    let mut kept_iter = kept_pos.iter();
    for slot in &output_order {
        match *slot {
            OutputSlot::Kept(_) => rows.push(b.tokens.row(*kept_iter.next().expect("kept slot"))),
            OutputSlot::Merged { cluster, .. } => rows.push(merged.row(cluster)),
        }
    }
    let out_tokens = Matrix::from_rows(b.dim(), &rows)?;
    let mut out = TokenBundle {
        tokens: out_tokens,
        cls: b.cls.clone(),
        text: b.text.clone(),
        proj: b.proj.clone(),
        original_indices: output_order.iter().map(OutputSlot::placement).collect(),
        grid: None,
        metadata: b.metadata.clone(),
    };
    out.metadata.insert("compressed_from".into(), n.to_string());

    let selection = SelectionResult {
        visual_kept,
        text_recovered,
        background: r2.iter().map(|&p| idx[p]).collect(),
        cluster_of,
        cluster_seeds: seeds,
        merged_tokens: merged,
        merged_placement: placement,
        output_order,
    };

    let n_out = selection.n_output();
    let (flops_before, flops_after) = match &opts.model {
        Some(m) => (Some(prefill_flops(m, n + opts.n_text_tokens)), Some(prefill_flops(m, n_out + opts.n_text_tokens))),
        None => (None, None),
    };
    let report = CompressionReport {
        n_input: n,
        n_visual_kept: selection.visual_kept.len(),
        n_text_recovered: selection.text_recovered.len(),
        n_merged: selection.merged_placement.len(),
        retention_ratio: n_out as f64 / n as f64,
        flops_before,
        flops_after,
        wall_time: opts.timing.then(|| start.elapsed().as_secs_f64()),
        params_used: ParamsUsed {
            primary: opts.primary,
            secondary: opts.secondary,
            n_text_tokens: opts.n_text_tokens,
            model: opts.model.clone(),
        },
    };

    Ok(Compression { selection, bundle: out, report, visual_scores: visual })
}

/// Interleaves kept originals and merged placements in ascending order.
/// `kept` must be sorted; `placement[c]` is the slot of cluster `c`.
pub fn order_output(kept: &[usize], placement: &[usize]) -> Result<Vec<OutputSlot>> {
    let mut slots: Vec<OutputSlot> = kept
        .iter()
        .map(|&i| OutputSlot::Kept(i))
        .chain(placement.iter().enumerate().map(|(cluster, &p)| OutputSlot::Merged { cluster, placement: p }))
        .collect();
    slots.sort_by_key(OutputSlot::placement);
    for w in slots.windows(2) {
        if w[0].placement() == w[1].placement() {
            return Err(Error::DuplicatePlacement(w[0].placement()));
        }
    }
    Ok(slots)
}

fn complement(n: usize, sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

fn difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|x| b.binary_search(x).is_err()).collect()
}
