//! Run diagnostics, analytic token/FLOPs accounting, reduction-quality
//! metrics, and the throughput and masking harnesses.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embed::{self, TokenBatch};
use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};
use crate::par;
use crate::reduce::{self, ReductionConfig, StepReport, StrategyKind};
use crate::vit::{self, ModelConfig, ModelWeights, StemKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiag {
    pub layer: usize,
    /// Tokens leaving the layer, class token included.
    pub token_count: usize,
    pub merges_executed: usize,
    pub pruned_size: usize,
    pub mean_merge_similarity: Option<f64>,
    pub merge_similarities: Vec<f64>,
    /// Ids of the non-semantic candidate set (ImagePiece only).
    pub bottom_k_set: Vec<u32>,
    /// Ids of tokens that absorbed others at this layer.
    pub merged_token_ids: Vec<u32>,
    /// Ids of both endpoints of every executed merge.
    pub merged_endpoint_ids: Vec<u32>,
    /// `(id, class attention)` of image tokens entering the reduction step.
    pub image_scores: Vec<(u32, f32)>,
    /// Share of the previous layer's merged tokens now outside the bottom-k.
    pub inattn_to_attn: Option<f64>,
}

impl LayerDiag {
    pub(crate) fn new(
        layer: usize,
        token_count: usize,
        report: StepReport,
        merged_token_ids: Vec<u32>,
        image_scores: Vec<(u32, f32)>,
        inattn_to_attn: Option<f64>,
    ) -> Self {
        let merge_similarities: Vec<f64> = report.merges.iter().map(|m| m.similarity).collect();
        let mean_merge_similarity = (!merge_similarities.is_empty())
            .then(|| merge_similarities.iter().sum::<f64>() / merge_similarities.len() as f64);
        Self {
            layer,
            token_count,
            merges_executed: report.merges.len(),
            pruned_size: report.pruned_size,
            mean_merge_similarity,
            merge_similarities,
            bottom_k_set: report.bottom_k_ids,
            merged_token_ids,
            merged_endpoint_ids: report.merges.iter().flat_map(|m| [m.a_id, m.b_id]).collect(),
            image_scores,
            inattn_to_attn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiag {
    pub per_layer: Vec<LayerDiag>,
    pub final_output_tokens: usize,
    pub flops: u64,
}

impl RunDiag {
    pub(crate) fn from_layers(cfg: &ModelConfig, per_layer: Vec<LayerDiag>) -> Self {
        let counts: Vec<usize> = per_layer.iter().map(|l| l.token_count).collect();
        Self {
            final_output_tokens: counts.last().copied().unwrap_or(cfg.num_patches() + 1),
            flops: flops_count(cfg, &counts),
            per_layer,
        }
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.per_layer.iter().map(|l| l.token_count).collect()
    }
}

/// Per-layer token counts (class token included, after each layer's
/// reduction) using the same rounding rules as the reduction steps.
pub fn token_schedule(cfg: &ModelConfig, rcfg: &ReductionConfig) -> Vec<usize> {
    let mut n = cfg.num_patches();
    let mut out = Vec::with_capacity(cfg.depth);
    for layer in 0..cfg.depth {
        match rcfg.strategy {
            StrategyKind::None => {}
            StrategyKind::Imagepiece => {
                if rcfg.merges_at(layer) {
                    n -= reduce::imagepiece_merge_count(n, rcfg.merge_ratio, rcfg.nonsemantic_proportion);
                }
                if rcfg.prunes_at(layer) {
                    n = reduce::ceil_frac(rcfg.keep_rate, n);
                }
            }
            StrategyKind::Evit => {
                if rcfg.prunes_at(layer) {
                    let keep = reduce::ceil_frac(rcfg.keep_rate, n);
                    n = if keep < n && rcfg.evit_fuse { keep + 1 } else { keep };
                }
            }
            StrategyKind::Tome => {
                if rcfg.merges_at(layer) {
                    let edges = if n >= 2 { n.div_ceil(2) } else { 0 };
                    n -= rcfg.tome_reduction.min(edges);
                }
            }
        }
        out.push(n + 1);
    }
    out
}

/// Stem FLOPs (2 per multiply-accumulate).
pub fn stem_flops(cfg: &ModelConfig) -> u64 {
    let p = cfg.num_patches() as u64;
    let d = cfg.dim as u64;
    match cfg.stem {
        StemKind::Grid => 2 * p * (3 * cfg.patch_size as u64 * cfg.patch_size as u64) * d,
        StemKind::Coherence => {
            let mut side = cfg.image_size as u64;
            let mut c_in = 3u64;
            let mut macs = 0u64;
            for width in embed::stem_widths(cfg.stem_base_width) {
                side /= 2;
                macs += width as u64 * c_in * 9 * side * side;
                c_in = width as u64;
            }
            2 * (macs + d * c_in * side * side)
        }
    }
}

/// Analytic FLOPs (2 per multiply-accumulate) for a per-layer token schedule.
///
/// Layer `l` attends over the tokens entering it, `N_in`, and runs its MLP on
/// the tokens leaving its reduction step, `N_out = schedule[l]`:
///
/// ```text
/// attention: 2·(4·N_in·D² + 2·N_in²·D)
/// mlp:       2·(2·N_out·D·H)            H = mlp_ratio·D
/// ```
///
/// plus the stem and a `D×classes` head on the class token.
pub fn flops_count(cfg: &ModelConfig, schedule: &[usize]) -> u64 {
    let d = cfg.dim as u64;
    let hidden = cfg.hidden_dim() as u64;
    let mut total = stem_flops(cfg) + 2 * d * cfg.num_classes as u64;
    let mut n_in = cfg.num_patches() as u64 + 1;
    for &n_out in schedule {
        let n_out = n_out as u64;
        total += 2 * (4 * n_in * d * d + 2 * n_in * n_in * d);
        total += 2 * (2 * n_out * d * hidden);
        n_in = n_out;
    }
    total
}

/// Fraction of previously merged tokens (by id) that now rank above the
/// bottom-k cut. Tokens no longer present are ignored; an empty set gives 0.
pub fn inattn_to_attn_ratio(prev_merged_ids: &[u32], current_scores: &[(u32, f32)], p: f64) -> f64 {
    if prev_merged_ids.is_empty() || !(p > 0.0 && p < 1.0) {
        return 0.0;
    }
    let scores: Vec<f32> = current_scores.iter().map(|s| s.1).collect();
    let bottom: std::collections::BTreeSet<u32> = reduce::select_bottom_k(&scores, p)
        .expect("p validated above")
        .into_iter()
        .map(|i| current_scores[i].0)
        .collect();
    let present: Vec<u32> = prev_merged_ids
        .iter()
        .copied()
        .filter(|id| current_scores.iter().any(|s| s.0 == *id))
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    let escaped = present.iter().filter(|id| !bottom.contains(id)).count();
    escaped as f64 / present.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSel {
    First,
    Last,
}

/// Mean similarity of executed merges at the first or last layer that merged.
/// `None` when the run never merged.
pub fn merged_pair_similarity(run: &RunDiag, layer_sel: LayerSel) -> Option<f64> {
    let mut merging = run.per_layer.iter().filter(|l| l.merges_executed > 0);
    let layer = match layer_sel {
        LayerSel::First => merging.next(),
        LayerSel::Last => merging.next_back(),
    }?;
    layer.mean_merge_similarity
}

/// Mean of the `n` smallest values (all of them if fewer than `n`).
pub fn aggregate_lowest(samples: &[f64], n: usize) -> Option<f64> {
    if samples.is_empty() || n == 0 {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let take = n.min(sorted.len());
    Some(sorted[..take].iter().sum::<f64>() / take as f64)
}

/// Percentage of tokens merged at the first merging layer whose class
/// attention ranks within the top `q_percent` of that layer's image tokens.
pub fn merged_topk_overlap(run: &RunDiag, q_percent: f64) -> f64 {
    let Some(layer) = run.per_layer.iter().find(|l| l.merges_executed > 0) else {
        return 0.0;
    };
    let n = layer.image_scores.len();
    let top_count = reduce::floor_frac(q_percent.clamp(0.0, 100.0) / 100.0, n);
    let mut order: Vec<usize> = (0..n).collect();
    let s = &layer.image_scores;
    order.sort_by(|&i, &j| s[i].1.total_cmp(&s[j].1).then(i.cmp(&j)));
    let top: std::collections::BTreeSet<u32> = order[n - top_count..].iter().map(|&i| s[i].0).collect();
    let merged: std::collections::BTreeSet<u32> = layer.merged_endpoint_ids.iter().copied().collect();
    if merged.is_empty() {
        return 0.0;
    }
    100.0 * merged.iter().filter(|id| top.contains(id)).count() as f64 / merged.len() as f64
}

/// Mean cosine similarity over all 4-neighbour pairs of a one-token-per-cell
/// batch (before the class token is added).
pub fn adjacency_similarity(batch: &TokenBatch) -> Result<f64> {
    let (rows, cols) = batch.grid;
    let mut token_of = vec![usize::MAX; rows * cols];
    for (t, prov) in batch.provenance.iter().enumerate() {
        if Some(t) == batch.cls_index {
            continue;
        }
        let [cell] = prov.as_slice() else {
            return Err(Error::Precondition("adjacency needs one token per grid cell".into()));
        };
        token_of[*cell as usize] = t;
    }
    if token_of.contains(&usize::MAX) {
        return Err(Error::Precondition("grid has cells without a token".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for r in 0..rows {
        for c in 0..cols {
            let here = batch.features.row(token_of[r * cols + c]);
            if c + 1 < cols {
                sum += numerics::cosine_similarity(here, batch.features.row(token_of[r * cols + c + 1]))?;
                pairs += 1;
            }
            if r + 1 < rows {
                sum += numerics::cosine_similarity(here, batch.features.row(token_of[(r + 1) * cols + c]))?;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Degenerate("grid has no adjacent pairs".into()));
    }
    Ok(sum / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub strategy: StrategyKind,
    pub batch_size: usize,
    pub iterations: usize,
    pub threads: usize,
    pub median_seconds: f64,
    pub images_per_second: f64,
    pub flops: u64,
    pub schedule: Vec<usize>,
}

/// Wall-clock throughput on seeded synthetic images: one warm-up pass, then
/// the median over `iterations` timed batches.
pub fn bench(
    weights: &ModelWeights,
    rcfg: &ReductionConfig,
    batch_size: usize,
    iterations: usize,
    seed: u64,
) -> Result<BenchReport> {
    let cfg = &weights.config;
    rcfg.validate(cfg.depth)?;
    if batch_size == 0 || iterations == 0 {
        return Err(Error::Config("batch size and iterations must be positive".into()));
    }
    let images: Vec<Tensor> = (0..batch_size)
        .map(|i| embed::synthetic_smooth_image(cfg.image_size, cfg.image_size, seed.wrapping_add(i as u64)))
        .collect();
    let run_batch = || -> Result<()> {
        for r in par::map_slice(&images, |img| vit::classify(weights, img, rcfg)) {
            r?;
        }
        Ok(())
    };
    run_batch()?;
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        run_batch()?;
        times.push(start.elapsed().as_secs_f64());
    }
    let median_seconds = median(&mut times);
    let schedule = token_schedule(cfg, rcfg);
    Ok(BenchReport {
        strategy: rcfg.strategy,
        batch_size,
        iterations,
        threads: par::current_threads(),
        median_seconds,
        images_per_second: batch_size as f64 / median_seconds,
        flops: flops_count(cfg, &schedule),
        schedule,
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub masks: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Per-mask-count seed for image `index`: the same cells are masked no
/// matter how the work is scheduled.
pub fn mask_seed(seed: u64, masks: usize, index: usize) -> u64 {
    seed ^ ((masks as u64) << 32) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Top-1 accuracy (percent) for each mask count in `k_list`.
pub fn mask_eval(
    weights: &ModelWeights,
    rcfg: &ReductionConfig,
    images: &[(Tensor, usize)],
    k_list: &[usize],
    seed: u64,
) -> Result<Vec<MaskRow>> {
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let hits = par::map_range(images.len(), |i| -> Result<bool> {
            let (img, label) = &images[i];
            let masked = embed::apply_random_masks(img, k, mask_seed(seed, k, i))?;
            let (logits, _) = vit::classify(weights, &masked, rcfg)?;
            Ok(vit::argmax(&logits) == *label)
        });
        let mut correct = 0;
        for h in hits {
            correct += usize::from(h?);
        }
        let total = images.len();
        rows.push(MaskRow {
            masks: k,
            correct,
            total,
            accuracy: if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 },
        });
    }
    Ok(rows)
}

/// `layer,tokens,flops_cum` rows for a schedule; `flops_cum` includes the stem.
pub fn schedule_rows(cfg: &ModelConfig, schedule: &[usize]) -> Vec<(usize, usize, u64)> {
    (0..schedule.len())
        .map(|l| {
            let upto = flops_count(cfg, &schedule[..=l]) - 2 * cfg.dim as u64 * cfg.num_classes as u64;
            (l, schedule[l], upto)
        })
        .collect()
}
