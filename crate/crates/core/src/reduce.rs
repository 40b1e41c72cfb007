//! Token reduction: ImagePiece retokenization (merge only the least attended
//! tokens, then re-score and prune), class-attention pruning with a fused
//! token, and global bipartite merging.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embed::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};
use crate::vit::AttentionRecord;

/// Slack for products like `0.3 * 10` that land a hair off an integer.
const ROUNDING_SLACK: f64 = 1e-9;

/// `floor(ratio · n)`, robust to representation error.
pub fn floor_frac(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + ROUNDING_SLACK).floor().max(0.0) as usize
}

/// `ceil(ratio · n)`, robust to representation error.
pub fn ceil_frac(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 - ROUNDING_SLACK).ceil().max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    None,
    Evit,
    Tome,
    Imagepiece,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "evit" => Ok(Self::Evit),
            "tome" => Ok(Self::Tome),
            "imagepiece" => Ok(Self::Imagepiece),
            other => Err(Error::Config(format!(
                "strategy must be one of none|evit|tome|imagepiece, got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Evit => "evit",
            Self::Tome => "tome",
            Self::Imagepiece => "imagepiece",
        })
    }
}

fn default_proportion() -> f64 {
    0.3
}
fn default_merge_ratio() -> f64 {
    0.08
}
fn default_keep_rate() -> f64 {
    0.8
}
fn default_tome_r() -> usize {
    13
}
fn default_prune_layers() -> BTreeSet<usize> {
    BTreeSet::from([3, 6, 9])
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionConfig {
    pub strategy: StrategyKind,
    /// Fraction of image tokens treated as non-semantic (bottom-k) candidates.
    #[serde(default = "default_proportion")]
    pub nonsemantic_proportion: f64,
    /// Merges per retokenization layer, as a fraction of current image tokens.
    #[serde(default = "default_merge_ratio")]
    pub merge_ratio: f64,
    /// Fraction of image tokens kept at each pruning layer.
    #[serde(default = "default_keep_rate")]
    pub keep_rate: f64,
    /// Token pairs merged per layer by the global merging baseline.
    #[serde(default = "default_tome_r")]
    pub tome_reduction: usize,
    /// Layers that merge; `None` means every layer.
    #[serde(default)]
    pub retokenize_layers: Option<BTreeSet<usize>>,
    #[serde(default = "default_prune_layers")]
    pub prune_layers: BTreeSet<usize>,
    /// Add `ln(size)` to attention logits of merged tokens.
    #[serde(default = "yes")]
    pub proportional_attention: bool,
    /// Fuse tokens discarded by attention pruning into one extra token.
    #[serde(default = "yes")]
    pub evit_fuse: bool,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self::new(StrategyKind::Imagepiece)
    }
}

impl ReductionConfig {
    pub fn new(strategy: StrategyKind) -> Self {
        Self {
            strategy,
            nonsemantic_proportion: default_proportion(),
            merge_ratio: default_merge_ratio(),
            keep_rate: default_keep_rate(),
            tome_reduction: default_tome_r(),
            retokenize_layers: None,
            prune_layers: default_prune_layers(),
            proportional_attention: true,
            evit_fuse: true,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open("nonsemantic_proportion", self.nonsemantic_proportion)?;
        open("merge_ratio", self.merge_ratio)?;
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(Error::Config(format!("keep_rate must lie in (0, 1], got {}", self.keep_rate)));
        }
        let layers = self.retokenize_layers.iter().flatten().chain(&self.prune_layers);
        if let Some(bad) = layers.copied().find(|&l| l >= depth) {
            return Err(Error::Config(format!("layer {bad} scheduled but the model has {depth} layers")));
        }
        Ok(())
    }

    pub fn merges_at(&self, layer: usize) -> bool {
        self.retokenize_layers.as_ref().is_none_or(|s| s.contains(&layer))
    }

    pub fn prunes_at(&self, layer: usize) -> bool {
        self.prune_layers.contains(&layer)
    }
}

/// One candidate merge: A-group member `a` joins B-group member `b`.
/// Both are positions within their group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchEdge {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchPlan {
    /// Sorted by similarity, highest first; ties keep A order.
    pub edges: Vec<MatchEdge>,
    /// Token positions of group A.
    pub a_indices: Vec<usize>,
    /// Token positions of group B.
    pub b_indices: Vec<usize>,
}

impl MatchPlan {
    pub fn top(&self, m: usize) -> &[MatchEdge] {
        &self.edges[..m.min(self.edges.len())]
    }
}

/// A merge that was carried out, by token id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutedMerge {
    pub a_id: u32,
    pub b_id: u32,
    pub similarity: f64,
}

/// What a reduction step did, for diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub merges: Vec<ExecutedMerge>,
    pub bottom_k_ids: Vec<u32>,
    pub pruned_size: usize,
}

/// Per-token importance: class attention for image tokens, `+∞` for the
/// class token so it never ranks among the least attended.
pub fn score_tokens(record: &AttentionRecord, batch: &TokenBatch) -> Result<Vec<f32>> {
    let n = record.class_attention.len();
    if n != batch.len() {
        return Err(Error::Dimension(format!(
            "attention covers {n} tokens, batch has {}",
            batch.len()
        )));
    }
    let mut scores = record.class_attention.data().to_vec();
    if let Some(c) = batch.cls_index {
        scores[c] = f32::INFINITY;
    }
    Ok(scores)
}

/// Size of the non-semantic set: `floor(p·n)` rounded down to even.
pub fn bottom_k_count(n: usize, p: f64) -> usize {
    let k = floor_frac(p, n);
    k - k % 2
}

/// Indices of ascending `(score, index)` order.
fn ascending_order(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    idx
}

/// The `k` lowest-scoring indices, lowest first (ties: lower index first).
pub fn select_bottom_k(scores: &[f32], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Precondition(format!("proportion must lie in (0, 1), got {p}")));
    }
    let k = bottom_k_count(scores.len(), p);
    let mut order = ascending_order(scores);
    order.truncate(k);
    Ok(order)
}

/// Deals a score-ordered list alternately into A (even positions) and B.
pub fn alternating_split(bottom: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if !bottom.len().is_multiple_of(2) {
        return Err(Error::Precondition(format!(
            "alternating split needs an even count, got {}",
            bottom.len()
        )));
    }
    Ok((
        bottom.iter().step_by(2).copied().collect(),
        bottom.iter().skip(1).step_by(2).copied().collect(),
    ))
}

/// Links every A token to its most cosine-similar B token (lowest B on ties).
///
/// `keys` holds one row per token position.
pub fn bipartite_soft_match(keys: &Tensor, a_indices: &[usize], b_indices: &[usize]) -> Result<MatchPlan> {
    let mut plan = MatchPlan {
        edges: Vec::with_capacity(a_indices.len()),
        a_indices: a_indices.to_vec(),
        b_indices: b_indices.to_vec(),
    };
    if a_indices.is_empty() || b_indices.is_empty() {
        return Ok(plan);
    }
    for (ai, &a) in a_indices.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (bi, &b) in b_indices.iter().enumerate() {
            let s = numerics::cosine_similarity(keys.row(a), keys.row(b))?;
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((bi, s));
            }
        }
        let (b, similarity) = best.expect("B is non-empty");
        plan.edges.push(MatchEdge { a: ai, b, similarity });
    }
    plan.edges
        .sort_by(|x, y| y.similarity.total_cmp(&x.similarity).then(x.a.cmp(&y.a)));
    Ok(plan)
}

/// For each B position that absorbs something: the A positions it absorbs,
/// in edge order.
fn absorption(plan: &MatchPlan, m: usize) -> BTreeMap<usize, Vec<usize>> {
    let mut into: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in plan.top(m) {
        into.entry(plan.b_indices[e.b]).or_default().push(plan.a_indices[e.a]);
    }
    into
}

/// Executes the `m` most similar edges. Each B token becomes the size-weighted
/// mean of itself and every A token that picked it; A tokens disappear.
pub fn apply_merge(batch: &TokenBatch, plan: &MatchPlan, m: usize) -> Result<TokenBatch> {
    if m > plan.edges.len() {
        return Err(Error::Range(format!("{m} merges requested, plan has {} edges", plan.edges.len())));
    }
    if m == 0 {
        return Ok(batch.clone());
    }
    let into = absorption(plan, m);
    let mut out = batch.clone();
    let d = batch.dim();
    let mut removed = vec![false; batch.len()];
    for (&b, sources) in &into {
        let mut acc: Vec<f64> = batch.features.row(b).iter().map(|&v| f64::from(v) * f64::from(batch.sizes[b])).collect();
        let mut total = u64::from(batch.sizes[b]);
        let mut prov = batch.provenance[b].clone();
        for &a in sources {
            if Some(a) == batch.cls_index || Some(b) == batch.cls_index {
                return Err(Error::Precondition("the class token cannot be merged".into()));
            }
            let w = f64::from(batch.sizes[a]);
            for (s, &v) in acc.iter_mut().zip(batch.features.row(a)) {
                *s += w * f64::from(v);
            }
            total += u64::from(batch.sizes[a]);
            prov.extend_from_slice(&batch.provenance[a]);
            removed[a] = true;
        }
        let row = out.features.row_mut(b);
        for j in 0..d {
            row[j] = (acc[j] / total as f64) as f32;
        }
        prov.sort_unstable();
        out.provenance[b] = prov;
        out.sizes[b] = u32::try_from(total).expect("token size fits u32");
    }
    let keep: Vec<usize> = (0..batch.len()).filter(|&i| !removed[i]).collect();
    out.retain_positions(&keep)?;
    Ok(out)
}

/// Keeps the class token and the `ceil(keep_rate · n_img)` highest-scoring
/// image tokens in their original order. Returns the patch count discarded.
pub fn prune_keep(batch: &TokenBatch, scores: &[f32], keep_rate: f64) -> Result<(TokenBatch, usize)> {
    let (kept, dropped) = partition_by_score(batch, scores, keep_rate)?;
    let mut out = batch.clone();
    let pruned_size: usize = dropped.iter().map(|&p| batch.sizes[p] as usize).sum();
    for &p in &dropped {
        out.pruned.extend_from_slice(&batch.provenance[p]);
    }
    out.pruned.sort_unstable();
    out.retain_positions(&kept)?;
    Ok((out, pruned_size))
}

/// Splits positions into (kept incl. CLS, dropped), both ascending.
fn partition_by_score(batch: &TokenBatch, scores: &[f32], keep_rate: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::Precondition(format!("keep_rate must lie in (0, 1], got {keep_rate}")));
    }
    if scores.len() != batch.len() {
        return Err(Error::Dimension(format!("{} scores for {} tokens", scores.len(), batch.len())));
    }
    let image = batch.image_positions();
    let keep = ceil_frac(keep_rate, image.len());
    let image_scores: Vec<f32> = image.iter().map(|&p| scores[p]).collect();
    // Lowest first; the tail of length `keep` survives.
    let order = ascending_order(&image_scores);
    let mut dropped: Vec<usize> = order[..image.len() - keep].iter().map(|&i| image[i]).collect();
    dropped.sort_unstable();
    let mut is_dropped = vec![false; batch.len()];
    dropped.iter().for_each(|&p| is_dropped[p] = true);
    let kept = (0..batch.len()).filter(|&p| !is_dropped[p]).collect();
    Ok((kept, dropped))
}

/// Class attention carried through a merge: each surviving token's score is
/// the summed score of everything it absorbed, renormalized over image tokens.
fn merged_scores(batch: &TokenBatch, scores: &[f32], plan: &MatchPlan, m: usize) -> Vec<f32> {
    let into = absorption(plan, m);
    let mut acc: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
    let mut removed = vec![false; scores.len()];
    for (&b, sources) in &into {
        for &a in sources {
            acc[b] += acc[a];
            removed[a] = true;
        }
    }
    let total: f64 = (0..acc.len())
        .filter(|&i| !removed[i] && Some(i) != batch.cls_index)
        .map(|i| acc[i])
        .sum();
    (0..acc.len())
        .filter(|&i| !removed[i])
        .map(|i| {
            if Some(i) == batch.cls_index || total <= 0.0 {
                acc[i] as f32
            } else {
                (acc[i] / total) as f32
            }
        })
        .collect()
}

fn executed(batch: &TokenBatch, plan: &MatchPlan, m: usize) -> Vec<ExecutedMerge> {
    plan.top(m)
        .iter()
        .map(|e| ExecutedMerge {
            a_id: batch.ids[plan.a_indices[e.a]],
            b_id: batch.ids[plan.b_indices[e.b]],
            similarity: e.similarity,
        })
        .collect()
}

/// Merge count for a retokenization layer, capped by the available edges.
pub fn imagepiece_merge_count(n_img: usize, merge_ratio: f64, p: f64) -> usize {
    floor_frac(merge_ratio, n_img).min(bottom_k_count(n_img, p) / 2)
}

/// One ImagePiece layer.
///
/// Step I scores tokens by class attention. Step II takes the bottom-k set,
/// deals it alternately into A and B, matches A→B on head-mean keys and
/// executes the `floor(merge_ratio · n_img)` most similar edges. On pruning
/// layers the merged abstractions are re-scored with the carried-over
/// attention mass and the lowest-ranked tokens are dropped. The next layer's
/// attention re-evaluates the abstractions again.
pub fn step_imagepiece(
    batch: TokenBatch,
    record: &AttentionRecord,
    cfg: &ReductionConfig,
    layer: usize,
) -> Result<(TokenBatch, StepReport)> {
    let mut report = StepReport::default();
    let mut scores = score_tokens(record, &batch)?;
    let mut batch = batch;

    if cfg.merges_at(layer) {
        let image = batch.image_positions();
        let image_scores: Vec<f32> = image.iter().map(|&p| scores[p]).collect();
        let bottom: Vec<usize> = select_bottom_k(&image_scores, cfg.nonsemantic_proportion)?
            .into_iter()
            .map(|i| image[i])
            .collect();
        report.bottom_k_ids = bottom.iter().map(|&p| batch.ids[p]).collect();
        let (a, b) = alternating_split(&bottom)?;
        let plan = bipartite_soft_match(&record.metric_keys(), &a, &b)?;
        let m = imagepiece_merge_count(image.len(), cfg.merge_ratio, cfg.nonsemantic_proportion)
            .min(plan.edges.len());
        if m > 0 {
            report.merges = executed(&batch, &plan, m);
            scores = merged_scores(&batch, &scores, &plan, m);
            batch = apply_merge(&batch, &plan, m)?;
        }
    }

    if cfg.prunes_at(layer) {
        let (pruned, size) = prune_keep(&batch, &scores, cfg.keep_rate)?;
        report.pruned_size = size;
        batch = pruned;
    }
    Ok((batch, report))
}

/// Class-attention pruning. Discarded tokens are optionally fused into one
/// extra token, their attention-weighted mean, appended at the end.
pub fn step_evit(
    batch: TokenBatch,
    record: &AttentionRecord,
    keep_rate: f64,
    fuse: bool,
    fused_id: u32,
) -> Result<(TokenBatch, StepReport)> {
    let scores = score_tokens(record, &batch)?;
    if !fuse {
        let (out, pruned_size) = prune_keep(&batch, &scores, keep_rate)?;
        return Ok((out, StepReport { pruned_size, ..StepReport::default() }));
    }
    let (kept, dropped) = partition_by_score(&batch, &scores, keep_rate)?;
    if dropped.is_empty() {
        return Ok((batch, StepReport::default()));
    }
    let d = batch.dim();
    let weight_sum: f64 = dropped.iter().map(|&p| f64::from(scores[p])).sum();
    let mut fused = vec![0.0f64; d];
    for &p in &dropped {
        let w = if weight_sum > 0.0 {
            f64::from(scores[p]) / weight_sum
        } else {
            1.0 / dropped.len() as f64
        };
        for (f, &v) in fused.iter_mut().zip(batch.features.row(p)) {
            *f += w * f64::from(v);
        }
    }
    let mut prov: Vec<u32> = dropped.iter().flat_map(|&p| batch.provenance[p].iter().copied()).collect();
    prov.sort_unstable();
    let size: u32 = dropped.iter().map(|&p| batch.sizes[p]).sum();

    let mut out = batch.clone();
    out.retain_positions(&kept)?;
    let mut data = out.features.into_data();
    data.extend(fused.iter().map(|&v| v as f32));
    out.features = Tensor::new(vec![kept.len() + 1, d], data)?;
    out.sizes.push(size);
    out.provenance.push(prov);
    out.ids.push(fused_id);
    Ok((out, StepReport::default()))
}

/// Global bipartite merging: image tokens alternate into A/B by sequence
/// position and the `r` most similar A→B edges are merged.
pub fn step_tome(batch: TokenBatch, record: &AttentionRecord, r: usize) -> Result<(TokenBatch, StepReport)> {
    if batch.len() != record.tokens() {
        return Err(Error::Dimension("attention record does not match batch".into()));
    }
    let image = batch.image_positions();
    let a: Vec<usize> = image.iter().step_by(2).copied().collect();
    let b: Vec<usize> = image.iter().skip(1).step_by(2).copied().collect();
    let plan = bipartite_soft_match(&record.metric_keys(), &a, &b)?;
    let m = r.min(plan.edges.len());
    let report = StepReport {
        merges: executed(&batch, &plan, m),
        ..StepReport::default()
    };
    Ok((apply_merge(&batch, &plan, m)?, report))
}

/// Dispatches the configured strategy for one layer.
pub fn reduce_layer(
    batch: TokenBatch,
    record: &AttentionRecord,
    cfg: &ReductionConfig,
    layer: usize,
) -> Result<(TokenBatch, StepReport)> {
    match cfg.strategy {
        StrategyKind::None => Ok((batch, StepReport::default())),
        StrategyKind::Imagepiece => {
            if cfg.merges_at(layer) || cfg.prunes_at(layer) {
                step_imagepiece(batch, record, cfg, layer)
            } else {
                Ok((batch, StepReport::default()))
            }
        }
        StrategyKind::Evit if cfg.prunes_at(layer) => {
            let fused_id = (batch.patch_count() + layer) as u32;
            step_evit(batch, record, cfg.keep_rate, cfg.evit_fuse, fused_id)
        }
        StrategyKind::Evit => Ok((batch, StepReport::default())),
        StrategyKind::Tome if cfg.merges_at(layer) => step_tome(batch, record, cfg.tome_reduction),
        StrategyKind::Tome => Ok((batch, StepReport::default())),
    }
}
