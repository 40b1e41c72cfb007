//! DeiT-style encoder: pre-norm attention/MLP blocks with a token-reduction
//! hook between them, class-attention capture, and weight container I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::diag::{LayerDiag, RunDiag};
use crate::embed::{self, StemWeights, TokenBatch};
use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};
use crate::par;
use crate::reduce::{self, ReductionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// Non-overlapping patches, linearly projected.
    Grid,
    /// Overlapping convolution stack (four 3×3 stride-2 convs, then 1×1).
    Coherence,
}

fn default_image_size() -> usize {
    224
}
fn default_stem_width() -> usize {
    24
}
fn default_ln_eps() -> f32 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub patch_size: usize,
    pub stem: StemKind,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Width of the first coherence-stem stage; later stages double it.
    #[serde(default = "default_stem_width")]
    pub stem_base_width: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
}

impl ModelConfig {
    pub fn deit_tiny() -> Self {
        Self {
            depth: 12,
            heads: 3,
            dim: 192,
            mlp_ratio: 4.0,
            num_classes: 1000,
            patch_size: 16,
            stem: StemKind::Grid,
            image_size: 224,
            stem_base_width: 24,
            ln_eps: 1e-6,
        }
    }

    pub fn deit_small() -> Self {
        Self {
            heads: 6,
            dim: 384,
            ..Self::deit_tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return cfg(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.hidden_dim() == 0 {
            return cfg(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio));
        }
        if self.num_classes == 0 {
            return cfg("num_classes must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return cfg(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return cfg(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.stem == StemKind::Coherence {
            let reduction = 1 << embed::STEM_STAGES;
            if self.patch_size != reduction {
                return cfg(format!("the coherence stem reduces by {reduction}; patch_size must be {reduction}"));
            }
            if self.stem_base_width == 0 {
                return cfg("stem_base_width must be positive".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1: (Tensor, Tensor),
    /// `D×3D`, columns laid out as `[q | k | v]`, each split into heads.
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub norm2: (Tensor, Tensor),
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedWeights {
    Grid { projection: Tensor, bias: Tensor },
    Coherence(StemWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: EmbedWeights,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub norm: (Tensor, Tensor),
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Attention maps of one block, captured before the residual add.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// `heads×N×N`, post-softmax.
    pub per_head: Tensor,
    /// Head-mean of the class-token row of `per_head`.
    pub class_attention: Tensor,
    /// `N×D`, head keys concatenated.
    pub keys: Tensor,
    /// Class-token attention output `A_class·V`, heads concatenated, before
    /// the output projection.
    pub cls_output: Tensor,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.per_head.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.keys.shape()[0]
    }

    /// Keys averaged across heads (`N×D/heads`), the matching feature space.
    pub fn metric_keys(&self) -> Tensor {
        let heads = self.heads();
        let (n, d) = self.keys.dims2().expect("keys are a matrix");
        let dh = d / heads;
        let mut out = vec![0.0f32; n * dh];
        for i in 0..n {
            let row = self.keys.row(i);
            for (j, o) in out[i * dh..(i + 1) * dh].iter_mut().enumerate() {
                let s: f64 = (0..heads).map(|h| f64::from(row[h * dh + j])).sum();
                *o = (s / heads as f64) as f32;
            }
        }
        Tensor::new(vec![n, dh], out).expect("shape matches")
    }
}

fn columns(t: &Tensor, start: usize, width: usize) -> Tensor {
    let (n, _) = t.dims2().expect("matrix");
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        out.extend_from_slice(&t.row(i)[start..start + width]);
    }
    Tensor::new(vec![n, width], out).expect("shape matches")
}

/// Pre-norm multi-head self-attention with residual.
///
/// When `size_bias` is given, `ln(size)` is added to every key's logits so a
/// merged token is attended to as if it were `size` tokens.
pub fn mhsa_forward(
    batch: &TokenBatch,
    block: &BlockWeights,
    cfg: &ModelConfig,
    size_bias: Option<&[u32]>,
) -> Result<(TokenBatch, AttentionRecord)> {
    let (n, d) = batch.features.dims2()?;
    if d != cfg.dim || block.qkv_w.shape() != [d, 3 * d] {
        return Err(Error::Dimension(format!(
            "token width {d} vs model dim {} / qkv {:?}",
            cfg.dim,
            block.qkv_w.shape()
        )));
    }
    let cls = batch
        .cls_index
        .ok_or_else(|| Error::Precondition("attention needs a class token".into()))?;
    let bias: Option<Vec<f32>> = match size_bias {
        Some(sizes) if sizes.len() != n => {
            return Err(Error::Dimension(format!("{} size biases for {n} tokens", sizes.len())))
        }
        Some(sizes) => Some(sizes.iter().map(|&s| (s as f32).ln()).collect()),
        None => None,
    };

    let h = numerics::layer_norm(&batch.features, &block.norm1.0, &block.norm1.1, cfg.ln_eps)?;
    let qkv = numerics::linear(&h, &block.qkv_w, &block.qkv_b)?;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = (dh as f32).sqrt();

    let per_head: Vec<Result<(Tensor, Tensor)>> = par::map_range(heads, |hi| {
        let q = columns(&qkv, hi * dh, dh);
        let k = columns(&qkv, d + hi * dh, dh);
        let v = columns(&qkv, 2 * d + hi * dh, dh);
        let logits = numerics::matmul_transb(&q, &k)?;
        let attn = numerics::softmax_rows_biased(&logits, scale, bias.as_deref())?;
        let out = numerics::matmul(&attn, &v)?;
        Ok((attn, out))
    });

    let mut maps = Vec::with_capacity(heads * n * n);
    let mut concat = vec![0.0f32; n * d];
    let mut class_attention = vec![0.0f64; n];
    for (hi, res) in per_head.into_iter().enumerate() {
        let (attn, out) = res?;
        for (j, c) in class_attention.iter_mut().enumerate() {
            *c += f64::from(attn.row(cls)[j]);
        }
        maps.extend_from_slice(attn.data());
        for i in 0..n {
            concat[i * d + hi * dh..i * d + (hi + 1) * dh].copy_from_slice(out.row(i));
        }
    }
    let concat = Tensor::new(vec![n, d], concat)?;
    let projected = numerics::linear(&concat, &block.proj_w, &block.proj_b)?;
    let mut out = batch.clone();
    out.features = batch.features.add(&projected)?;
    out.features.ensure_finite("attention output")?;

    let record = AttentionRecord {
        per_head: Tensor::new(vec![heads, n, n], maps)?,
        class_attention: Tensor::new(
            vec![n],
            class_attention.iter().map(|&c| (c / heads as f64) as f32).collect(),
        )?,
        keys: columns(&qkv, d, d),
        cls_output: Tensor::new(vec![d], concat.row(cls).to_vec())?,
    };
    Ok((out, record))
}

/// Pre-norm two-layer GELU MLP with residual. Token metadata is untouched.
pub fn mlp_forward(batch: &TokenBatch, block: &BlockWeights, cfg: &ModelConfig) -> Result<TokenBatch> {
    let h = numerics::layer_norm(&batch.features, &block.norm2.0, &block.norm2.1, cfg.ln_eps)?;
    let mut hidden = numerics::linear(&h, &block.fc1_w, &block.fc1_b)?;
    numerics::gelu_in_place(&mut hidden);
    let y = numerics::linear(&hidden, &block.fc2_w, &block.fc2_b)?;
    let mut out = batch.clone();
    out.features = batch.features.add(&y)?;
    out.features.ensure_finite("mlp output")?;
    Ok(out)
}

/// `[0, 1]` image → finalized token batch (channel normalization, stem,
/// class token, positions).
pub fn embed_image(weights: &ModelWeights, image: &Tensor) -> Result<TokenBatch> {
    let batch = embed_patches(weights, image)?;
    embed::finalize_tokens(batch, &weights.pos_embed, &weights.cls_token)
}

/// `[0, 1]` image → image tokens straight from the stem, without class token
/// or positions.
pub fn embed_patches(weights: &ModelWeights, image: &Tensor) -> Result<TokenBatch> {
    let cfg = &weights.config;
    let shape = image.shape();
    if shape != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::Dimension(format!(
            "model expects 3x{0}x{0} images, got {shape:?}",
            cfg.image_size
        )));
    }
    let image = embed::normalize_image(image)?;
    match &weights.embed {
        EmbedWeights::Grid { projection, bias } => {
            embed::patchify_embed(&image, cfg.patch_size, projection, bias)
        }
        EmbedWeights::Coherence(stem) => embed::coherence_stem(&image, stem),
    }
}

pub fn encoder_forward(
    batch: TokenBatch,
    weights: &ModelWeights,
    rcfg: &ReductionConfig,
) -> Result<(Tensor, RunDiag)> {
    encoder_forward_observed(batch, weights, rcfg, &mut |_, _| {})
}

/// Like [`encoder_forward`], calling `observe(layer, batch)` after each
/// layer's reduction step.
pub fn encoder_forward_observed(
    mut batch: TokenBatch,
    weights: &ModelWeights,
    rcfg: &ReductionConfig,
    observe: &mut dyn FnMut(usize, &TokenBatch),
) -> Result<(Tensor, RunDiag)> {
    let cfg = &weights.config;
    rcfg.validate(cfg.depth)?;
    if batch.cls_index.is_none() {
        return Err(Error::Precondition("encoder input must carry a class token".into()));
    }
    let mut per_layer = Vec::with_capacity(cfg.depth);
    let mut prev_merged: Option<Vec<u32>> = None;
    for (layer, block) in weights.blocks.iter().enumerate() {
        let bias = rcfg.proportional_attention.then_some(batch.sizes.as_slice());
        let (attended, record) = mhsa_forward(&batch, block, cfg, bias)?;
        let scores = reduce::score_tokens(&record, &attended)?;
        let image_scores: Vec<(u32, f32)> = attended
            .image_positions()
            .into_iter()
            .map(|p| (attended.ids[p], scores[p]))
            .collect();
        let inattn_to_attn = prev_merged.as_deref().map(|prev| {
            crate::diag::inattn_to_attn_ratio(prev, &image_scores, rcfg.nonsemantic_proportion)
        });

        let (reduced, report) = reduce::reduce_layer(attended, &record, rcfg, layer)?;
        batch = mlp_forward(&reduced, block, cfg)?;
        observe(layer, &batch);

        let merged_ids: Vec<u32> = report.merges.iter().map(|m| m.b_id).collect();
        prev_merged = (!merged_ids.is_empty()).then(|| merged_ids.clone());
        per_layer.push(LayerDiag::new(layer, batch.len(), report, merged_ids, image_scores, inattn_to_attn));
    }
    let normed = numerics::layer_norm(&batch.features, &weights.norm.0, &weights.norm.1, cfg.ln_eps)?;
    let cls = batch.cls_index.expect("reduction keeps the class token");
    let cls_row = normed.select_rows(&[cls])?;
    let logits = numerics::linear(&cls_row, &weights.head_w, &weights.head_b)?.reshape(vec![cfg.num_classes])?;
    logits.ensure_finite("logits")?;
    Ok((logits, RunDiag::from_layers(cfg, per_layer)))
}

/// Embeds and classifies one image.
pub fn classify(weights: &ModelWeights, image: &Tensor, rcfg: &ReductionConfig) -> Result<(Tensor, RunDiag)> {
    encoder_forward(embed_image(weights, image)?, weights, rcfg)
}

/// Index of the largest logit (lowest index on ties).
pub fn argmax(logits: &Tensor) -> usize {
    logits
        .data()
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

// ---------------------------------------------------------------------------
// Initialization and container I/O

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let x: f64 = normal.sample(&mut self.rng);
                if x.abs() <= 2.0 * std {
                    break x as f32;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

const PROJ_STD: f64 = 0.02;

/// Deterministic random weights: truncated normal (std 0.02, cut at 2σ) for
/// projections and embeddings, He-scaled truncated normal for stem kernels,
/// zero biases, unit LayerNorm scales.
pub fn init_random(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = cfg.dim;
    let ln = || (Tensor::full(&[d], 1.0), Tensor::zeros(&[d]));
    let embed = match cfg.stem {
        StemKind::Grid => EmbedWeights::Grid {
            projection: init.trunc_normal(&[3 * cfg.patch_size * cfg.patch_size, d], PROJ_STD),
            bias: Tensor::zeros(&[d]),
        },
        StemKind::Coherence => {
            let mut c_in = 3;
            let mut conv_stack = Vec::with_capacity(embed::STEM_STAGES);
            for width in embed::stem_widths(cfg.stem_base_width) {
                let std = (2.0 / (c_in * 9) as f64).sqrt();
                conv_stack.push((init.trunc_normal(&[width, c_in, 3, 3], std), Tensor::zeros(&[width])));
                c_in = width;
            }
            let std = (2.0 / c_in as f64).sqrt();
            EmbedWeights::Coherence(StemWeights {
                conv_stack,
                projector: (init.trunc_normal(&[d, c_in, 1, 1], std), Tensor::zeros(&[d])),
            })
        }
    };
    let cls_token = init.trunc_normal(&[d], PROJ_STD);
    let pos_embed = init.trunc_normal(&[cfg.num_patches() + 1, d], PROJ_STD);
    let hidden = cfg.hidden_dim();
    let blocks = (0..cfg.depth)
        .map(|_| BlockWeights {
            norm1: ln(),
            qkv_w: init.trunc_normal(&[d, 3 * d], PROJ_STD),
            qkv_b: Tensor::zeros(&[3 * d]),
            proj_w: init.trunc_normal(&[d, d], PROJ_STD),
            proj_b: Tensor::zeros(&[d]),
            norm2: ln(),
            fc1_w: init.trunc_normal(&[d, hidden], PROJ_STD),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: init.trunc_normal(&[hidden, d], PROJ_STD),
            fc2_b: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(ModelWeights {
        config: cfg.clone(),
        embed,
        cls_token,
        pos_embed,
        blocks,
        norm: ln(),
        head_w: init.trunc_normal(&[d, cfg.num_classes], PROJ_STD),
        head_b: Tensor::zeros(&[cfg.num_classes]),
    })
}

/// Container names and expected shapes of every tensor the config needs.
pub fn tensor_schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let hidden = cfg.hidden_dim();
    let mut s: Vec<(String, Vec<usize>)> = Vec::new();
    match cfg.stem {
        StemKind::Grid => {
            s.push(("patch_embed.weight".into(), vec![3 * cfg.patch_size * cfg.patch_size, d]));
            s.push(("patch_embed.bias".into(), vec![d]));
        }
        StemKind::Coherence => {
            let mut c_in = 3;
            for (i, width) in embed::stem_widths(cfg.stem_base_width).into_iter().enumerate() {
                s.push((format!("stem.conv{i}.weight"), vec![width, c_in, 3, 3]));
                s.push((format!("stem.conv{i}.bias"), vec![width]));
                c_in = width;
            }
            s.push(("stem.proj.weight".into(), vec![d, c_in, 1, 1]));
            s.push(("stem.proj.bias".into(), vec![d]));
        }
    }
    s.push(("cls_token".into(), vec![d]));
    s.push(("pos_embed".into(), vec![cfg.num_patches() + 1, d]));
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        s.push((format!("{p}.norm1.weight"), vec![d]));
        s.push((format!("{p}.norm1.bias"), vec![d]));
        s.push((format!("{p}.attn.qkv.weight"), vec![d, 3 * d]));
        s.push((format!("{p}.attn.qkv.bias"), vec![3 * d]));
        s.push((format!("{p}.attn.proj.weight"), vec![d, d]));
        s.push((format!("{p}.attn.proj.bias"), vec![d]));
        s.push((format!("{p}.norm2.weight"), vec![d]));
        s.push((format!("{p}.norm2.bias"), vec![d]));
        s.push((format!("{p}.mlp.fc1.weight"), vec![d, hidden]));
        s.push((format!("{p}.mlp.fc1.bias"), vec![hidden]));
        s.push((format!("{p}.mlp.fc2.weight"), vec![hidden, d]));
        s.push((format!("{p}.mlp.fc2.bias"), vec![d]));
    }
    s.push(("norm.weight".into(), vec![d]));
    s.push(("norm.bias".into(), vec![d]));
    s.push(("head.weight".into(), vec![d, cfg.num_classes]));
    s.push(("head.bias".into(), vec![cfg.num_classes]));
    s
}

impl ModelWeights {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.metadata.insert(
            "config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        let mut put = |name: String, t: &Tensor| {
            c.tensors.insert(name, t.clone());
        };
        match &self.embed {
            EmbedWeights::Grid { projection, bias } => {
                put("patch_embed.weight".into(), projection);
                put("patch_embed.bias".into(), bias);
            }
            EmbedWeights::Coherence(stem) => {
                for (i, (k, b)) in stem.conv_stack.iter().enumerate() {
                    put(format!("stem.conv{i}.weight"), k);
                    put(format!("stem.conv{i}.bias"), b);
                }
                put("stem.proj.weight".into(), &stem.projector.0);
                put("stem.proj.bias".into(), &stem.projector.1);
            }
        }
        put("cls_token".into(), &self.cls_token);
        put("pos_embed".into(), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            put(format!("{p}.norm1.weight"), &b.norm1.0);
            put(format!("{p}.norm1.bias"), &b.norm1.1);
            put(format!("{p}.attn.qkv.weight"), &b.qkv_w);
            put(format!("{p}.attn.qkv.bias"), &b.qkv_b);
            put(format!("{p}.attn.proj.weight"), &b.proj_w);
            put(format!("{p}.attn.proj.bias"), &b.proj_b);
            put(format!("{p}.norm2.weight"), &b.norm2.0);
            put(format!("{p}.norm2.bias"), &b.norm2.1);
            put(format!("{p}.mlp.fc1.weight"), &b.fc1_w);
            put(format!("{p}.mlp.fc1.bias"), &b.fc1_b);
            put(format!("{p}.mlp.fc2.weight"), &b.fc2_w);
            put(format!("{p}.mlp.fc2.bias"), &b.fc2_b);
        }
        put("norm.weight".into(), &self.norm.0);
        put("norm.bias".into(), &self.norm.1);
        put("head.weight".into(), &self.head_w);
        put("head.bias".into(), &self.head_b);
        c
    }

    pub fn from_container(mut c: Container, path: &Path) -> Result<Self> {
        let raw = c
            .metadata
            .get("config")
            .ok_or_else(|| Error::format(path, "metadata lacks a model config"))?;
        let config: ModelConfig =
            serde_json::from_str(raw).map_err(|e| Error::format(path, format!("model config: {e}")))?;
        config.validate()?;
        for (name, shape) in tensor_schema(&config) {
            match c.tensors.get(&name) {
                None => return Err(Error::format(path, format!("missing tensor '{name}'"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::format(
                        path,
                        format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        let expected = tensor_schema(&config).len();
        if c.tensors.len() != expected {
            let known: std::collections::BTreeSet<String> =
                tensor_schema(&config).into_iter().map(|(n, _)| n).collect();
            let extra = c.tensors.keys().find(|k| !known.contains(*k)).cloned().unwrap_or_default();
            return Err(Error::format(path, format!("unexpected tensor '{extra}'")));
        }
        let embed = match config.stem {
            StemKind::Grid => EmbedWeights::Grid {
                projection: c.take("patch_embed.weight", path)?,
                bias: c.take("patch_embed.bias", path)?,
            },
            StemKind::Coherence => {
                let mut conv_stack = Vec::with_capacity(embed::STEM_STAGES);
                for i in 0..embed::STEM_STAGES {
                    conv_stack.push((
                        c.take(&format!("stem.conv{i}.weight"), path)?,
                        c.take(&format!("stem.conv{i}.bias"), path)?,
                    ));
                }
                EmbedWeights::Coherence(StemWeights {
                    conv_stack,
                    projector: (c.take("stem.proj.weight", path)?, c.take("stem.proj.bias", path)?),
                })
            }
        };
        let cls_token = c.take("cls_token", path)?;
        let pos_embed = c.take("pos_embed", path)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            let mut t = |s: &str| c.take(&format!("{p}.{s}"), path);
            blocks.push(BlockWeights {
                norm1: (t("norm1.weight")?, t("norm1.bias")?),
                qkv_w: t("attn.qkv.weight")?,
                qkv_b: t("attn.qkv.bias")?,
                proj_w: t("attn.proj.weight")?,
                proj_b: t("attn.proj.bias")?,
                norm2: (t("norm2.weight")?, t("norm2.bias")?),
                fc1_w: t("mlp.fc1.weight")?,
                fc1_b: t("mlp.fc1.bias")?,
                fc2_w: t("mlp.fc2.weight")?,
                fc2_b: t("mlp.fc2.bias")?,
            });
        }
        Ok(Self {
            embed,
            cls_token,
            pos_embed,
            blocks,
            norm: (c.take("norm.weight", path)?, c.take("norm.bias", path)?),
            head_w: c.take("head.weight", path)?,
            head_b: c.take("head.bias", path)?,
            config,
        })
    }
}

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    weights.to_container().write(path)
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    ModelWeights::from_container(Container::read(path)?, path)
}

/// Loads an input image: `.ppm` files as P6, anything else as a tensor
/// container holding a single `3×H×W` tensor.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        return embed::read_ppm(path);
    }
    let c = Container::read(path)?;
    let mut tensors = c.tensors.into_values();
    match (tensors.next(), tensors.next()) {
        (Some(t), None) if t.shape().len() == 3 && t.shape()[0] == 3 => Ok(t),
        _ => Err(Error::format(path, "expected exactly one 3×H×W tensor")),
    }
}
