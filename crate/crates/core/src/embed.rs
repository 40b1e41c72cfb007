//! Image → token sequence: grid patchifier, convolutional coherence stem,
//! class-token/positional finalization, and grid-aligned random masking.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

/// Side length of the square masking/patch cell, in pixels.
pub const MASK_CELL: usize = 16;

/// Id reserved for the class token.
pub const CLS_ID: u32 = u32::MAX;

/// Token embeddings plus the bookkeeping that lets reduction steps account for
/// every original patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub features: Tensor,
    /// Number of original patches each token stands for (CLS counts as 1).
    pub sizes: Vec<u32>,
    /// Original patch indices covered by each token, sorted ascending.
    pub provenance: Vec<Vec<u32>>,
    /// Stable token identities. A merged token keeps the id of the token that
    /// absorbed the others.
    pub ids: Vec<u32>,
    pub cls_index: Option<usize>,
    pub grid: (usize, usize),
    /// Original patches discarded by pruning so far, sorted ascending.
    pub pruned: Vec<u32>,
}

impl TokenBatch {
    /// One token per grid cell, in row-major cell order.
    pub fn from_grid_features(features: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != grid.0 * grid.1 {
            return Err(Error::Dimension(format!(
                "{n} tokens for a {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self {
            features,
            sizes: vec![1; n],
            provenance: (0..n as u32).map(|i| vec![i]).collect(),
            ids: (0..n as u32).collect(),
            cls_index: None,
            grid,
            pruned: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Positions of the non-CLS tokens, in sequence order.
    pub fn image_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| Some(i) != self.cls_index).collect()
    }

    pub fn image_count(&self) -> usize {
        self.len() - usize::from(self.cls_index.is_some())
    }

    pub fn pruned_size(&self) -> usize {
        self.pruned.len()
    }

    /// Keeps the tokens at `positions` (ascending), dropping the rest without
    /// touching the pruned ledger.
    pub(crate) fn retain_positions(&mut self, positions: &[usize]) -> Result<()> {
        self.features = self.features.select_rows(positions)?;
        self.sizes = positions.iter().map(|&p| self.sizes[p]).collect();
        self.provenance = positions
            .iter()
            .map(|&p| std::mem::take(&mut self.provenance[p]))
            .collect();
        self.ids = positions.iter().map(|&p| self.ids[p]).collect();
        self.cls_index = self
            .cls_index
            .and_then(|c| positions.iter().position(|&p| p == c));
        Ok(())
    }

    /// Checks size/provenance bookkeeping: disjoint provenance, sizes match
    /// provenance, and survivors plus pruned patches partition the grid.
    pub fn check_invariants(&self) -> Result<()> {
        let p = self.patch_count();
        let n = self.len();
        if self.provenance.len() != n || self.ids.len() != n || self.features.shape()[0] != n {
            return Err(Error::Precondition("token metadata lengths disagree".into()));
        }
        let mut seen = vec![false; p];
        let mut covered = 0usize;
        for i in 0..n {
            if Some(i) == self.cls_index {
                if self.sizes[i] != 1 || !self.provenance[i].is_empty() {
                    return Err(Error::Precondition("class token must have size 1 and no patches".into()));
                }
                continue;
            }
            if self.sizes[i] as usize != self.provenance[i].len() {
                return Err(Error::Precondition(format!(
                    "token {i}: size {} but {} patches",
                    self.sizes[i],
                    self.provenance[i].len()
                )));
            }
            for &cell in &self.provenance[i] {
                let cell = cell as usize;
                if cell >= p || seen[cell] {
                    return Err(Error::Precondition(format!("patch {cell} claimed twice or out of grid")));
                }
                seen[cell] = true;
                covered += 1;
            }
        }
        for &cell in &self.pruned {
            let cell = cell as usize;
            if cell >= p || seen[cell] {
                return Err(Error::Precondition(format!("pruned patch {cell} also live or out of grid")));
            }
            seen[cell] = true;
        }
        if covered + self.pruned.len() != p {
            return Err(Error::Precondition(format!(
                "{covered} live + {} pruned patches != {p}",
                self.pruned.len()
            )));
        }
        Ok(())
    }
}

/// Weights of the overlapping-convolution stem: four 3×3 stride-2 layers
/// followed by a 1×1 projection to the token width.
#[derive(Debug, Clone, PartialEq)]
pub struct StemWeights {
    /// `(kernels F×C×3×3, bias F)` for each of the four stages.
    pub conv_stack: Vec<(Tensor, Tensor)>,
    /// `(kernels D×C×1×1, bias D)`.
    pub projector: (Tensor, Tensor),
}

pub const STEM_STAGES: usize = 4;

/// Channel widths for the stem stages, doubling from `base`.
pub fn stem_widths(base: usize) -> [usize; STEM_STAGES] {
    [base, base * 2, base * 4, base * 8]
}

/// Splits an image into non-overlapping patches and projects each one.
///
/// Patches are flattened channel-major (`c`, then row, then column).
pub fn patchify_embed(
    image: &Tensor,
    patch_size: usize,
    projection: &Tensor,
    bias: &Tensor,
) -> Result<TokenBatch> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Dimension(format!("image must be C×H×W, got {:?}", image.shape())));
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} image is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let patch_len = c * patch_size * patch_size;
    let mut patches = Vec::with_capacity(rows * cols * patch_len);
    let px = image.data();
    for r in 0..rows {
        for q in 0..cols {
            for ch in 0..c {
                for y in 0..patch_size {
                    let start = (ch * h + r * patch_size + y) * w + q * patch_size;
                    patches.extend_from_slice(&px[start..start + patch_size]);
                }
            }
        }
    }
    let patches = Tensor::new(vec![rows * cols, patch_len], patches)?;
    let features = numerics::linear(&patches, projection, bias)?;
    TokenBatch::from_grid_features(features, (rows, cols))
}

/// Runs the convolutional stem and flattens the final map row-major into
/// one token per cell.
pub fn coherence_stem(image: &Tensor, weights: &StemWeights) -> Result<TokenBatch> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::Dimension(format!("image must be C×H×W, got {:?}", image.shape())));
    };
    let reduction = 1usize << weights.conv_stack.len();
    if h % reduction != 0 || w % reduction != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} does not reduce to an integer grid under a {reduction}x stem"
        )));
    }
    let mut x = image.clone();
    for (kernels, bias) in &weights.conv_stack {
        x = numerics::conv2d(&x, kernels, bias, 2, 1)?;
        numerics::gelu_in_place(&mut x);
    }
    let (proj, proj_bias) = &weights.projector;
    let map = numerics::conv2d(&x, proj, proj_bias, 1, 0)?;
    let &[d, rows, cols] = map.shape() else {
        unreachable!("conv2d returns a 3-D tensor");
    };
    let cells = rows * cols;
    let mut tokens = vec![0.0f32; cells * d];
    for (ch, plane) in map.data().chunks(cells).enumerate() {
        for (cell, &v) in plane.iter().enumerate() {
            tokens[cell * d + ch] = v;
        }
    }
    TokenBatch::from_grid_features(Tensor::new(vec![cells, d], tokens)?, (rows, cols))
}

/// Prepends the class token and adds positional embeddings.
pub fn finalize_tokens(
    batch: TokenBatch,
    positional: &Tensor,
    cls_embedding: &Tensor,
) -> Result<TokenBatch> {
    if batch.cls_index.is_some() {
        return Err(Error::Precondition("batch already carries a class token".into()));
    }
    let (n, d) = batch.features.dims2()?;
    if positional.shape() != [n + 1, d] {
        return Err(Error::Dimension(format!(
            "positional table {:?} for {n} tokens of width {d}",
            positional.shape()
        )));
    }
    if cls_embedding.len() != d {
        return Err(Error::Dimension(format!(
            "class embedding width {} vs {d}",
            cls_embedding.len()
        )));
    }
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(cls_embedding.data());
    data.extend_from_slice(batch.features.data());
    for (v, p) in data.iter_mut().zip(positional.data()) {
        *v += p;
    }
    let mut sizes = Vec::with_capacity(n + 1);
    sizes.push(1);
    sizes.extend_from_slice(&batch.sizes);
    let mut provenance = Vec::with_capacity(n + 1);
    provenance.push(Vec::new());
    provenance.extend(batch.provenance);
    let mut ids = Vec::with_capacity(n + 1);
    ids.push(CLS_ID);
    ids.extend(batch.ids);
    Ok(TokenBatch {
        features: Tensor::new(vec![n + 1, d], data)?,
        sizes,
        provenance,
        ids,
        cls_index: Some(0),
        grid: batch.grid,
        pruned: batch.pruned,
    })
}

/// Per-channel mean and standard deviation used to normalize `[0, 1]` RGB input.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Maps a `3×H×W` image in `[0, 1]` to `(x - mean) / std` per channel.
pub fn normalize_image(image: &Tensor) -> Result<Tensor> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Dimension(format!("image must be 3×H×W, got {:?}", image.shape())));
    };
    let mut out = image.clone();
    for (c, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        for v in plane {
            *v = (*v - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
        }
    }
    Ok(out)
}

/// Zeroes `k` distinct, grid-aligned 16×16 cells chosen uniformly under `seed`.
pub fn apply_random_masks(image: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Dimension(format!("image must be C×H×W, got {:?}", image.shape())));
    };
    let (rows, cols) = (h / MASK_CELL, w / MASK_CELL);
    let cells = rows * cols;
    if k > cells {
        return Err(Error::Range(format!("{k} masks requested but only {cells} cells")));
    }
    let mut out = image.clone();
    if k == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = index::sample(&mut rng, cells, k).into_iter().collect();
    let data = out.data_mut();
    for cell in chosen {
        let (r, q) = (cell / cols, cell % cols);
        for ch in 0..c {
            for y in 0..MASK_CELL {
                let start = (ch * h + r * MASK_CELL + y) * w + q * MASK_CELL;
                data[start..start + MASK_CELL].fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Reads a binary P6 PPM into a `3×H×W` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |why: &str| Error::format(path, why.to_string());

    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated PPM header"));
        }
        let line = line.split('#').next().unwrap_or("");
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    if header[0] != "P6" {
        return Err(bad("not a binary P6 PPM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric PPM header field"));
    let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
    if header.len() > 4 {
        return Err(bad("pixel data on header line"));
    }
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported PPM extent or maxval"));
    }
    let mut raw = vec![0u8; w * h * 3];
    reader.read_exact(&mut raw).map_err(|_| bad("truncated pixel data"))?;
    let mut data = vec![0.0f32; 3 * h * w];
    let scale = maxval as f32;
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = f32::from(px[ch]) / scale;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a `3×H×W` tensor in `[0, 1]` as an 8-bit P6 PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Dimension(format!("PPM needs 3×H×W, got {:?}", image.shape())));
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let px = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            bytes.push((px[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Smooth synthetic image: three plane waves per channel with at most
/// `SMOOTH_MAX_CYCLES` cycles across each axis, rescaled into `[0.05, 0.95]`.
pub const SMOOTH_MAX_CYCLES: f64 = 8.0;

pub fn synthetic_smooth_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; 3 * h * w];
    for plane in data.chunks_mut(h * w) {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(-SMOOTH_MAX_CYCLES..SMOOTH_MAX_CYCLES),
                    rng.random_range(-SMOOTH_MAX_CYCLES..SMOOTH_MAX_CYCLES),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.3..1.0),
                )
            })
            .collect();
        let mut raw: Vec<f64> = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
                raw.push(
                    waves
                        .iter()
                        .map(|&(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * u + fx * v) + ph).cos())
                        .sum(),
                );
            }
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-9);
        for (d, r) in plane.iter_mut().zip(raw) {
            *d = (0.05 + 0.9 * (r - lo) / span) as f32;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape matches data")
}

/// Image whose intensity rises linearly from left to right in every channel.
pub fn horizontal_gradient_image(h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, v) in data.iter_mut().enumerate() {
        let x = i % w;
        *v = (x as f32 + 0.5) / w as f32;
    }
    Tensor::new(vec![3, h, w], data).expect("shape matches data")
}
