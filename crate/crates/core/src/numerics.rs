//! Dense f32 tensors and the handful of kernels a ViT forward pass needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Work (multiply-adds) above which matmul rows are spread across workers.
const PAR_MATMUL_WORK: usize = 1 << 15;

/// Row-major f32 array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Row `i` of a 2-D tensor. Panics if out of range.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("tensor has a shape");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let cols = *self.shape.last().expect("tensor has a shape");
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the listed rows of a matrix into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let (n, cols) = self.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Range(format!("row {r} of {n}")));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }
}

/// `a[m×k] · b[k×n]`, accumulated in f64.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: {m}x{k} · {kb}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    let row_kernel = |i: usize, out_row: &mut [f32]| {
        let a_row = &ad[i * k..(i + 1) * k];
        let mut acc = vec![0.0f64; n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = f64::from(av);
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(b_row) {
                *o += av * f64::from(bv);
            }
        }
        for (o, a) in out_row.iter_mut().zip(acc) {
            *o = a as f32;
        }
    };
    if m * k * n >= PAR_MATMUL_WORK {
        par::for_each_chunk_mut(&mut out, n, row_kernel);
    } else {
        out.chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_kernel(i, row));
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
pub fn matmul_transb(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return Err(Error::Dimension(format!(
            "matmul_transb inner dimensions differ: {m}x{k} · ({n}x{kb})ᵀ"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, b.row(j));
        }
    }
    Tensor::new(vec![m, n], out)
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum::<f64>() as f32
}

/// `x · w + bias`, with `bias` broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    let (_, n) = y.dims2()?;
    if bias.len() != n {
        return Err(Error::Dimension(format!(
            "bias length {} does not match output width {n}",
            bias.len()
        )));
    }
    for row in y.data.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

/// Row softmax of `t / scale`, stabilized by subtracting the row maximum.
pub fn softmax_rows(t: &Tensor, scale: f32) -> Result<Tensor> {
    softmax_rows_biased(t, scale, None)
}

/// Row softmax of `t / scale + bias[j]`; `bias` is per column.
pub fn softmax_rows_biased(t: &Tensor, scale: f32, bias: Option<&[f32]>) -> Result<Tensor> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Precondition(format!("softmax scale must be > 0, got {scale}")));
    }
    t.ensure_finite("softmax input")?;
    let (m, n) = t.dims2()?;
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::Dimension(format!(
                "softmax bias length {} vs {n} columns",
                b.len()
            )));
        }
    }
    let mut out = vec![0.0f32; m * n];
    let mut logits = vec![0.0f32; n];
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        for (j, (l, &x)) in logits.iter_mut().zip(t.row(i)).enumerate() {
            *l = x / scale;
            if let Some(b) = bias {
                *l += b[j];
            }
        }
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        let exps: Vec<f64> = logits
            .iter()
            .map(|&l| {
                let e = f64::from(l - max).exp();
                sum += e;
                e
            })
            .collect();
        for (o, e) in out_row.iter_mut().zip(exps) {
            *o = (e / sum) as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Per-row normalization (population variance) followed by `gamma`/`beta`.
pub fn layer_norm(t: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (n, d) = t.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm width {d} vs gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = vec![0.0f32; n * d];
    for (i, out_row) in out.chunks_mut(d).enumerate() {
        let row = t.row(i);
        let mean = row.iter().map(|&x| f64::from(x)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&x| (f64::from(x) - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        for (j, o) in out_row.iter_mut().enumerate() {
            let z = (f64::from(row[j]) - mean) * inv;
            *o = (z * f64::from(gamma.data[j]) + f64::from(beta.data[j])) as f32;
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Exact Gaussian error linear unit, `x·Φ(x)`.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

pub fn gelu(t: &Tensor) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| gelu_scalar(x)).collect(),
    }
}

pub fn gelu_in_place(t: &mut Tensor) {
    t.data.iter_mut().for_each(|x| *x = gelu_scalar(*x));
}

/// Zero-padded 2-D cross-correlation.
///
/// `input` is `C×H×W`, `kernels` is `F×C×kh×kw`, `bias` has `F` entries.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::Dimension(format!(
            "conv2d input must be C×H×W, got {:?}",
            input.shape()
        )));
    };
    let &[f, kc, kh, kw] = kernels.shape() else {
        return Err(Error::Dimension(format!(
            "conv2d kernels must be F×C×kh×kw, got {:?}",
            kernels.shape()
        )));
    };
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d kernel channels {kc} vs input channels {c}"
        )));
    }
    if bias.len() != f {
        return Err(Error::Dimension(format!("conv2d bias {} vs {f} filters", bias.len())));
    }
    if stride == 0 {
        return Err(Error::Precondition("conv2d stride must be positive".into()));
    }
    let out_extent = |n: usize, k: usize| -> Result<usize> {
        let padded = n + 2 * padding;
        if padded < k {
            return Err(Error::Dimension(format!(
                "conv2d kernel {k} larger than padded extent {padded}"
            )));
        }
        Ok((padded - k) / stride + 1)
    };
    let oh = out_extent(h, kh)?;
    let ow = out_extent(w, kw)?;

    let x = input.data();
    let kd = kernels.data();
    let mut out = vec![0.0f32; f * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |fi, plane| {
        plane.fill(bias.data[fi]);
        for ci in 0..c {
            let channel = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kd[((fi * c + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &channel[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += wv * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![f, oh, ow], out)
}

/// Cosine of the angle between two vectors, accumulated in f64.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine_similarity lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] +=
                        f64::from(a.data()[i * k + p]) * f64::from(b.data()[p * n + j]);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let b = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![1., 0.]]).unwrap();
        let c = Tensor::from_rows(&[vec![0.], vec![5.]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[3, 5], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((f64::from(*g) - e).abs() < 1e-6);
        }
        // Large enough to take the parallel path.
        let a = random(&[64, 48], &mut rng);
        let b = random(&[48, 40], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((f64::from(*g) - e).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn transb_agrees_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[6, 7], &mut rng);
        let mut bt = vec![0.0; 42];
        for i in 0..6 {
            for j in 0..7 {
                bt[j * 6 + i] = b.data()[i * 7 + j];
            }
        }
        let bt = Tensor::new(vec![7, 6], bt).unwrap();
        let x = matmul_transb(&a, &b).unwrap();
        let y = matmul(&a, &bt).unwrap();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0., 0., 0.]]).unwrap();
        for v in softmax_rows(&t, 1.0).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let t = Tensor::from_rows(&[vec![1000., 0.]]).unwrap();
        let s = softmax_rows(&t, 1.0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);

        let t = Tensor::from_rows(&[vec![1., 2., 3.]]).unwrap();
        let scale = 2f64.sqrt();
        let s = softmax_rows(&t, scale as f32).unwrap();
        let z: f64 = (1..=3).map(|x| (f64::from(x) / scale).exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            let e = ((i + 1) as f64 / scale).exp() / z;
            assert!((f64::from(*v) - e).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let t = Tensor::from_rows(&[vec![f32::NAN, 0.]]).unwrap();
        assert!(matches!(softmax_rows(&t, 1.0), Err(Error::Numeric(_))));
        let t = Tensor::from_rows(&[vec![0., 0.]]).unwrap();
        assert!(softmax_rows(&t, 0.0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let t = Tensor::from_rows(&[vec![5., 5., 5.]]).unwrap();
        assert_eq!(layer_norm(&t, &ones, &zeros, 1e-5).unwrap().data(), &[0., 0., 0.]);

        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let t = Tensor::from_rows(&[vec![-1., 1.]]).unwrap();
        let y = layer_norm(&t, &ones, &zeros, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 37;
        let t = random(&[1, d], &mut rng);
        let y = layer_norm(&t, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), 1e-6).unwrap();
        let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = y
            .data()
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);

        assert!(matches!(
            layer_norm(&t, &Tensor::zeros(&[3]), &Tensor::zeros(&[3]), 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
        // Φ(1) = 0.841344746...
        assert!((gelu_scalar(1.0) - 0.841_344_7).abs() < 1e-4);
    }

    #[test]
    fn conv_scalar_scaling() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_impulse_response_is_flipped_kernel() {
        let mut x = Tensor::zeros(&[1, 3, 3]);
        x.data_mut()[4] = 1.0;
        let k = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
        let flipped: Vec<f32> = (1..=9).rev().map(|v| v as f32).collect();
        assert_eq!(y.data(), flipped.as_slice());
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let y = conv2d(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
        for f in 0..4 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut acc = f64::from(b.data()[f]);
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                    acc += f64::from(x.data()[(c * 8 + iy as usize) * 8 + ix as usize])
                                        * f64::from(k.data()[((f * 3 + c) * 3 + ky) * 3 + kx]);
                                }
                            }
                        }
                    }
                    let got = f64::from(y.data()[(f * 4 + oy) * 4 + ox]);
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv_rejects_empty_output() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1., 2., 3.], &[1., 2., 3.]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1., -2.], &[-1., 2.]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0., 0.], &[1., 0.]),
            Err(Error::Degenerate(_))
        ));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in proptest::collection::vec(proptest::collection::vec(-50.0f32..50.0, 1..12), 1..6),
            scale in 0.1f32..10.0,
        ) {
            let n = rows[0].len();
            let rows: Vec<Vec<f32>> = rows.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
            let t = Tensor::from_rows(&rows).unwrap();
            let s = softmax_rows(&t, scale).unwrap();
            for i in 0..rows.len() {
                let sum: f64 = s.row(i).iter().map(|&v| f64::from(v)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(s.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn matmul_identity_is_exact(vals in proptest::collection::vec(-100.0f32..100.0, 12)) {
            let a = Tensor::new(vec![3, 4], vals).unwrap();
            prop_assert_eq!(&matmul(&a, &Tensor::identity(4)).unwrap(), &a);
            prop_assert_eq!(&matmul(&Tensor::identity(3), &a).unwrap(), &a);
        }

        #[test]
        fn unit_kernel_conv_sums_channels(vals in proptest::collection::vec(-10.0f32..10.0, 2 * 4 * 5)) {
            let x = Tensor::new(vec![2, 4, 5], vals.clone()).unwrap();
            let k = Tensor::full(&[1, 2, 1, 1], 1.0);
            let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
            for i in 0..20 {
                prop_assert_eq!(y.data()[i], vals[i] + vals[20 + i]);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-5.0f32..5.0, 8),
            b in proptest::collection::vec(-5.0f32..5.0, 8),
            alpha in 0.01f32..100.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let s = cosine_similarity(&a, &b).unwrap();
            prop_assert!((s - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
            let scaled: Vec<f32> = a.iter().map(|v| v * alpha).collect();
            prop_assert!((s - cosine_similarity(&scaled, &b).unwrap()).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
