//! Dense f32 tensors and a seedable random source.
//!
//! Every value the model, sampler, and analyzer touch is a row-major f32
//! `Tensor`. All operations are pure and evaluate in a pinned order so that
//! the same inputs always produce bit-identical outputs:
//!
//! - `matmul` accumulates strictly left to right over the inner dimension,
//!   starting from 0.0 (the vectorized kernel preserves this order exactly).
//! - `softmax_last_axis` subtracts the slice maximum, exponentiates in f32,
//!   and accumulates the normalizer in f64.
//! - `layer_norm` computes mean and variance in f64 over two passes and
//!   rounds once back to f32. No learned affine is applied.
//! - `gelu` is the tanh approximation
//!   `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
//! - `cosine_similarity` accumulates dot products in f64 and divides by
//!   `sqrt(|a|^2 * |b|^2)`, which makes the similarity of a vector with
//!   itself exactly 1.0.

use crate::error::{Error, Result};

/// Dense row-major f32 array with an explicit shape.
///
/// Invariants: the shape is non-empty, every dimension is at least 1, and
/// the product of the dimensions equals the data length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let data = vec![0.0; shape.iter().product()];
        Self::new(shape.to_vec(), data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when every element is bitwise equal (distinguishes -0.0, NaN).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Validity check: false if any element is NaN or infinite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::DimensionMismatch {
                op,
                left: self.shape.clone(),
                right: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Matrix product of two 2-D tensors.
    ///
    /// For each output element the inner sum runs left to right over k,
    /// starting from 0.0. The kernel below unrolls k by 4 to amortize the
    /// output-row traffic, but the per-element add sequence is identical to
    /// the naive triple loop, so results match it to the last bit.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &a[i * k..i * k + k];
            let crow = &mut out[i * n..i * n + n];
            let mut kk = 0;
            while kk + 4 <= k {
                let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
                let b0 = &b[kk * n..kk * n + n];
                let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
                let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
                let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
                for j in 0..n {
                    let mut acc = crow[j];
                    acc += a0 * b0[j];
                    acc += a1 * b1[j];
                    acc += a2 * b2[j];
                    acc += a3 * b3[j];
                    crow[j] = acc;
                }
                kk += 4;
            }
            while kk < k {
                let aik = arow[kk];
                let brow = &b[kk * n..kk * n + n];
                for j in 0..n {
                    crow[j] += aik * brow[j];
                }
                kk += 1;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Softmax over the last axis with max-subtraction for stability.
    /// NaN inputs propagate; use `all_finite` to detect them.
    pub fn softmax_last_axis(&self) -> Tensor {
        let width = *self.shape.last().expect("non-empty shape");
        let mut out = Vec::with_capacity(self.data.len());
        for slice in self.data.chunks_exact(width) {
            let max = slice.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let exps: Vec<f32> = slice.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().map(|&e| e as f64).sum();
            out.extend(exps.iter().map(|&e| (e as f64 / sum) as f32));
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Layer normalization over the last axis, no learned affine.
    ///
    /// Mean and variance are accumulated in f64 (two passes, left to right);
    /// each output element is `(x - mean) / sqrt(var + eps)` computed in f64
    /// and rounded once to f32.
    pub fn layer_norm(&self, eps: f32) -> Tensor {
        assert!(eps > 0.0, "layer_norm requires eps > 0");
        let width = *self.shape.last().expect("non-empty shape");
        let mut out = Vec::with_capacity(self.data.len());
        for slice in self.data.chunks_exact(width) {
            let mean: f64 = slice.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
            let var: f64 = slice
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / width as f64;
            let denom = (var + eps as f64).sqrt();
            out.extend(slice.iter().map(|&v| ((v as f64 - mean) / denom) as f32));
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Elementwise tanh-approximation GELU:
    /// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
    pub fn gelu(&self) -> Tensor {
        const SQRT_2_OVER_PI: f32 = 0.797_884_6;
        let data = self
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
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

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                op: "sub",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Multiply every element by a scalar.
    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Transpose of a 2-D tensor.
    pub fn transposed(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], data)
    }

    /// Copy of columns `[start, end)` of a 2-D tensor.
    pub fn columns(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.rows_cols("columns")?;
        if start >= end || end > n {
            return Err(Error::Input(format!(
                "column range {start}..{end} out of bounds for width {n}"
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Tensor::new(vec![m, w], data)
    }

    /// One row of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[f32] {
        let n = *self.shape.last().expect("non-empty shape");
        &self.data[i * n..(i + 1) * n]
    }

    /// Euclidean distance between equal-shape tensors, accumulated in f64.
    pub fn l2_distance(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                op: "l2_distance",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        Ok(sum.sqrt())
    }
}

/// Cosine similarity of two equal-shape tensors, plus a degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSim {
    pub value: f32,
    /// Set when either input has zero norm; `value` is then 0.
    pub degenerate: bool,
}

/// Cosine similarity treating both tensors as flat vectors.
///
/// Dot products are accumulated in f64 and the result is
/// `dot / sqrt(|a|^2 * |b|^2)`, so identical vectors score exactly 1.0.
/// Zero-norm inputs yield 0 with the degenerate flag set instead of NaN.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<CosineSim> {
    if a.shape != b.shape {
        return Err(Error::DimensionMismatch {
            op: "cosine_similarity",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    cosine_of_slices(&a.data, &b.data)
}

pub(crate) fn cosine_of_slices(a: &[f32], b: &[f32]) -> Result<CosineSim> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            op: "cosine_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let mut dot = 0.0f64;
    let mut na2 = 0.0f64;
    let mut nb2 = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na2 += x as f64 * x as f64;
        nb2 += y as f64 * y as f64;
    }
    if na2 == 0.0 || nb2 == 0.0 {
        return Ok(CosineSim {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(CosineSim {
        value: (dot / (na2 * nb2).sqrt()) as f32,
        degenerate: false,
    })
}

/// Deterministic random source (SplitMix64 state, Box-Muller normals).
///
/// The stream is a pure function of the seed and is identical across runs
/// and platforms: integer state updates are exact, and the f64 conversions
/// below use only IEEE-exact operations.
#[derive(Debug, Clone)]
pub struct RandomSource {
    state: u64,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; used where a logarithm must not see zero.
    fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One pair of independent standard normals via Box-Muller.
    fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Tensor of i.i.d. standard normals. Pairs are consumed in order; for
    /// odd element counts the second half of the final pair is discarded.
    pub fn randn(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() + 2 <= n {
            let (z0, z1) = self.next_normal_pair();
            data.push(z0 as f32);
            data.push(z1 as f32);
        }
        if data.len() < n {
            let (z0, _) = self.next_normal_pair();
            data.push(z0 as f32);
        }
        Tensor::new(shape.to_vec(), data)
    }
}
