//! Cross-step feature similarity analysis.
//!
//! Works offline over an immutable `FeatureTrace`. Two matrix forms:
//!
//! - consecutive: entry (s, k) is the cosine between layer k's feature at
//!   steps s and s+1, shape `[(T-1) x depth]`;
//! - step pairs: entry (i, j) is the cosine between a fixed layer's
//!   features at steps i and j, shape `[T x T]`, computed once per
//!   unordered pair so the matrix equals its transpose exactly.
//!
//! Degenerate (zero-norm) comparisons score 0 and are counted in the
//! matrix metadata rather than producing NaN.

use crate::cache::{Branch, CachePoint, Sublayer};
use crate::error::{Error, Result};
use crate::tensor::cosine_of_slices;
use crate::trace::FeatureTrace;

/// Which similarity layout a matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixMode {
    Consecutive,
    StepPairs,
}

impl std::fmt::Display for MatrixMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatrixMode::Consecutive => write!(f, "consecutive"),
            MatrixMode::StepPairs => write!(f, "pairs"),
        }
    }
}

/// Similarity values plus the selection metadata that produced them.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values, finite, in [-1, 1] up to f32 rounding.
    pub values: Vec<f32>,
    pub mode: MatrixMode,
    /// Fixed layer for step-pair matrices.
    pub layer: Option<usize>,
    pub sublayer: Sublayer,
    pub branch: Branch,
    /// Cache policy of the run that produced the trace.
    pub policy: String,
    pub cache_point: CachePoint,
    /// Comparisons where at least one feature had zero norm.
    pub degenerate_count: usize,
}

impl SimilarityMatrix {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }
}

/// Cosine between each layer's features at consecutive steps:
/// entry (s, k) compares steps s and s+1.
pub fn consecutive_similarity(
    trace: &FeatureTrace,
    sublayer: Sublayer,
    branch: Branch,
) -> Result<SimilarityMatrix> {
    trace.check_complete()?;
    let steps = trace.steps();
    let depth = trace.depth();
    let mut values = Vec::with_capacity((steps - 1) * depth);
    let mut degenerate = 0;
    for s in 0..steps - 1 {
        for k in 0..depth {
            let a = trace.get(s, k, sublayer, branch)?;
            let b = trace.get(s + 1, k, sublayer, branch)?;
            let sim = cosine_of_slices(a, b)?;
            if sim.degenerate {
                degenerate += 1;
            }
            values.push(sim.value);
        }
    }
    Ok(SimilarityMatrix {
        rows: steps - 1,
        cols: depth,
        values,
        mode: MatrixMode::Consecutive,
        layer: None,
        sublayer,
        branch,
        policy: trace.policy().to_string(),
        cache_point: trace.cache_point(),
        degenerate_count: degenerate,
    })
}

/// Cosine between a fixed layer's features at every step pair. Each
/// unordered pair is computed once and mirrored.
pub fn step_pair_similarity(
    trace: &FeatureTrace,
    layer: usize,
    sublayer: Sublayer,
    branch: Branch,
) -> Result<SimilarityMatrix> {
    if layer >= trace.depth() {
        return Err(Error::Input(format!(
            "layer {layer} out of range (depth = {})",
            trace.depth()
        )));
    }
    trace.check_complete()?;
    let steps = trace.steps();
    let mut values = vec![0.0f32; steps * steps];
    let mut degenerate = 0;
    for i in 0..steps {
        for j in i..steps {
            let a = trace.get(i, layer, sublayer, branch)?;
            let b = trace.get(j, layer, sublayer, branch)?;
            let sim = cosine_of_slices(a, b)?;
            if sim.degenerate {
                degenerate += if i == j { 1 } else { 2 };
            }
            values[i * steps + j] = sim.value;
            values[j * steps + i] = sim.value;
        }
    }
    Ok(SimilarityMatrix {
        rows: steps,
        cols: steps,
        values,
        mode: MatrixMode::StepPairs,
        layer: Some(layer),
        sublayer,
        branch,
        policy: trace.policy().to_string(),
        cache_point: trace.cache_point(),
        degenerate_count: degenerate,
    })
}

/// Render a matrix as an 8-bit binary portable graymap (P5).
///
/// Values map linearly from [vmin, vmax] to [0, 255] with clamping;
/// the gray level is `floor(normalized * 255)`, so 0.5 over [0, 1]
/// renders as 127.
pub fn render_heatmap(matrix: &SimilarityMatrix, vmin: f32, vmax: f32) -> Vec<u8> {
    assert!(vmax > vmin, "heatmap range must be non-empty");
    let mut out = Vec::with_capacity(32 + matrix.values.len());
    out.extend_from_slice(format!("P5\n{} {}\n255\n", matrix.cols, matrix.rows).as_bytes());
    let span = vmax - vmin;
    for &v in &matrix.values {
        let norm = ((v - vmin) / span).clamp(0.0, 1.0);
        out.push((norm * 255.0).floor() as u8);
    }
    out
}

/// CSV form of a matrix: `#`-prefixed metadata lines, then a header row
/// naming the columns, then one row per step (or step pair). Float values
/// print in Rust's shortest round-trip form, so parsing the CSV recovers
/// them exactly.
pub fn matrix_to_csv(matrix: &SimilarityMatrix) -> String {
    let mut out = String::new();
    out.push_str(&format!("# mode: {}\n", matrix.mode));
    if let Some(layer) = matrix.layer {
        out.push_str(&format!("# layer: {layer}\n"));
    }
    out.push_str(&format!("# sublayer: {}\n", matrix.sublayer));
    out.push_str(&format!("# branch: {}\n", matrix.branch));
    out.push_str(&format!("# policy: {}\n", matrix.policy));
    out.push_str(&format!("# cache_point: {}\n", matrix.cache_point));
    out.push_str(&format!("# degenerate_count: {}\n", matrix.degenerate_count));
    match matrix.mode {
        MatrixMode::Consecutive => {
            out.push_str("step");
            for k in 0..matrix.cols {
                out.push_str(&format!(",layer_{k}"));
            }
            out.push('\n');
            for r in 0..matrix.rows {
                out.push_str(&r.to_string());
                for c in 0..matrix.cols {
                    out.push_str(&format!(",{}", matrix.get(r, c)));
                }
                out.push('\n');
            }
        }
        MatrixMode::StepPairs => {
            out.push_str("step");
            for c in 0..matrix.cols {
                out.push_str(&format!(",step_{c}"));
            }
            out.push('\n');
            for r in 0..matrix.rows {
                out.push_str(&r.to_string());
                for c in 0..matrix.cols {
                    out.push_str(&format!(",{}", matrix.get(r, c)));
                }
                out.push('\n');
            }
        }
    }
    out
}
