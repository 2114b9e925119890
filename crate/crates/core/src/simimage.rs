//! Query-by-utterance cosine similarity images.
//!
//! The `*_core` functions are generic over [`Scalar`] and are shared with the
//! differentiable end-to-end path, so both produce identical values.

use std::io::Write;

use qbe_gradkit::Scalar;

use crate::error::{QbeError, Result};
use crate::features::FeatureMatrix;

/// Default network input size: query frames by utterance frames.
pub const DEFAULT_ROWS: usize = 100;
pub const DEFAULT_COLS: usize = 800;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(QbeError::Data(format!(
                "{rows}x{cols} similarity matrix cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols + j]
    }
}

/// Row norms and unit rows (zero rows stay zero).
pub fn normalize_rows<S: Scalar>(x: &[S], rows: usize, dim: usize) -> (Vec<S>, Vec<f64>) {
    let mut unit = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(rows);
    for r in x.chunks_exact(dim).take(rows) {
        let n = r.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
        norms.push(n);
        if n > 0.0 {
            unit.extend(r.iter().map(|v| S::from_f64(v.to_f64() / n)));
        } else {
            unit.extend(std::iter::repeat(S::ZERO).take(dim));
        }
    }
    (unit, norms)
}

/// `s[i][j] = <q_i, t_j> / (|q_i| |t_j|)` from unit rows, clamped to [-1, 1].
pub fn cosine_core<S: Scalar>(q_unit: &[S], m: usize, t_unit: &[S], n: usize, dim: usize) -> Vec<S> {
    let mut s = vec![S::ZERO; m * n];
    S::gemm(false, true, m, n, dim, S::ONE, q_unit, t_unit, S::ZERO, &mut s);
    for v in &mut s {
        *v = S::from_f64(v.to_f64().clamp(-1.0, 1.0));
    }
    s
}

/// Extremes of a similarity matrix: `(min, argmin, max, argmax)`, first
/// occurrence in row-major order.
pub fn extremes<S: Scalar>(s: &[S]) -> (f64, usize, f64, usize) {
    let (mut lo, mut lo_at, mut hi, mut hi_at) = (f64::INFINITY, 0, f64::NEG_INFINITY, 0);
    for (i, v) in s.iter().enumerate() {
        let v = v.to_f64();
        if v < lo {
            lo = v;
            lo_at = i;
        }
        if v > hi {
            hi = v;
            hi_at = i;
        }
    }
    (lo, lo_at, hi, hi_at)
}

/// Affine map of `[min, max]` onto `[-1, 1]`; a constant matrix maps to zeros.
pub fn range_normalize_core<S: Scalar>(s: &[S]) -> Vec<S> {
    let (lo, _, hi, _) = extremes(s);
    if s.is_empty() || hi <= lo {
        return vec![S::ZERO; s.len()];
    }
    let range = hi - lo;
    s.iter()
        .map(|v| S::from_f64((-1.0 + 2.0 * (v.to_f64() - lo) / range).clamp(-1.0, 1.0)))
        .collect()
}

/// Source index for each target position: evenly spaced when downsampling,
/// identity followed by padding (`None`) otherwise.
pub fn resample_indices(source: usize, target: usize) -> Vec<Option<usize>> {
    (0..target)
        .map(|k| {
            if source > target {
                Some(k * source / target)
            } else if k < source {
                Some(k)
            } else {
                None
            }
        })
        .collect()
}

/// Fixed-size image; padded cells (bottom rows, right columns) take the
/// matrix minimum.
pub fn resize_core<S: Scalar>(
    s: &[S],
    rows: usize,
    cols: usize,
    target_rows: usize,
    target_cols: usize,
) -> Vec<S> {
    let pad = if s.is_empty() { S::ZERO } else { S::from_f64(extremes(s).0) };
    let ri = resample_indices(rows, target_rows);
    let ci = resample_indices(cols, target_cols);
    let mut out = Vec::with_capacity(target_rows * target_cols);
    for r in &ri {
        for c in &ci {
            out.push(match (r, c) {
                (Some(r), Some(c)) => s[r * cols + c],
                _ => pad,
            });
        }
    }
    out
}

pub fn cosine_similarity_matrix(q: &FeatureMatrix, t: &FeatureMatrix) -> Result<SimilarityMatrix> {
    if q.dim() != t.dim() {
        return Err(QbeError::DimMismatch {
            left: q.dim(),
            right: t.dim(),
        });
    }
    let (qu, _) = normalize_rows(q.values(), q.frames(), q.dim());
    let (tu, _) = normalize_rows(t.values(), t.frames(), t.dim());
    let values = cosine_core(&qu, q.frames(), &tu, t.frames(), q.dim());
    SimilarityMatrix::new(q.frames(), t.frames(), values)
}

pub fn range_normalize(s: &SimilarityMatrix) -> SimilarityMatrix {
    SimilarityMatrix {
        rows: s.rows,
        cols: s.cols,
        values: range_normalize_core(&s.values),
    }
}

pub fn resize_to_fixed(s: &SimilarityMatrix, target_rows: usize, target_cols: usize) -> SimilarityMatrix {
    SimilarityMatrix {
        rows: target_rows,
        cols: target_cols,
        values: resize_core(&s.values, s.rows, s.cols, target_rows, target_cols),
    }
}

/// Similarity, range normalization and resizing in one call.
pub fn similarity_image(
    q: &FeatureMatrix,
    t: &FeatureMatrix,
    target_rows: usize,
    target_cols: usize,
) -> Result<SimilarityMatrix> {
    let s = cosine_similarity_matrix(q, t)?;
    Ok(resize_to_fixed(&range_normalize(&s), target_rows, target_cols))
}

/// 8-bit binary PGM, `-1` black to `1` white.
pub fn write_pgm<W: Write>(mut w: W, s: &SimilarityMatrix) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", s.cols, s.rows)?;
    let bytes: Vec<u8> = s
        .values
        .iter()
        .map(|v| (127.5 * (f64::from(*v).clamp(-1.0, 1.0) + 1.0)).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}
