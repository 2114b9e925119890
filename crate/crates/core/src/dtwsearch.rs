//! Subsequence DTW matching on cosine distances.
//!
//! The path consumes every query frame, may start and end at any utterance
//! column, and moves with steps (1,1), (2,1) and (1,2) in (query, utterance)
//! coordinates. Its cost is the mean distance over visited cells. The mean
//! is minimized exactly by Dinkelbach iteration: each round solves an
//! additive DP on `d - lambda` and moves `lambda` to the mean of the path it
//! found, which strictly decreases until optimal.

use rayon::prelude::*;

use crate::error::{QbeError, Result};
use crate::features::FeatureMatrix;
use crate::scores::{ScoreRecord, SENTINEL};
use crate::simimage::cosine_similarity_matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(QbeError::Data(format!("invalid {rows}x{cols} distance matrix")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(QbeError::Numeric("non-finite distance".into()));
        }
        Ok(Self { rows, cols, values })
    }

    /// `1 - cosine similarity`.
    pub fn cosine(query: &FeatureMatrix, utterance: &FeatureMatrix) -> Result<Self> {
        let s = cosine_similarity_matrix(query, utterance)?;
        let values = s.values().iter().map(|v| 1.0 - f64::from(*v)).collect();
        Self::new(query.frames(), utterance.frames(), values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtwHypothesis {
    /// Inclusive utterance span.
    pub start: usize,
    pub end: usize,
    pub cost: f64,
    /// Cells on the path.
    pub length: usize,
}

impl DtwHypothesis {
    pub fn score(&self) -> f64 {
        -self.cost
    }

    pub fn span(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Predecessor offsets in preference order for ties.
const STEPS: [(usize, usize); 3] = [(1, 1), (2, 1), (1, 2)];

#[derive(Clone, Copy)]
struct Cell {
    acc: f64,
    sum: f64,
    len: u32,
    start: u32,
}

/// Best path for the additive objective `sum(d - lambda)`.
fn additive_best(d: &DistanceMatrix, lambda: f64, cells: &mut Vec<Cell>) -> Option<DtwHypothesis> {
    let (m, n) = (d.rows, d.cols);
    let dead = Cell {
        acc: f64::INFINITY,
        sum: 0.0,
        len: 0,
        start: 0,
    };
    cells.clear();
    cells.resize(m * n, dead);
    for j in 0..n {
        let v = d.get(0, j);
        cells[j] = Cell {
            acc: v - lambda,
            sum: v,
            len: 1,
            start: j as u32,
        };
    }
    for i in 1..m {
        for j in 1..n {
            let mut best: Option<Cell> = None;
            for (di, dj) in STEPS {
                if i < di || j < dj {
                    continue;
                }
                let p = cells[(i - di) * n + (j - dj)];
                if p.acc.is_finite() && best.map_or(true, |b| p.acc < b.acc) {
                    best = Some(p);
                }
            }
            if let Some(p) = best {
                let v = d.get(i, j);
                cells[i * n + j] = Cell {
                    acc: p.acc + (v - lambda),
                    sum: p.sum + v,
                    len: p.len + 1,
                    start: p.start,
                };
            }
        }
    }
    let last = &cells[(m - 1) * n..];
    let (end, cell) = last
        .iter()
        .enumerate()
        .filter(|(_, c)| c.acc.is_finite())
        .fold(None::<(usize, Cell)>, |best, (j, c)| match best {
            Some((_, b)) if b.acc <= c.acc => best,
            _ => Some((j, *c)),
        })?;
    Some(DtwHypothesis {
        start: cell.start as usize,
        end,
        cost: cell.sum / f64::from(cell.len),
        length: cell.len as usize,
    })
}

/// Globally minimal mean-cost path, or `None` when no legal path exists
/// (utterance too short for the slope bound).
pub fn subsequence_dtw_on(d: &DistanceMatrix) -> Option<DtwHypothesis> {
    let mut cells = Vec::new();
    let mut best = additive_best(d, 0.0, &mut cells)?;
    for _ in 0..200 {
        let next = additive_best(d, best.cost, &mut cells).expect("a path exists");
        if next.cost < best.cost {
            best = next;
        } else {
            break;
        }
    }
    Some(best)
}

pub fn subsequence_dtw(query: &FeatureMatrix, utterance: &FeatureMatrix) -> Result<Option<DtwHypothesis>> {
    if query.frames() == 0 || utterance.frames() == 0 {
        return Err(QbeError::Data("empty feature matrix in DTW".into()));
    }
    Ok(subsequence_dtw_on(&DistanceMatrix::cosine(query, utterance)?))
}

/// Keeps hypotheses spanning at least half the query length.
pub fn length_filter(h: &DtwHypothesis, query_frames: usize) -> bool {
    2 * h.span() >= query_frames
}

/// A query ready for search: a single example or an averaged template.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryTemplate(pub FeatureMatrix);

/// Full DTW (steps (1,0), (0,1), (1,1)) alignment path from `a` to `b`.
fn full_alignment(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<Vec<(usize, usize)>> {
    let d = DistanceMatrix::cosine(a, b)?;
    let (m, n) = (d.rows, d.cols);
    let mut acc = vec![f64::INFINITY; m * n];
    for i in 0..m {
        for j in 0..n {
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * n + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * n + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * n + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * n + j] = prev + d.get(i, j);
        }
    }
    let (mut i, mut j) = (m - 1, n - 1);
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * n + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * n + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * n + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(path)
}

/// Averages several examples onto the longest one (first on ties).
pub fn average_template(examples: &[FeatureMatrix]) -> Result<QueryTemplate> {
    let reference_idx = examples
        .iter()
        .enumerate()
        .fold(None::<(usize, usize)>, |best, (i, e)| match best {
            Some((_, f)) if f >= e.frames() => best,
            _ => Some((i, e.frames())),
        })
        .ok_or_else(|| QbeError::Data("no query examples to average".into()))?
        .0;
    let reference = &examples[reference_idx];
    if examples.len() == 1 {
        return Ok(QueryTemplate(reference.clone()));
    }
    let dim = reference.dim();
    let mut sums: Vec<f64> = reference.values().iter().map(|v| f64::from(*v)).collect();
    let mut counts = vec![1usize; reference.frames()];
    for (k, ex) in examples.iter().enumerate() {
        if k == reference_idx {
            continue;
        }
        if ex.dim() != dim {
            return Err(QbeError::DimMismatch {
                left: dim,
                right: ex.dim(),
            });
        }
        if ex.frames() == 0 {
            continue;
        }
        for (r, c) in full_alignment(reference, ex)? {
            counts[r] += 1;
            for (s, v) in sums[r * dim..(r + 1) * dim].iter_mut().zip(ex.row(c)) {
                *s += f64::from(*v);
            }
        }
    }
    let values = sums
        .chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(row, &c)| row.iter().map(move |s| (s / c as f64) as f32))
        .collect();
    Ok(QueryTemplate(FeatureMatrix::new(
        reference.frames(),
        dim,
        values,
        reference.kind,
    )?))
}

/// Search-side view of a file after speech activity detection.
#[derive(Clone, Debug)]
pub struct SearchItem {
    pub id: String,
    pub features: FeatureMatrix,
    /// Too few speech frames survived; scored with the sentinel.
    pub short: bool,
}

/// Scores every (query, utterance) pair, queries outermost.
pub fn search(queries: &[SearchItem], utterances: &[SearchItem]) -> Result<Vec<ScoreRecord>> {
    let pairs: Vec<(usize, usize)> = (0..queries.len())
        .flat_map(|q| (0..utterances.len()).map(move |u| (q, u)))
        .collect();
    pairs
        .par_iter()
        .map(|&(qi, ui)| {
            let (q, u) = (&queries[qi], &utterances[ui]);
            let mut rec = ScoreRecord::unspanned(&q.id, &u.id, SENTINEL);
            if q.short || u.short {
                return Ok(rec);
            }
            if let Some(h) = subsequence_dtw(&q.features, &u.features)? {
                if length_filter(&h, q.features.frames()) {
                    rec.score = h.score();
                    rec.start = h.start as i64;
                    rec.end = h.end as i64;
                }
            }
            Ok(rec)
        })
        .collect()
}
