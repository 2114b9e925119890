//! Score files and ground truth shared by all matchers.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{QbeError, Result};
use crate::util::{fmt_f64, parse_f64};

/// Worst possible score, given to discarded hypotheses and short files.
pub const SENTINEL: f64 = f64::NEG_INFINITY;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub query: String,
    pub utterance: String,
    pub score: f64,
    /// Matched utterance span for DTW, `-1` otherwise.
    pub start: i64,
    pub end: i64,
}

impl ScoreRecord {
    pub fn unspanned(query: &str, utterance: &str, score: f64) -> Self {
        Self {
            query: query.to_string(),
            utterance: utterance.to_string(),
            score,
            start: -1,
            end: -1,
        }
    }
}

pub fn write_scores<W: Write>(mut w: W, records: &[ScoreRecord]) -> Result<()> {
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.query,
            r.utterance,
            fmt_f64(r.score),
            r.start,
            r.end
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores<R: BufRead>(r: R) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || QbeError::Data(format!("score file line {}: malformed `{line}`", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 && f.len() != 3 {
            return Err(bad());
        }
        let score = parse_f64(f[2]).ok_or_else(bad)?;
        let (start, end) = if f.len() == 5 {
            (f[3].parse().map_err(|_| bad())?, f[4].parse().map_err(|_| bad())?)
        } else {
            (-1, -1)
        };
        out.push(ScoreRecord {
            query: f[0].to_string(),
            utterance: f[1].to_string(),
            score,
            start,
            end,
        });
    }
    Ok(out)
}

pub fn save_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    write_scores(BufWriter::new(File::create(path)?), records)
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let file = File::open(path)
        .map_err(|e| QbeError::Data(format!("cannot open {}: {e}", path.display())))?;
    read_scores(BufReader::new(file))
}

/// Set of (query, utterance) pairs in which the query occurs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    rows: Vec<(String, String, bool)>,
    positive: HashSet<(String, String)>,
}

impl GroundTruth {
    pub fn from_rows(rows: Vec<(String, String, bool)>) -> Self {
        let positive = rows
            .iter()
            .filter(|r| r.2)
            .map(|(q, u, _)| (q.clone(), u.clone()))
            .collect();
        Self { rows, positive }
    }

    pub fn rows(&self) -> &[(String, String, bool)] {
        &self.rows
    }

    pub fn is_positive(&self, query: &str, utterance: &str) -> bool {
        self.positive.contains(&(query.to_string(), utterance.to_string()))
    }

    /// Row lookup; `None` for pairs that are not trials.
    pub fn index(&self) -> HashMap<(&str, &str), bool> {
        self.rows
            .iter()
            .map(|(q, u, t)| ((q.as_str(), u.as_str()), *t))
            .collect()
    }

    /// Restricted to the given queries.
    pub fn for_queries(&self, queries: &HashSet<String>) -> GroundTruth {
        GroundTruth::from_rows(self.rows.iter().filter(|r| queries.contains(&r.0)).cloned().collect())
    }
}

pub fn write_ground_truth<W: Write>(mut w: W, gt: &GroundTruth) -> Result<()> {
    for (q, u, t) in &gt.rows {
        writeln!(w, "{q}\t{u}\t{}", u8::from(*t))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(r: R) -> Result<GroundTruth> {
    let mut rows = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let truth = match f.as_slice() {
            [_, _, "1"] => true,
            [_, _, "0"] => false,
            _ => {
                return Err(QbeError::Data(format!(
                    "ground truth line {}: malformed `{line}`",
                    n + 1
                )))
            }
        };
        rows.push((f[0].to_string(), f[1].to_string(), truth));
    }
    Ok(GroundTruth::from_rows(rows))
}

pub fn save_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_ground_truth(BufWriter::new(File::create(path)?), gt)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let file = File::open(path)
        .map_err(|e| QbeError::Data(format!("cannot open {}: {e}", path.display())))?;
    read_ground_truth(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_round_trip_keeps_sentinel() {
        let recs = vec![
            ScoreRecord {
                query: "q1".into(),
                utterance: "u1".into(),
                score: -0.123456789012345,
                start: 3,
                end: 17,
            },
            ScoreRecord::unspanned("q1", "u2", SENTINEL),
        ];
        let mut buf = Vec::new();
        write_scores(&mut buf, &recs).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().contains("\t-inf\t-1\t-1"));
        assert_eq!(read_scores(buf.as_slice()).unwrap(), recs);
        assert!(read_scores(&b"q\tu\tnan\n"[..]).is_err());
    }

    #[test]
    fn ground_truth_parsing() {
        let gt = read_ground_truth(&b"q\ta\t1\nq\tb\t0\n"[..]).unwrap();
        assert!(gt.is_positive("q", "a"));
        assert!(!gt.is_positive("q", "b"));
        assert!(read_ground_truth(&b"q\ta\tyes\n"[..]).is_err());
    }
}
