//! Detection metrics: per-query normalization, TWV sweep, calibrated cross
//! entropy and a paired significance test.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write;

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{QbeError, Result};
use crate::scores::{GroundTruth, ScoreRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub query: String,
    pub utterance: String,
    pub truth: bool,
    pub raw: f64,
    /// Normalized score; equals `raw` until [`znorm_per_query`] runs.
    pub norm: f64,
}

/// Joins scores with ground truth; every ground-truth pair must be scored
/// exactly once and nothing else may be.
pub fn build_trials(scores: &[ScoreRecord], gt: &GroundTruth) -> Result<Vec<Trial>> {
    let index = gt.index();
    let mut seen = HashSet::with_capacity(scores.len());
    let mut out = Vec::with_capacity(scores.len());
    for s in scores {
        let key = (s.query.as_str(), s.utterance.as_str());
        let truth = *index.get(&key).ok_or_else(|| {
            QbeError::Data(format!("score for unknown trial ({}, {})", s.query, s.utterance))
        })?;
        if !seen.insert(key) {
            return Err(QbeError::Data(format!("duplicate score for ({}, {})", s.query, s.utterance)));
        }
        if s.score.is_nan() || s.score == f64::INFINITY {
            return Err(QbeError::Data(format!("invalid score for ({}, {})", s.query, s.utterance)));
        }
        out.push(Trial {
            query: s.query.clone(),
            utterance: s.utterance.clone(),
            truth,
            raw: s.score,
            norm: s.score,
        });
    }
    if out.len() != gt.rows().len() {
        return Err(QbeError::Data(format!(
            "{} of {} trials are unscored",
            gt.rows().len() - out.len(),
            gt.rows().len()
        )));
    }
    Ok(out)
}

/// Zero mean, unit (population) variance per query over finite scores.
/// Queries with fewer than two finite scores pass through unchanged.
pub fn znorm_per_query(trials: &mut [Trial]) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in trials.iter().enumerate() {
        if t.raw.is_finite() {
            groups.entry(t.query.as_str()).or_default().push(i);
        }
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    for t in trials.iter_mut() {
        t.norm = t.raw;
    }
    for idx in groups {
        if idx.len() < 2 {
            continue;
        }
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| trials[i].raw).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (trials[i].raw - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-12);
        for i in idx {
            trials[i].norm = (trials[i].raw - mean) / std;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwvConfig {
    pub cost_fa: f64,
    pub cost_miss: f64,
    /// `None` uses the empirical target proportion.
    pub prior: Option<f64>,
}

impl Default for TwvConfig {
    fn default() -> Self {
        Self {
            cost_fa: 1.0,
            cost_miss: 100.0,
            prior: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwvResult {
    pub mtwv: f64,
    pub theta_star: f64,
    pub beta: f64,
    /// Ordered by increasing threshold.
    pub det: Vec<DetPoint>,
}

fn class_counts(trials: &[Trial]) -> Result<(usize, usize)> {
    let targets = trials.iter().filter(|t| t.truth).count();
    let nontargets = trials.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(QbeError::Data(format!(
            "degenerate trial set: {targets} targets, {nontargets} non-targets"
        )));
    }
    Ok((targets, nontargets))
}

fn resolve_prior(prior: Option<f64>, targets: usize, total: usize) -> Result<f64> {
    let p = prior.unwrap_or(targets as f64 / total as f64);
    if !(p > 0.0 && p < 1.0) {
        return Err(QbeError::Config(format!("target prior {p} outside (0, 1)")));
    }
    Ok(p)
}

/// Sweeps thresholds at score midpoints plus both infinities. A trial is
/// detected when its score exceeds the threshold, so sentinels never are.
pub fn twv_sweep(trials: &[Trial], cfg: &TwvConfig) -> Result<TwvResult> {
    if cfg.cost_fa <= 0.0 || cfg.cost_miss <= 0.0 {
        return Err(QbeError::Config("TWV costs must be positive".into()));
    }
    let (nt, nn) = class_counts(trials)?;
    let prior = resolve_prior(cfg.prior, nt, trials.len())?;
    let beta = cfg.cost_fa / cfg.cost_miss * (1.0 / prior - 1.0);

    let mut finite: Vec<(f64, bool)> = trials
        .iter()
        .filter(|t| t.norm.is_finite())
        .map(|t| (t.norm, t.truth))
        .collect();
    finite.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Start below everything: every finite score is detected.
    let mut detected_t = finite.iter().filter(|s| s.1).count();
    let mut detected_n = finite.len() - detected_t;
    let point = |th: f64, dt: usize, dn: usize| DetPoint {
        threshold: th,
        p_miss: 1.0 - dt as f64 / nt as f64,
        p_fa: dn as f64 / nn as f64,
    };
    let mut det = vec![point(f64::NEG_INFINITY, detected_t, detected_n)];
    let mut i = 0;
    while i < finite.len() {
        let v = finite[i].0;
        while i < finite.len() && finite[i].0 == v {
            if finite[i].1 {
                detected_t -= 1;
            } else {
                detected_n -= 1;
            }
            i += 1;
        }
        let th = if i < finite.len() {
            v + (finite[i].0 - v) / 2.0
        } else {
            f64::INFINITY
        };
        det.push(point(th, detected_t, detected_n));
    }
    let (mut mtwv, mut theta_star) = (f64::NEG_INFINITY, f64::INFINITY);
    for p in &det {
        let twv = 1.0 - p.p_miss - beta * p.p_fa;
        if twv > mtwv {
            mtwv = twv;
            theta_star = p.threshold;
        }
    }
    Ok(TwvResult {
        mtwv,
        theta_star,
        beta,
        det,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CnxeAveraging {
    /// One pool of trials.
    #[default]
    Pooled,
    /// Mean of per-query values under one shared calibration.
    PerQuery,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CnxeConfig {
    pub prior: Option<f64>,
    pub averaging: CnxeAveraging,
}

impl Default for CnxeConfig {
    fn default() -> Self {
        Self {
            prior: None,
            averaging: CnxeAveraging::Pooled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CnxeResult {
    pub min_cnxe: f64,
    pub slope: f64,
    pub offset: f64,
    /// False when coordinate descent hit its round limit.
    pub converged: bool,
}

/// Pre-calibration value given to sentinel scores.
pub const SENTINEL_LLR: f64 = -30.0;
const MAX_SLOPE: f64 = 1e6;
const MAX_NEWTON_STEPS: usize = 200;

/// Calibration objective on standardized scores.
struct CnxeObjective {
    groups: Vec<Group>,
    logit_prior: f64,
    prior: f64,
    entropy: f64,
}

struct Group {
    targets: Vec<f64>,
    nontargets: Vec<f64>,
}

/// `-log2 sigmoid(x)` without overflow.
fn neg_log2_sigmoid(x: f64) -> f64 {
    let nats = if x >= 0.0 { (-x).exp().ln_1p() } else { -x + x.exp().ln_1p() };
    nats / std::f64::consts::LN_2
}

impl CnxeObjective {
    fn group_cxe(&self, g: &Group, a: f64, b: f64) -> f64 {
        let tar = if g.targets.is_empty() {
            0.0
        } else {
            g.targets
                .iter()
                .map(|s| neg_log2_sigmoid(a * s + b + self.logit_prior))
                .sum::<f64>()
                / g.targets.len() as f64
        };
        let non = if g.nontargets.is_empty() {
            0.0
        } else {
            g.nontargets
                .iter()
                .map(|s| neg_log2_sigmoid(-(a * s + b + self.logit_prior)))
                .sum::<f64>()
                / g.nontargets.len() as f64
        };
        (self.prior * tar + (1.0 - self.prior) * non) / self.entropy
    }

    /// Gradient `[da, db]` and Hessian `[aa, ab, bb]` of [`Self::eval`].
    fn derivatives(&self, a: f64, b: f64) -> ([f64; 2], [f64; 3]) {
        let (mut g, mut h) = ([0.0; 2], [0.0; 3]);
        let scale = 1.0 / (self.entropy * std::f64::consts::LN_2 * self.groups.len() as f64);
        let mut add = |scores: &[f64], weight: f64, sign: f64| {
            if scores.is_empty() {
                return;
            }
            let w = weight * scale / scores.len() as f64;
            for &s in scores {
                let z = a * s + b + self.logit_prior;
                let p = 1.0 / (1.0 + (sign * z).exp());
                // d/dz of ln(1 + exp(-sign z)) is -sign * p.
                let dz = -sign * p * w;
                let hz = p * (1.0 - p) * w;
                g[0] += dz * s;
                g[1] += dz;
                h[0] += hz * s * s;
                h[1] += hz * s;
                h[2] += hz;
            }
        };
        for grp in &self.groups {
            add(&grp.targets, self.prior, 1.0);
            add(&grp.nontargets, 1.0 - self.prior, -1.0);
        }
        (g, h)
    }

    fn eval(&self, a: f64, b: f64) -> f64 {
        self.groups.iter().map(|g| self.group_cxe(g, a, b)).sum::<f64>() / self.groups.len() as f64
    }
}

fn standardized(trials: &[Trial]) -> Vec<f64> {
    let finite: Vec<f64> = trials.iter().map(|t| t.norm).filter(|s| s.is_finite()).collect();
    let n = finite.len().max(1) as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let std = (finite.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    trials
        .iter()
        .map(|t| {
            if t.norm.is_finite() {
                (t.norm - mean) / std
            } else {
                SENTINEL_LLR
            }
        })
        .collect()
}

fn objective(trials: &[Trial], cfg: &CnxeConfig) -> Result<CnxeObjective> {
    let (nt, _) = class_counts(trials)?;
    let prior = resolve_prior(cfg.prior, nt, trials.len())?;
    let scores = standardized(trials);
    let mut groups: BTreeMap<&str, Group> = BTreeMap::new();
    for (t, s) in trials.iter().zip(scores) {
        let key = match cfg.averaging {
            CnxeAveraging::Pooled => "",
            CnxeAveraging::PerQuery => t.query.as_str(),
        };
        let g = groups.entry(key).or_insert_with(|| Group {
            targets: Vec::new(),
            nontargets: Vec::new(),
        });
        if t.truth {
            g.targets.push(s);
        } else {
            g.nontargets.push(s);
        }
    }
    Ok(CnxeObjective {
        groups: groups.into_values().collect(),
        logit_prior: (prior / (1.0 - prior)).ln(),
        prior,
        entropy: -prior * prior.log2() - (1.0 - prior) * (1.0 - prior).log2(),
    })
}

/// Normalized cross entropy of `llr = slope * s + offset` on standardized
/// scores (sentinels at [`SENTINEL_LLR`]).
pub fn cnxe_at(trials: &[Trial], cfg: &CnxeConfig, slope: f64, offset: f64) -> Result<f64> {
    Ok(objective(trials, cfg)?.eval(slope, offset))
}

/// Minimum over affine calibrations with non-negative slope: damped Newton
/// on the convex objective, holding the slope at zero when the gradient
/// pushes it negative.
pub fn min_cnxe(trials: &[Trial], cfg: &CnxeConfig) -> Result<CnxeResult> {
    let obj = objective(trials, cfg)?;
    let (mut a, mut b) = (0.0f64, 0.0f64);
    let mut value = obj.eval(a, b);
    let mut converged = false;
    for _ in 0..MAX_NEWTON_STEPS {
        let (g, h) = obj.derivatives(a, b);
        let pinned = a <= 0.0 && g[0] >= 0.0;
        let (da, db) = if pinned {
            (0.0, -g[1] / h[2].max(1e-300))
        } else {
            let det = h[0] * h[2] - h[1] * h[1];
            if det > 1e-300 {
                ((-h[2] * g[0] + h[1] * g[1]) / det, (h[1] * g[0] - h[0] * g[1]) / det)
            } else {
                (-g[0], -g[1])
            }
        };
        let slope_gain = if pinned { g[1] * db } else { g[0] * da + g[1] * db };
        if !(slope_gain < 0.0) || -slope_gain < 1e-14 {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let na = (a + t * da).clamp(0.0, MAX_SLOPE);
            let nb = b + t * db;
            let v = obj.eval(na, nb);
            if v <= value + 1e-4 * t * slope_gain {
                accepted = Some((na, nb, v));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((na, nb, v)) => {
                let gain = value - v;
                a = na;
                b = nb;
                value = v;
                if gain < 1e-15 {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!("calibration did not converge; reporting last iterate");
    }
    Ok(CnxeResult {
        min_cnxe: value,
        slope: a,
        offset: b,
        converged,
    })
}

/// One-tailed paired t-test of `mean(a - b) > 0`.
pub fn paired_ttest_onetailed(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(QbeError::Data(format!(
            "paired t-test needs >= 2 equal-length samples, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Ok(if mean > 0.0 {
            0.0
        } else if mean < 0.0 {
            1.0
        } else {
            0.5
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| QbeError::Numeric(e.to_string()))?;
    Ok(1.0 - dist.cdf(t))
}

/// Pairs per-query values by key before testing.
pub fn paired_ttest_by_key(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> Result<f64> {
    let mut keys: Vec<&String> = a.keys().filter(|k| b.contains_key(*k)).collect();
    keys.sort();
    let xa: Vec<f64> = keys.iter().map(|k| a[*k]).collect();
    let xb: Vec<f64> = keys.iter().map(|k| b[*k]).collect();
    paired_ttest_onetailed(&xa, &xb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub min_cnxe: f64,
    pub mtwv: f64,
    pub theta_star: f64,
    pub trials: usize,
    pub targets: usize,
    pub nontargets: usize,
    pub cnxe_converged: bool,
}

/// Normalizes per query, then computes both metrics.
pub fn evaluate(
    mut trials: Vec<Trial>,
    twv: &TwvConfig,
    cnxe: &CnxeConfig,
) -> Result<(EvalReport, TwvResult)> {
    znorm_per_query(&mut trials);
    let sweep = twv_sweep(&trials, twv)?;
    let c = min_cnxe(&trials, cnxe)?;
    let targets = trials.iter().filter(|t| t.truth).count();
    Ok((
        EvalReport {
            min_cnxe: c.min_cnxe,
            mtwv: sweep.mtwv,
            theta_star: sweep.theta_star,
            trials: trials.len(),
            targets,
            nontargets: trials.len() - targets,
            cnxe_converged: c.converged,
        },
        sweep,
    ))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "min_cnxe = {:.6}", self.min_cnxe);
        let _ = writeln!(s, "mtwv = {:.6}", self.mtwv);
        let _ = writeln!(s, "theta_star = {}", crate::util::fmt_f64(self.theta_star));
        let _ = writeln!(s, "trials = {}", self.trials);
        let _ = writeln!(s, "targets = {}", self.targets);
        let _ = writeln!(s, "nontargets = {}", self.nontargets);
        let _ = writeln!(s, "cnxe_converged = {}", self.cnxe_converged);
        s
    }
}

pub fn write_det_csv<W: Write>(mut w: W, det: &[DetPoint]) -> Result<()> {
    writeln!(w, "threshold,p_miss,p_fa")?;
    for p in det {
        writeln!(w, "{},{},{}", crate::util::fmt_f64(p.threshold), p.p_miss, p.p_fa)?;
    }
    Ok(())
}

/// DET curves on normal-deviate axes, one polyline per system.
pub fn det_svg(curves: &[(String, Vec<DetPoint>)]) -> String {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let (lo, hi) = (1e-4, 1.0 - 1e-4);
    let probit = |p: f64| normal.inverse_cdf(p.clamp(lo, hi));
    let span = probit(hi) - probit(lo);
    let (w, h, margin) = (480.0, 480.0, 40.0);
    let x = |p: f64| margin + (probit(p) - probit(lo)) / span * (w - 2.0 * margin);
    let y = |p: f64| h - margin - (probit(p) - probit(lo)) / span * (h - 2.0 * margin);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(
        s,
        r#"<rect x="{margin}" y="{margin}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * margin,
        h - 2.0 * margin
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">P(false alarm)</text>"#, w / 2.0 - 40.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="4" y="{}" font-size="12">P(miss)</text>"#, margin - 10.0);
    for (k, (name, det)) in curves.iter().enumerate() {
        let color = colors[k % colors.len()];
        let pts: Vec<String> = det
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.p_fa), y(p.p_miss)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name}</text>"#,
            w - margin - 120.0,
            margin + 16.0 * (k as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(q: &str, truth: bool, score: f64) -> Trial {
        Trial {
            query: q.into(),
            utterance: format!("u{score}"),
            truth,
            raw: score,
            norm: score,
        }
    }

    #[test]
    fn znorm_examples() {
        let mut t = vec![trial("q", false, 1.0), trial("q", false, 2.0), trial("q", true, 3.0)];
        znorm_per_query(&mut t);
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (t, e) in t.iter().zip(expect) {
            assert!((t.norm - e).abs() < 1e-12);
        }
        let mut same = vec![trial("q", false, 0.5), trial("q", true, 0.5), trial("q", false, f64::NEG_INFINITY)];
        znorm_per_query(&mut same);
        assert_eq!(same[0].norm, 0.0);
        assert_eq!(same[1].norm, 0.0);
        assert_eq!(same[2].norm, f64::NEG_INFINITY);
    }

    #[test]
    fn hand_twv_case() {
        let t = vec![
            trial("q", true, 0.9),
            trial("q", false, 0.1),
            trial("q", false, 0.8),
            trial("q", false, 0.2),
        ];
        let r = twv_sweep(&t, &TwvConfig { prior: Some(0.25), ..TwvConfig::default() }).unwrap();
        assert!((r.beta - 0.03).abs() < 1e-12);
        assert_eq!(r.mtwv, 1.0);
        assert!((r.theta_star - 0.85).abs() < 1e-12);
        assert_eq!(r.det.len(), 5);
    }

    #[test]
    fn uninformative_twv_is_zero() {
        let mut t = vec![trial("q", true, 500.5)];
        t.extend((0..999).map(|i| trial("q", false, i as f64)));
        let r = twv_sweep(&t, &TwvConfig::default()).unwrap();
        assert!(r.mtwv.abs() < 1e-12);
        assert!(twv_sweep(&t[1..], &TwvConfig::default()).is_err());
    }

    #[test]
    fn prior_only_calibration_is_one() {
        let t = vec![trial("q", true, 1.0), trial("q", false, 0.2), trial("q", false, -0.4)];
        let v = cnxe_at(&t, &CnxeConfig::default(), 0.0, 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ttest_conventions() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(paired_ttest_onetailed(&a, &a).unwrap(), 0.5);
        let b = [0.0, 1.001, 1.999];
        let p = paired_ttest_onetailed(&a, &b).unwrap();
        assert!(p < 0.01);
        let q = paired_ttest_onetailed(&b, &a).unwrap();
        assert!((p + q - 1.0).abs() < 1e-12);
        assert_eq!(paired_ttest_onetailed(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(paired_ttest_onetailed(&[1.0], &[0.0]).is_err());
    }
}
