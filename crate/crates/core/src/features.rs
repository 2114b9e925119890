//! Frame-level acoustic features: MFCC, deltas, context stacking and an
//! energy-based speech activity detector.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{QbeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FeatureKind {
    Raw = 0,
    Mfcc = 1,
    MfccContext = 2,
    Bottleneck = 3,
}

impl FeatureKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Raw),
            1 => Some(Self::Mfcc),
            2 => Some(Self::MfccContext),
            3 => Some(Self::Bottleneck),
            _ => None,
        }
    }
}

/// Time-major matrix of frame vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    values: Vec<f32>,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>, kind: FeatureKind) -> Result<Self> {
        if dim == 0 || values.len() != frames * dim {
            return Err(QbeError::Data(format!(
                "feature matrix {frames}x{dim} cannot hold {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(QbeError::Data(format!(
                "non-finite feature value at frame {}",
                i / dim
            )));
        }
        Ok(Self {
            frames,
            dim,
            values,
            kind,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], kind: FeatureKind) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(QbeError::Data("ragged feature rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat(), kind)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    /// New matrix holding the selected frames, in the given order.
    pub fn select(&self, frames: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(frames.len() * self.dim);
        for &t in frames {
            values.extend_from_slice(self.row(t));
        }
        FeatureMatrix {
            frames: frames.len(),
            dim: self.dim,
            values,
            kind: self.kind,
        }
    }
}

// ---------------------------------------------------------------- MFCC

#[derive(Clone, Debug, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub mel_filters: usize,
    pub ceps: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub preemphasis: f64,
    pub lifter: f64,
    /// Standard deviation of additive dither; 0 disables it.
    pub dither: f64,
    pub dither_seed: u64,
    pub energy_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            window: 200,
            hop: 80,
            fft_size: 256,
            mel_filters: 23,
            ceps: 13,
            low_hz: 20.0,
            high_hz: 4000.0,
            preemphasis: 0.97,
            lifter: 22.0,
            dither: 0.0,
            dither_seed: 0,
            energy_floor: 1e-10,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

/// Triangular filters over FFT bins `0..=fft_size/2`.
fn mel_bank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let bins = cfg.fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(cfg.high_hz));
    let centers: Vec<f64> = (0..cfg.mel_filters + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (cfg.mel_filters + 1) as f64)
        .collect();
    (0..cfg.mel_filters)
        .map(|f| {
            let (l, c, r) = (centers[f], centers[f + 1], centers[f + 2]);
            (0..bins)
                .map(|b| {
                    let hz = b as f64 * f64::from(cfg.sample_rate) / cfg.fft_size as f64;
                    let m = hz_to_mel(hz.max(1e-9));
                    if m <= l || m >= r {
                        0.0
                    } else if m <= c {
                        (m - l) / (c - l)
                    } else {
                        (r - m) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// 13 cepstra per frame (C0 included) from an 8 kHz waveform.
pub fn mfcc(samples: &[f32], cfg: &MfccConfig) -> Result<FeatureMatrix> {
    if cfg.window == 0 || cfg.hop == 0 || cfg.fft_size < cfg.window || cfg.ceps > cfg.mel_filters {
        return Err(QbeError::Config("inconsistent MFCC configuration".into()));
    }
    if samples.len() < cfg.window {
        return Err(QbeError::Data(format!(
            "waveform of {} samples is shorter than one {}-sample window",
            samples.len(),
            cfg.window
        )));
    }
    let frames = (samples.len() - cfg.window) / cfg.hop + 1;
    let hamming: Vec<f64> = (0..cfg.window)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (cfg.window - 1) as f64).cos())
        .collect();
    let bank = mel_bank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let nf = cfg.mel_filters as f64;
    let lifter: Vec<f64> = (0..cfg.ceps)
        .map(|k| {
            if cfg.lifter > 0.0 {
                1.0 + cfg.lifter / 2.0 * (PI * k as f64 / cfg.lifter).sin()
            } else {
                1.0
            }
        })
        .collect();

    let mut noise = crate::util::rng(cfg.dither_seed);
    let mut values = Vec::with_capacity(frames * cfg.ceps);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..frames {
        let frame = &samples[t * cfg.hop..t * cfg.hop + cfg.window];
        let mut x: Vec<f64> = frame.iter().map(|&s| f64::from(s)).collect();
        if cfg.dither > 0.0 {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, cfg.dither).expect("positive dither");
            for v in &mut x {
                *v += normal.sample(&mut noise);
            }
        }
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        for v in &mut x {
            *v -= mean;
        }
        for n in (1..x.len()).rev() {
            x[n] -= cfg.preemphasis * x[n - 1];
        }
        x[0] *= 1.0 - cfg.preemphasis;
        for (slot, (v, w)) in buf.iter_mut().zip(x.iter().zip(&hamming)) {
            *slot = Complex::new(v * w, 0.0);
        }
        for slot in buf.iter_mut().skip(cfg.window) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..cfg.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let log_mel: Vec<f64> = bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(cfg.energy_floor).ln()
            })
            .collect();
        for k in 0..cfg.ceps {
            let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            let c: f64 = log_mel
                .iter()
                .enumerate()
                .map(|(n, e)| e * (PI * k as f64 * (n as f64 + 0.5) / nf).cos())
                .sum();
            values.push((scale * c * lifter[k]) as f32);
        }
    }
    FeatureMatrix::new(frames, cfg.ceps, values, FeatureKind::Mfcc)
}

// ---------------------------------------------------------------- deltas

fn regression(f: &[f32], frames: usize, dim: usize) -> Vec<f32> {
    const WIN: isize = 2;
    let denom = 2.0 * (1..=WIN).map(|n| (n * n) as f64).sum::<f64>();
    let last = frames as isize - 1;
    let at = |t: isize, k: usize| f64::from(f[t.clamp(0, last) as usize * dim + k]);
    let mut out = Vec::with_capacity(frames * dim);
    for t in 0..frames as isize {
        for k in 0..dim {
            let num: f64 = (1..=WIN).map(|n| n as f64 * (at(t + n, k) - at(t - n, k))).sum();
            out.push((num / denom) as f32);
        }
    }
    out
}

/// Appends ±2-frame regression deltas and delta-deltas (edges replicated).
pub fn add_deltas(f: &FeatureMatrix) -> FeatureMatrix {
    let (frames, dim) = (f.frames, f.dim);
    if frames == 0 {
        return FeatureMatrix {
            frames: 0,
            dim: dim * 3,
            values: Vec::new(),
            kind: f.kind,
        };
    }
    let d1 = regression(&f.values, frames, dim);
    let d2 = regression(&d1, frames, dim);
    let mut values = Vec::with_capacity(frames * dim * 3);
    for t in 0..frames {
        values.extend_from_slice(f.row(t));
        values.extend_from_slice(&d1[t * dim..(t + 1) * dim]);
        values.extend_from_slice(&d2[t * dim..(t + 1) * dim]);
    }
    FeatureMatrix {
        frames,
        dim: dim * 3,
        values,
        kind: f.kind,
    }
}

/// Concatenates each frame with `left` preceding and `right` following
/// frames, replicating the edge frames.
pub fn stack_context(f: &FeatureMatrix, left: usize, right: usize) -> FeatureMatrix {
    let width = left + right + 1;
    let mut values = Vec::with_capacity(f.frames * f.dim * width);
    let last = f.frames as isize - 1;
    for t in 0..f.frames as isize {
        for o in -(left as isize)..=right as isize {
            values.extend_from_slice(f.row((t + o).clamp(0, last) as usize));
        }
    }
    FeatureMatrix {
        frames: f.frames,
        dim: f.dim * width,
        values,
        kind: FeatureKind::MfccContext,
    }
}

/// Deltas plus ±6 context: 13-dim cepstra become 507-dim network inputs.
pub fn network_input(mfcc: &FeatureMatrix) -> FeatureMatrix {
    stack_context(&add_deltas(mfcc), 6, 6)
}

// ---------------------------------------------------------------- SAD

/// Per-frame keep flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SadMask(pub Vec<bool>);

impl SadMask {
    pub fn all(frames: usize) -> Self {
        SadMask(vec![true; frames])
    }

    pub fn kept(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SadConfig {
    /// Threshold is `mean(C0) - std_factor * std(C0)` per file.
    pub std_factor: f64,
    /// Files whose C0 spread is below this are treated as homogeneous.
    pub min_spread: f64,
    /// Homogeneous files are kept whole when mean C0 reaches this level,
    /// dropped whole otherwise.
    pub silence_floor: f64,
}

impl Default for SadConfig {
    fn default() -> Self {
        Self {
            std_factor: 0.5,
            min_spread: 1.0,
            silence_floor: -50.0,
        }
    }
}

/// Frames with fewer survivors than this are excluded from search.
pub const MIN_SAD_FRAMES: usize = 10;

/// Energy detector on column 0 (C0) of an MFCC-like matrix.
pub fn energy_sad(f: &FeatureMatrix, cfg: &SadConfig) -> SadMask {
    if f.frames == 0 {
        return SadMask(Vec::new());
    }
    let c0: Vec<f64> = f.rows().map(|r| f64::from(r[0])).collect();
    energy_mask(&c0, cfg)
}

/// The thresholding rule on a per-frame energy track.
pub fn energy_mask(energy: &[f64], cfg: &SadConfig) -> SadMask {
    if energy.is_empty() {
        return SadMask(Vec::new());
    }
    let n = energy.len() as f64;
    let mean = energy.iter().sum::<f64>() / n;
    let std = (energy.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < cfg.min_spread {
        return SadMask(vec![mean >= cfg.silence_floor; energy.len()]);
    }
    let threshold = mean - cfg.std_factor * std;
    SadMask(energy.iter().map(|&e| e >= threshold).collect())
}

/// Removes dropped frames. The flag is true when fewer than
/// [`MIN_SAD_FRAMES`] frames survive.
pub fn apply_sad(f: &FeatureMatrix, mask: &SadMask) -> Result<(FeatureMatrix, bool)> {
    if mask.len() != f.frames {
        return Err(QbeError::Data(format!(
            "SAD mask has {} entries for {} frames",
            mask.len(),
            f.frames
        )));
    }
    let kept = f.select(&mask.kept());
    let short = kept.frames < MIN_SAD_FRAMES;
    Ok((kept, short))
}
