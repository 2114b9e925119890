//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use qbe_core::bnf::{BnfArch, BnfModel, LanguageHead};
use qbe_core::cnnmatch::{CnnArch, CnnModel};
use qbe_core::e2e::{E2eModel, E2eNet, SideInput};
use qbe_core::evalkit::Trial;
use qbe_core::features::{FeatureKind, FeatureMatrix};
use qbe_gradkit::gradcheck::{check_fn, check_network, projection, GradCheck};
use qbe_gradkit::{LayerSpec, Mode, NetworkParams, NetworkSpec, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut r = rng(seed);
    let v = (0..frames * dim).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    FeatureMatrix::new(frames, dim, v, FeatureKind::Bottleneck).unwrap()
}

/// Minimal mean cost over every legal path by explicit enumeration,
/// with the start and end columns of one optimal path.
pub fn brute_force_dtw(d: &[f64], rows: usize, cols: usize) -> Option<(f64, usize, usize)> {
    fn walk(
        d: &[f64],
        rows: usize,
        cols: usize,
        i: usize,
        j: usize,
        sum: f64,
        len: usize,
        start: usize,
        best: &mut Option<(f64, usize, usize)>,
    ) {
        let sum = sum + d[i * cols + j];
        let len = len + 1;
        if i == rows - 1 {
            let mean = sum / len as f64;
            if best.map_or(true, |b| mean < b.0) {
                *best = Some((mean, start, j));
            }
            return;
        }
        for (di, dj) in [(1, 1), (2, 1), (1, 2)] {
            if i + di < rows && j + dj < cols {
                walk(d, rows, cols, i + di, j + dj, sum, len, start, best);
            }
        }
    }
    let mut best = None;
    for s in 0..cols {
        walk(d, rows, cols, 0, s, 0.0, 0, s, &mut best);
    }
    best
}

fn perturbed(spec: &NetworkSpec, seed: u64) -> NetworkParams<f64> {
    let mut p: NetworkParams<f64> = NetworkParams::init(spec, &mut rng(seed));
    let mut r = rng(seed + 1);
    for t in &mut p.tensors {
        for v in t.data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    p
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// One finite-difference check per layer kind, in training mode.
pub fn layer_gradchecks() -> Vec<(&'static str, GradCheck)> {
    let conv = |padding| LayerSpec::Conv2d {
        in_channels: 2,
        out_channels: 3,
        kernel: 3,
        stride: 1,
        padding,
    };
    let cases: Vec<(&'static str, NetworkSpec, Vec<usize>)> = vec![
        ("Linear", NetworkSpec::new(vec![0, 5], vec![LayerSpec::Linear { inputs: 5, outputs: 4 }]).unwrap(), vec![3, 5]),
        ("ReLU", NetworkSpec::new(vec![0, 6], vec![LayerSpec::Relu]).unwrap(), vec![2, 6]),
        ("LayerNorm", NetworkSpec::new(vec![0, 7], vec![LayerSpec::LayerNorm { dim: 7 }]).unwrap(), vec![3, 7]),
        ("Conv2D same", NetworkSpec::new(vec![2, 5, 6], vec![conv(Padding::Same)]).unwrap(), vec![2, 5, 6]),
        ("Conv2D valid", NetworkSpec::new(vec![2, 5, 6], vec![conv(Padding::Valid)]).unwrap(), vec![2, 5, 6]),
        (
            "MaxPool2D",
            NetworkSpec::new(vec![2, 5, 7], vec![LayerSpec::MaxPool2d { size: 2, stride: 2 }]).unwrap(),
            vec![2, 5, 7],
        ),
        ("Dropout", NetworkSpec::new(vec![0, 8], vec![LayerSpec::Dropout { p: 0.3 }]).unwrap(), vec![4, 8]),
        ("Softmax", NetworkSpec::new(vec![0, 4], vec![LayerSpec::Softmax]).unwrap(), vec![3, 4]),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, spec, shape))| {
            let params = perturbed(&spec, 10 + i as u64);
            let x = random_tensor(&shape, 100 + i as u64);
            (name, check_network(&spec, &params, &x, Mode::Train, 7, 1e-5, 400).unwrap())
        })
        .collect()
}

/// The matcher graph on a 16x32 image, softmax included.
pub fn cnn_toy_gradcheck(seed: u64) -> GradCheck {
    let spec = CnnArch::toy().spec().unwrap();
    let params = perturbed(&spec, seed);
    let x = random_tensor(&[1, 16, 32], seed + 50);
    check_network(&spec, &params, &x, Mode::Train, seed, 1e-5, 300).unwrap()
}

/// Finite-difference step of the joint check; small enough that pooling and
/// extreme-cell switches rarely fall inside the probe interval.
const STEP: f64 = 1e-7;

/// Extractor 10 -> 8 -> 4 feeding a 16x32 matcher.
pub fn toy_e2e(seed: u64) -> E2eModel {
    let heads = vec![LanguageHead {
        language: "toy".into(),
        classes: 3,
    }];
    let mut arch = BnfArch::for_heads(heads, 8);
    arch.input_dim = 10;
    arch.bottleneck = 4;
    arch.shared_layers = 1;
    let bnf = BnfModel::build(arch, seed).unwrap();
    let cnn = CnnModel::build(CnnArch::toy(), seed + 1).unwrap();
    let mut m = E2eModel::from_pretrained(&bnf, &cnn, 0, false).unwrap();
    m.min_frames = 1;
    m
}

/// Finite differences of the joint network's logits (projected) with
/// respect to every extractor and matcher parameter. The query is longer
/// than the image height and the utterance shorter than its width, so both
/// resampling paths are exercised; a few frames are masked out.
pub fn e2e_toy_gradcheck(seed: u64) -> GradCheck {
    let model = toy_e2e(seed);
    let ext_spec = model.arch.extractor_spec();
    let matcher_spec = model.matcher.spec.without_softmax();
    let ext: NetworkParams<f64> = perturbed(&ext_spec, seed + 2);
    let matcher: NetworkParams<f64> = perturbed(&model.matcher.spec, seed + 3);
    let xq = random_tensor(&[20, 10], seed + 4);
    let xu = random_tensor(&[26, 10], seed + 5);
    let keep_q: Vec<usize> = (0..20).filter(|t| t % 7 != 3).collect();
    let keep_u: Vec<usize> = (0..26).filter(|t| t % 5 != 1).collect();
    let w = projection(2, seed + 6);

    let eval = |ext: &NetworkParams<f64>, matcher: &NetworkParams<f64>| -> f64 {
        let net = E2eNet {
            extractor_spec: &ext_spec,
            extractor: ext,
            matcher_spec: &matcher_spec,
            matcher,
            image_rows: 16,
            image_cols: 32,
            min_frames: 1,
        };
        let q = SideInput { frames: &xq, keep: &keep_q };
        let u = SideInput { frames: &xu, keep: &keep_u };
        let (y, _) = net.forward(&q, &u, Mode::Eval, &mut rng(0)).unwrap().unwrap();
        y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };

    let net = E2eNet {
        extractor_spec: &ext_spec,
        extractor: &ext,
        matcher_spec: &matcher_spec,
        matcher: &matcher,
        image_rows: 16,
        image_cols: 32,
        min_frames: 1,
    };
    let q = SideInput { frames: &xq, keep: &keep_q };
    let u = SideInput { frames: &xu, keep: &keep_u };
    let (_, tape) = net.forward(&q, &u, Mode::Eval, &mut rng(0)).unwrap().unwrap();
    let grads = net.backward(tape, &Tensor::new(vec![1, 2], w.clone()).unwrap()).unwrap();

    let mut report = GradCheck::default();
    for (ti, g) in grads.extractor.tensors.iter().enumerate() {
        let r = check_fn(
            |xs| {
                let mut p = ext.clone();
                p.tensors[ti].data_mut().copy_from_slice(xs);
                eval(&p, &matcher)
            },
            ext.tensors[ti].data(),
            g.data(),
            STEP,
            200,
        );
        report = report.merge(r);
    }
    for (ti, g) in grads.matcher.tensors.iter().enumerate() {
        let r = check_fn(
            |xs| {
                let mut p = matcher.clone();
                p.tensors[ti].data_mut().copy_from_slice(xs);
                eval(&ext, &p)
            },
            matcher.tensors[ti].data(),
            g.data(),
            STEP,
            200,
        );
        report = report.merge(r);
    }
    report
}

pub fn trial(query: &str, utterance: &str, truth: bool, score: f64) -> Trial {
    Trial {
        query: query.into(),
        utterance: utterance.into(),
        truth,
        raw: score,
        norm: score,
    }
}

/// Pooled term-weighted value at every threshold between sorted scores,
/// counted directly; returns the maximum.
pub fn brute_force_mtwv(trials: &[Trial], cost_fa: f64, cost_miss: f64, prior: f64) -> f64 {
    let beta = cost_fa / cost_miss * (1.0 / prior - 1.0);
    let mut scores: Vec<f64> = trials.iter().map(|t| t.norm).collect();
    scores.sort_by(f64::total_cmp);
    let mut thresholds = vec![f64::NEG_INFINITY, f64::INFINITY];
    thresholds.extend(scores.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let targets = trials.iter().filter(|t| t.truth).count() as f64;
    let nontargets = trials.len() as f64 - targets;
    thresholds
        .into_iter()
        .map(|th| {
            let miss = trials.iter().filter(|t| t.truth && !(t.norm > th)).count() as f64;
            let fa = trials.iter().filter(|t| !t.truth && t.norm > th).count() as f64;
            1.0 - miss / targets - beta * fa / nontargets
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// One query, two well separated classes.
pub fn separated_trials(n: usize, seed: u64) -> Vec<Trial> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let truth = i % 10 == 0;
            let s = if truth { 10.0 } else { 0.0 } + r.gen_range(-0.1..0.1);
            trial("q", &format!("u{i}"), truth, s)
        })
        .collect()
}

/// Scores drawn independently of the labels; five queries, each with targets.
pub fn random_trials(n: usize, seed: u64) -> Vec<Trial> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| trial(&format!("q{}", i % 5), &format!("u{i}"), i % 7 == 0, r.gen_range(-1.0..1.0)))
        .collect()
}
