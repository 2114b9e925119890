//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported but do not fail the process unless
//! `QBE_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{
    brute_force_dtw, cnn_toy_gradcheck, e2e_toy_gradcheck, layer_gradchecks, random_trials, rng,
    separated_trials, trial,
};
use qbe_core::bnf::lr_trace;
use qbe_core::cnnmatch::{balanced_epoch, CnnArch, CnnModel, TrialLabel};
use qbe_core::config::RunConfig;
use qbe_core::dtwsearch::{subsequence_dtw_on, DistanceMatrix};
use qbe_core::evalkit::{min_cnxe, twv_sweep, CnxeConfig, TwvConfig};
use qbe_core::features::{FeatureKind, FeatureMatrix};
use qbe_core::pipeline::run_experiment;
use qbe_core::simimage::{
    cosine_similarity_matrix, range_normalize, resize_to_fixed, SimilarityMatrix, DEFAULT_COLS, DEFAULT_ROWS,
};
use qbe_gradkit::{infer, LayerSpec, NetworkParams, NetworkSpec, Tensor};
use rand::Rng;

struct Gate {
    failed: Vec<String>,
    total: usize,
}

impl Gate {
    fn report(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        self.total += 1;
        println!("{} {id:<3} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn autodiff(gate: &mut Gate) {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut names = Vec::new();
    for (name, r) in layer_gradchecks() {
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        names.push(name);
    }
    for r in [cnn_toy_gradcheck(3), e2e_toy_gradcheck(1)] {
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    let elapsed = t.elapsed();
    gate.report(
        "1",
        "autodiff",
        worst < 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "{} layer kinds + toy CNN + toy joint model, {checked} coordinates, max rel error {worst:.2e}, {}",
            names.len(),
            secs(elapsed)
        ),
    );
}

fn dtw_oracle(gate: &mut Gate) {
    let t = Instant::now();
    let mut r = rng(2024);
    let (mut worst, mut mismatched) = (0.0f64, 0);
    for _ in 0..500 {
        let m = r.gen_range(1..=6);
        let n = r.gen_range(1..=9);
        let d: Vec<f64> = (0..m * n).map(|_| r.gen_range(0.0..2.0)).collect();
        let fast = subsequence_dtw_on(&DistanceMatrix::new(m, n, d.clone()).unwrap());
        match (fast, brute_force_dtw(&d, m, n)) {
            (Some(h), Some((cost, _, _))) => worst = worst.max((h.cost - cost).abs()),
            (None, None) => {}
            _ => mismatched += 1,
        }
    }
    let elapsed = t.elapsed();
    gate.report(
        "2",
        "dtw oracle",
        worst <= 1e-9 && mismatched == 0 && elapsed < Duration::from_secs(30),
        format!("500 matrices up to 6x9, max |cost diff| {worst:.1e}, {mismatched} existence mismatches, {}", secs(elapsed)),
    );
}

fn cnn_shape(gate: &mut Gate) {
    let model = CnnModel::build(CnnArch::full(), 1).unwrap();
    let first_fc = model
        .spec
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Linear { .. }))
        .unwrap();
    let features = NetworkSpec::new(vec![1, 100, 800], model.spec.layers[..first_fc].to_vec()).unwrap();
    let n_tensors = features.param_shapes().len();
    let params = NetworkParams::from_tensors(model.params.tensors[..n_tensors].to_vec());
    let mut r = rng(3);
    let x = Tensor::new(vec![1, 100, 800], (0..80_000).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let y = infer(&features, &params, x).unwrap();
    let fc_inputs = match &model.spec.layers[first_fc] {
        LayerSpec::Linear { inputs, outputs } => (*inputs, *outputs),
        _ => unreachable!(),
    };
    let pass = y.shape() == [15, 1, 23] && fc_inputs == (345, 60);
    gate.report(
        "3",
        "cnn shape",
        pass,
        format!("100x800 forward reaches {:?} (channels, rows, cols), FC {} -> {}", y.shape(), fc_inputs.0, fc_inputs.1),
    );
}

fn similarity(gate: &mut Gate) {
    let t = Instant::now();
    let mut r = rng(4);
    let mut worst_extreme = 0.0f64;
    for k in 0..50 {
        let (rows, cols) = (r.gen_range(1..60), r.gen_range(2..400));
        let s = SimilarityMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-0.7f32..0.9)).collect()).unwrap();
        let n = range_normalize(&s);
        let lo = n.values().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = n.values().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        worst_extreme = worst_extreme.max(f64::from((lo + 1.0).abs())).max(f64::from((hi - 1.0).abs()));
        if k == 0 {
            let c = SimilarityMatrix::new(2, 3, vec![0.4; 6]).unwrap();
            worst_extreme = worst_extreme.max(range_normalize(&c).values().iter().map(|v| f64::from(v.abs())).fold(0.0, f64::max));
        }
    }
    let big = |rows: usize, cols: usize, seed: u64| {
        let mut r = rng(seed);
        SimilarityMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let s = big(DEFAULT_ROWS, DEFAULT_COLS, 5);
    let identity = resize_to_fixed(&s, DEFAULT_ROWS, DEFAULT_COLS) == s;
    let s2 = big(2 * DEFAULT_ROWS, 2 * DEFAULT_COLS, 6);
    let d = resize_to_fixed(&s2, DEFAULT_ROWS, DEFAULT_COLS);
    let stride_two = (0..DEFAULT_ROWS).all(|k| (0..DEFAULT_COLS).all(|l| d.get(k, l) == s2.get(2 * k, 2 * l)));
    // Cosine similarity ignores positive rescaling of a row.
    let q = common::random_matrix(7, 5, 7);
    let u = common::random_matrix(11, 5, 8);
    let scaled = FeatureMatrix::new(7, 5, q.values().iter().map(|v| v * 3.5).collect(), FeatureKind::Bottleneck).unwrap();
    let a = cosine_similarity_matrix(&q, &u).unwrap();
    let b = cosine_similarity_matrix(&scaled, &u).unwrap();
    let scale_free = a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() < 1e-5);
    let elapsed = t.elapsed();
    gate.report(
        "4",
        "similarity pipeline",
        worst_extreme <= 1e-6 && identity && stride_two && scale_free && elapsed < Duration::from_secs(10),
        format!(
            "extreme error {worst_extreme:.1e}, identity at 100x800 {identity}, 200x1600 stride-2 {stride_two}, {}",
            secs(elapsed)
        ),
    );
}

fn metrics(gate: &mut Gate) {
    let t = Instant::now();
    let hand = vec![
        trial("q", "u1", true, 0.9),
        trial("q", "u2", false, 0.1),
        trial("q", "u3", false, 0.8),
        trial("q", "u4", false, 0.2),
    ];
    let cfg = TwvConfig {
        cost_fa: 1.0,
        cost_miss: 100.0,
        prior: Some(0.25),
    };
    let sweep = twv_sweep(&hand, &cfg).unwrap();
    let perfect = min_cnxe(&separated_trials(400, 3), &CnxeConfig::default()).unwrap().min_cnxe;
    let random: Vec<f64> = (0..5)
        .map(|s| min_cnxe(&random_trials(2000, s), &CnxeConfig::default()).unwrap().min_cnxe)
        .collect();
    let random_min = random.iter().copied().fold(f64::INFINITY, f64::min);
    let elapsed = t.elapsed();
    gate.report(
        "5",
        "metric oracles",
        sweep.mtwv == 1.0 && perfect < 0.01 && random_min >= 0.95 && elapsed < Duration::from_secs(30),
        format!(
            "hand MTWV {} at theta {}, separated minCnxe {perfect:.4}, random minCnxe min {random_min:.4}, {}",
            sweep.mtwv,
            sweep.theta_star,
            secs(elapsed)
        ),
    );
}

fn synthetic_experiment(gate: &mut Gate) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_file(&repo_root().join("configs/desk.conf")).unwrap();
    cfg.corpus_dir = dir.path().join("corpus");
    cfg.work_dir = dir.path().join("work");
    let t = Instant::now();
    let exp = run_experiment(&cfg, true).unwrap();
    let elapsed = t.elapsed();
    print!("{}", exp.summary());

    let get = |s: &str| exp.report(s).unwrap_or_else(|| panic!("system {s} missing"));
    let (mono_name, mono) = exp.best_mono_dtw().unwrap();
    let multi = get("dtw_multi");
    let cnn = get("cnn");
    let e2e = get("e2e");
    gate.report(
        "6a",
        "multilingual dtw vs best monolingual (mtwv)",
        multi.mtwv >= mono.mtwv - 0.02,
        format!("{:.4} vs {mono_name} {:.4}", multi.mtwv, mono.mtwv),
    );
    gate.report(
        "6b",
        "cnn matcher vs multilingual dtw (min_cnxe)",
        cnn.min_cnxe <= multi.min_cnxe + 0.02,
        format!("{:.4} vs {:.4}", cnn.min_cnxe, multi.min_cnxe),
    );
    gate.report(
        "6c",
        "joint model vs cnn matcher (min_cnxe)",
        e2e.min_cnxe <= cnn.min_cnxe + 0.02,
        format!("{:.4} vs {:.4}", e2e.min_cnxe, cnn.min_cnxe),
    );
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    gate.report(
        "6t",
        "experiment runtime",
        elapsed < Duration::from_secs(20 * 60),
        format!("{} on {cores} core(s), budget 20 min", secs(elapsed)),
    );
    if let Some(ft) = exp.report("dtw_ft") {
        println!(
            "INFO    dtw with matcher-tuned features: mtwv {:.4} vs {:.4}, min_cnxe {:.4} vs {:.4}",
            ft.mtwv, multi.mtwv, ft.min_cnxe, multi.min_cnxe
        );
    }
}

fn recipe(gate: &mut Gate) {
    // Dev loss rising every epoch halves the rate each time down to the floor.
    let trace = lr_trace(1e-3, 1e-4, &[1.0, 1.1, 1.2, 1.3, 1.4, 1.5]);
    let expected = [1e-3, 1e-3, 5e-4, 2.5e-4, 1.25e-4, 1e-4, 1e-4];
    let halving = trace == expected;
    // A falling or flat loss keeps it.
    let steady = lr_trace(1e-3, 1e-4, &[1.0, 0.9, 0.9]) == [1e-3; 4];

    let labels: Vec<TrialLabel> = (0..1005)
        .map(|i| TrialLabel {
            query: "q".into(),
            utterance: format!("u{i:04}"),
            positive: i < 5,
        })
        .collect();
    let epoch = balanced_epoch(&labels, 11).unwrap();
    let positives = epoch.iter().filter(|t| t.positive).count();
    let mut negatives: Vec<&str> = epoch.iter().filter(|t| !t.positive).map(|t| t.utterance.as_str()).collect();
    negatives.sort_unstable();
    negatives.dedup();
    let balanced = epoch.len() == 10 && positives == 5 && negatives.len() == 5;
    gate.report(
        "7",
        "training recipe",
        halving && steady && balanced,
        format!("lr trace {trace:?}, epoch of {} with {positives} positives", epoch.len()),
    );
}

fn reproducibility(gate: &mut Gate) {
    let run = |dir: &Path| {
        let mut cfg = RunConfig::from_file(&repo_root().join("configs/demo.conf")).unwrap();
        cfg.corpus_dir = dir.join("corpus");
        cfg.work_dir = dir.join("work");
        run_experiment(&cfg, true).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&cfg.work_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                (name.starts_with("scores_") || name.starts_with("report_")) || name == "summary.tsv"
            })
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(a.path());
    let second = run(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    gate.report(
        "8",
        "reproducibility",
        first.len() == second.len() && first.len() >= 13 && differing.is_empty(),
        format!("{} score/report files compared, {} differ", first.len(), differing.len()),
    );
}

fn main() {
    let mut gate = Gate {
        failed: Vec::new(),
        total: 0,
    };
    autodiff(&mut gate);
    dtw_oracle(&mut gate);
    cnn_shape(&mut gate);
    similarity(&mut gate);
    metrics(&mut gate);
    recipe(&mut gate);
    reproducibility(&mut gate);
    synthetic_experiment(&mut gate);
    println!(
        "acceptance: {} of {} checks passed{}",
        gate.total - gate.failed.len(),
        gate.total,
        if gate.failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", gate.failed.join(", "))
        }
    );
    if !gate.failed.is_empty() && std::env::var("QBE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
