use std::path::Path;

use qbe_core::config::RunConfig;
use qbe_core::pipeline::run_experiment;
use qbe_core::scores::load_scores;

fn demo_config(work: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.conf")).unwrap();
    cfg.corpus_dir = work.join("corpus");
    cfg.work_dir = work.join("work");
    cfg
}

#[test]
fn demo_experiment_produces_every_system() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path());
    let exp = run_experiment(&cfg, true).unwrap();

    let systems: Vec<&str> = exp.reports.iter().map(|(s, _)| s.as_str()).collect();
    assert_eq!(systems, ["dtw_lang0", "dtw_lang1", "dtw_multi", "cnn", "e2e", "dtw_ft"]);
    for (s, r) in &exp.reports {
        assert!((0.0..=1.0 + 1e-9).contains(&r.min_cnxe), "{s}: {}", r.min_cnxe);
        assert!(r.mtwv <= 1.0, "{s}");
        assert!(cfg.work_dir.join(format!("report_{s}.txt")).exists());
        assert!(cfg.work_dir.join(format!("det_{s}.svg")).exists());
    }

    // Joint training keeps the best dev checkpoint, the initial model included.
    let h = &exp.e2e_history;
    assert!(h.dev_loss[h.best_epoch] <= h.dev_loss[0]);

    // Tuning the extractor through the matcher changes the DTW scores.
    let base = load_scores(&cfg.work_dir.join("scores_dtw_multi.tsv")).unwrap();
    let tuned = load_scores(&cfg.work_dir.join("scores_dtw_ft.tsv")).unwrap();
    assert_eq!(base.len(), tuned.len());
    assert!(base.iter().zip(&tuned).any(|(a, b)| a.score != b.score));
    let summary = std::fs::read_to_string(cfg.work_dir.join("summary.tsv")).unwrap();
    assert_eq!(summary, exp.summary());
}
