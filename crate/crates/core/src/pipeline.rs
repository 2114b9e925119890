//! Command implementations over a corpus directory and a work directory.
//!
//! Work directory layout, by model or system name:
//! `bnf_<name>.qbnp` (+ `.arch`), `bnf_<name>.log`, `feat_<name>_{queries,utterances}.qbfa`,
//! `cnn.qbnp`, `cnn_<name>.qbnp` for jointly trained matchers,
//! `scores_<system>.tsv`, `report_<system>.txt`, `det_<system>.{csv,svg}`.
//!
//! Queries are split by index: odd ones are held out for testing, the rest
//! alternate between matcher training (multiples of four) and development.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::archive::{load_archive, save_archive, Entry};
use crate::bnf::{stack_language, train as train_bnf, BnfArch, BnfHistory, BnfModel, LanguageHead};
use crate::cnnmatch::{train_cnn, CnnModel, TrainHistory, TrialLabel};
use crate::config::{QuerySet, RunConfig};
use crate::corpus::{
    generate, load_ground_truth_in, load_language, manifest_languages, parse_example_id, write_corpus, QUERIES,
    UTTERANCES,
};
use crate::dtwsearch::{average_template, search, SearchItem};
use crate::e2e::{e2e_train, E2eModel, E2eSide, TrialSource};
use crate::error::{QbeError, Result};
use crate::evalkit::{build_trials, det_svg, evaluate, write_det_csv, EvalReport};
use crate::features::{apply_sad, energy_sad, network_input, FeatureMatrix, SadConfig, SadMask};
use crate::scores::{load_ground_truth, load_scores, save_scores, GroundTruth, ScoreRecord, SENTINEL};
use crate::simimage::similarity_image;
use crate::util::derive_seed;

/// Model name of the multilingual bottleneck network.
pub const MULTI: &str = "multi";
/// Jointly trained extractor and matcher.
pub const E2E: &str = "e2e";
/// Extractor tuned through a frozen matcher.
pub const FINETUNED: &str = "ft";
/// Feature name for the corpus observations themselves.
pub const RAW: &str = "raw";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

pub fn split_of(query_index: usize) -> Split {
    match query_index % 4 {
        0 => Split::Train,
        2 => Split::Dev,
        _ => Split::Test,
    }
}

/// Numeric suffix of an id such as `q017`.
pub fn id_index(id: &str) -> Result<usize> {
    id.trim_start_matches(|c: char| !c.is_ascii_digit())
        .parse()
        .map_err(|_| QbeError::Data(format!("id `{id}` has no numeric index")))
}

pub fn query_split(id: &str) -> Result<Split> {
    Ok(split_of(id_index(id)?))
}

pub struct Layout {
    pub corpus: PathBuf,
    pub work: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            corpus: cfg.corpus_dir.clone(),
            work: cfg.work_dir.clone(),
        }
    }
    /// Layout whose work directory exists.
    pub fn prepared(cfg: &RunConfig) -> Result<Self> {
        let l = Self::new(cfg);
        fs::create_dir_all(&l.work)?;
        Ok(l)
    }

    pub fn bnf(&self, name: &str) -> PathBuf {
        self.work.join(format!("bnf_{name}.qbnp"))
    }
    pub fn bnf_log(&self, name: &str) -> PathBuf {
        self.work.join(format!("bnf_{name}.log"))
    }
    pub fn features(&self, name: &str, side: &str) -> PathBuf {
        self.work.join(format!("feat_{name}_{side}.qbfa"))
    }
    /// Separately trained matcher when `name` is `None`.
    pub fn cnn(&self, name: Option<&str>) -> PathBuf {
        match name {
            None => self.work.join("cnn.qbnp"),
            Some(n) => self.work.join(format!("cnn_{n}.qbnp")),
        }
    }
    pub fn train_log(&self, name: &str) -> PathBuf {
        self.work.join(format!("{name}.log"))
    }
    pub fn scores(&self, system: &str) -> PathBuf {
        self.work.join(format!("scores_{system}.tsv"))
    }
    pub fn report(&self, system: &str) -> PathBuf {
        self.work.join(format!("report_{system}.txt"))
    }
    pub fn det(&self, system: &str, ext: &str) -> PathBuf {
        self.work.join(format!("det_{system}.{ext}"))
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(QbeError::Data(format!("{what} not found at {}", path.display())))
    }
}

/// One query with its examples, in corpus order.
#[derive(Clone, Debug)]
pub struct QueryExamples {
    pub id: String,
    pub examples: Vec<FeatureMatrix>,
}

/// Groups `q#k` archive entries by query.
pub fn group_examples(entries: Vec<Entry>) -> Result<Vec<QueryExamples>> {
    let mut out: Vec<QueryExamples> = Vec::new();
    for (id, f) in entries {
        let (q, k) = parse_example_id(&id);
        match out.last_mut() {
            Some(last) if last.id == q => {
                if k != last.examples.len() {
                    return Err(QbeError::Data(format!("example `{id}` out of order")));
                }
                last.examples.push(f);
            }
            _ => {
                if k != 0 || out.iter().any(|e| e.id == q) {
                    return Err(QbeError::Data(format!("example `{id}` out of order")));
                }
                out.push(QueryExamples {
                    id: q.to_string(),
                    examples: vec![f],
                });
            }
        }
    }
    Ok(out)
}

fn ungroup(queries: &[QueryExamples]) -> Vec<Entry> {
    queries
        .iter()
        .flat_map(|q| {
            q.examples
                .iter()
                .enumerate()
                .map(move |(k, e)| (crate::corpus::example_id(&q.id, k), e.clone()))
        })
        .collect()
}

/// Corpus observations with their speech masks.
pub struct DetectionData {
    pub queries: Vec<QueryExamples>,
    pub query_masks: Vec<Vec<SadMask>>,
    pub utterances: Vec<Entry>,
    pub utterance_masks: Vec<SadMask>,
}

pub fn load_detection(corpus: &Path) -> Result<DetectionData> {
    require(&corpus.join(QUERIES), "query archive")?;
    require(&corpus.join(UTTERANCES), "utterance archive")?;
    let queries = group_examples(load_archive(&corpus.join(QUERIES))?)?;
    let utterances = load_archive(&corpus.join(UTTERANCES))?;
    let sad = SadConfig::default();
    let query_masks = queries
        .iter()
        .map(|q| q.examples.iter().map(|e| energy_sad(e, &sad)).collect())
        .collect();
    let utterance_masks = utterances.iter().map(|(_, f)| energy_sad(f, &sad)).collect();
    Ok(DetectionData {
        queries,
        query_masks,
        utterances,
        utterance_masks,
    })
}

/// Features of the detection data under a model (or the raw observations).
pub struct FeatureSet {
    pub queries: Vec<QueryExamples>,
    pub utterances: Vec<Entry>,
}

fn extract_all(model: &BnfModel, data: &DetectionData) -> Result<FeatureSet> {
    let queries = data
        .queries
        .par_iter()
        .map(|q| {
            Ok(QueryExamples {
                id: q.id.clone(),
                examples: q
                    .examples
                    .iter()
                    .map(|e| model.extract_bottleneck(&network_input(e)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    let utterances = data
        .utterances
        .par_iter()
        .map(|(id, f)| Ok((id.clone(), model.extract_bottleneck(&network_input(f))?)))
        .collect::<Result<_>>()?;
    Ok(FeatureSet { queries, utterances })
}

fn load_features(layout: &Layout, name: &str, data: &DetectionData) -> Result<FeatureSet> {
    if name == RAW {
        return Ok(FeatureSet {
            queries: data.queries.clone(),
            utterances: data.utterances.clone(),
        });
    }
    let (qp, up) = (layout.features(name, "queries"), layout.features(name, "utterances"));
    require(&qp, "query features (run extract first)")?;
    require(&up, "utterance features (run extract first)")?;
    let set = FeatureSet {
        queries: group_examples(load_archive(&qp)?)?,
        utterances: load_archive(&up)?,
    };
    let same = set.queries.len() == data.queries.len()
        && set.utterances.len() == data.utterances.len()
        && set.queries.iter().zip(&data.queries).all(|(a, b)| a.id == b.id && a.examples.len() == b.examples.len())
        && set.utterances.iter().zip(&data.utterances).all(|(a, b)| a.0 == b.0 && a.1.frames() == b.1.frames());
    if !same {
        return Err(QbeError::Data(format!("features `{name}` do not match the corpus; re-run extract")));
    }
    Ok(set)
}

/// Search-side query and utterance items after speech activity detection;
/// multi-example queries become averaged templates of their usable examples.
pub fn search_items(
    set: &FeatureSet,
    data: &DetectionData,
    which: QuerySet,
) -> Result<(Vec<SearchItem>, Vec<SearchItem>)> {
    let mut queries = Vec::new();
    for (q, masks) in set.queries.iter().zip(&data.query_masks) {
        if which == QuerySet::Test && query_split(&q.id)? != Split::Test {
            continue;
        }
        let mut usable = Vec::new();
        let mut last = None;
        for (e, m) in q.examples.iter().zip(masks) {
            let (kept, short) = apply_sad(e, m)?;
            if !short {
                usable.push(kept);
            } else {
                last = Some(kept);
            }
        }
        let item = if usable.is_empty() {
            SearchItem {
                id: q.id.clone(),
                features: last.expect("queries have examples"),
                short: true,
            }
        } else {
            SearchItem {
                id: q.id.clone(),
                features: average_template(&usable)?.0,
                short: false,
            }
        };
        queries.push(item);
    }
    let utterances = set
        .utterances
        .iter()
        .zip(&data.utterance_masks)
        .map(|((id, f), m)| {
            let (features, short) = apply_sad(f, m)?;
            Ok(SearchItem {
                id: id.clone(),
                features,
                short,
            })
        })
        .collect::<Result<_>>()?;
    Ok((queries, utterances))
}

// ---------------------------------------------------------------- commands

pub fn cmd_gen_corpus(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let corpus = generate(&cfg.corpus())?;
    write_corpus(&cfg.corpus_dir, &corpus)?;
    log::info!(
        "corpus: {} queries, {} utterances in {}",
        corpus.detection.queries.len(),
        corpus.detection.utterances.len(),
        cfg.corpus_dir.display()
    );
    Ok(())
}

fn history_text(h: &BnfHistory) -> String {
    let mut s = String::from("epoch\ttrain_loss\tdev_loss\tdev_accuracy\tlr\n");
    for i in 0..h.train_loss.len() {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:e}",
            i + 1,
            h.train_loss[i],
            h.dev_loss[i],
            h.dev_accuracy[i],
            h.lr[i]
        );
    }
    s
}

fn train_history_text(h: &TrainHistory) -> String {
    let mut s = format!("best_epoch = {}\nepoch\ttrain_loss\tdev_loss\n", h.best_epoch);
    let _ = writeln!(s, "0\t\t{:.6}", h.dev_loss[0]);
    for (i, t) in h.train_loss.iter().enumerate() {
        let _ = writeln!(s, "{}\t{t:.6}\t{:.6}", i + 1, h.dev_loss[i + 1]);
    }
    s
}

/// Trains one monolingual network per language and one multilingual one.
pub fn cmd_train_bnf(cfg: &RunConfig) -> Result<Vec<(String, BnfHistory)>> {
    cfg.validate()?;
    let layout = Layout::prepared(cfg)?;
    let langs = manifest_languages(&layout.corpus)?;
    let data = langs
        .iter()
        .map(|(l, c)| Ok(stack_language(&load_language(&layout.corpus, l, *c)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs: Vec<(String, Vec<usize>)> = (0..langs.len()).map(|i| (langs[i].0.clone(), vec![i])).collect();
    if langs.len() > 1 {
        jobs.push((MULTI.to_string(), (0..langs.len()).collect()));
    }
    let mut out = Vec::new();
    for (k, (name, members)) in jobs.into_iter().enumerate() {
        let heads = members
            .iter()
            .map(|&i| LanguageHead {
                language: langs[i].0.clone(),
                classes: langs[i].1,
            })
            .collect();
        let mut arch = BnfArch::for_heads(heads, cfg.bnf_hidden);
        arch.dropout = cfg.bnf_dropout as f32;
        let mut model = BnfModel::build(arch, derive_seed(cfg.seed, 100 + k as u64))?;
        let subset: Vec<_> = members.iter().map(|&i| data[i].clone()).collect();
        let mut schedule = cfg.bnf_schedule();
        schedule.seed = derive_seed(schedule.seed, k as u64);
        let history = train_bnf(&mut model, &subset, &schedule)?;
        log::info!(
            "bnf {name}: dev accuracy {:.4}",
            history.dev_accuracy.last().copied().unwrap_or(f64::NAN)
        );
        model.save(&layout.bnf(&name))?;
        fs::write(layout.bnf_log(&name), history_text(&history))?;
        out.push((name, history));
    }
    // A multilingual setup always has a `multi` model; a single language
    // stands in for it otherwise.
    if langs.len() == 1 {
        fs::copy(layout.bnf(&langs[0].0), layout.bnf(MULTI))?;
        fs::copy(
            crate::bnf::arch_path(&layout.bnf(&langs[0].0)),
            crate::bnf::arch_path(&layout.bnf(MULTI)),
        )?;
    }
    Ok(out)
}

/// Writes bottleneck features of every query example and utterance under
/// the model named by `features`.
pub fn cmd_extract(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::prepared(cfg)?;
    let path = layout.bnf(&cfg.features);
    require(&path, "bottleneck model")?;
    let model = BnfModel::load(&path)?;
    let data = load_detection(&layout.corpus)?;
    let set = extract_all(&model, &data)?;
    save_archive(&layout.features(&cfg.features, "queries"), &ungroup(&set.queries))?;
    save_archive(&layout.features(&cfg.features, "utterances"), &set.utterances)?;
    Ok(())
}

/// DTW scores under the features named by `features`; system `dtw_<features>`.
pub fn cmd_search_dtw(cfg: &RunConfig) -> Result<PathBuf> {
    let layout = Layout::prepared(cfg)?;
    let data = load_detection(&layout.corpus)?;
    let set = load_features(&layout, &cfg.features, &data)?;
    let (queries, utterances) = search_items(&set, &data, cfg.search_queries)?;
    let scores = search(&queries, &utterances)?;
    let out = layout.scores(&format!("dtw_{}", cfg.features));
    save_scores(&out, &scores)?;
    Ok(out)
}

/// Matcher training data: first example of each query and the utterances,
/// both after speech activity detection, with short files dropped.
struct MatcherData {
    queries: Vec<(String, FeatureMatrix)>,
    utterances: Vec<(String, FeatureMatrix)>,
}

fn matcher_data(set: &FeatureSet, data: &DetectionData) -> Result<MatcherData> {
    let mut queries = Vec::new();
    for (q, masks) in set.queries.iter().zip(&data.query_masks) {
        if query_split(&q.id)? == Split::Test {
            continue;
        }
        let (kept, short) = apply_sad(&q.examples[0], &masks[0])?;
        if !short {
            queries.push((q.id.clone(), kept));
        }
    }
    let mut utterances = Vec::new();
    for ((id, f), m) in set.utterances.iter().zip(&data.utterance_masks) {
        let (kept, short) = apply_sad(f, m)?;
        if !short {
            utterances.push((id.clone(), kept));
        }
    }
    Ok(MatcherData { queries, utterances })
}

/// Training and development trials over non-held-out queries.
fn matcher_trials(
    queries: &[String],
    utterances: &[String],
    gt: &GroundTruth,
) -> Result<(Vec<TrialLabel>, Vec<TrialLabel>)> {
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for q in queries {
        let split = query_split(q)?;
        for u in utterances {
            let t = TrialLabel {
                query: q.clone(),
                utterance: u.clone(),
                positive: gt.is_positive(q, u),
            };
            match split {
                Split::Train => train.push(t),
                Split::Dev => dev.push(t),
                Split::Test => {}
            }
        }
    }
    Ok((train, dev))
}

fn lookup<'a, T>(items: &'a [(String, T)], id: &str) -> Result<&'a T> {
    items
        .binary_search_by(|(k, _)| k.as_str().cmp(id))
        .map(|i| &items[i].1)
        .map_err(|_| QbeError::Data(format!("no item `{id}`")))
}

fn sorted<T>(mut v: Vec<(String, T)>) -> Vec<(String, T)> {
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

pub fn cmd_train_cnn(cfg: &RunConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let layout = Layout::prepared(cfg)?;
    let data = load_detection(&layout.corpus)?;
    let set = load_features(&layout, &cfg.features, &data)?;
    let gt = load_ground_truth_in(&layout.corpus)?;
    let md = matcher_data(&set, &data)?;
    let q_ids: Vec<String> = md.queries.iter().map(|q| q.0.clone()).collect();
    let u_ids: Vec<String> = md.utterances.iter().map(|u| u.0.clone()).collect();
    let (train, dev) = matcher_trials(&q_ids, &u_ids, &gt)?;
    let (queries, utterances) = (sorted(md.queries), sorted(md.utterances));
    let arch = cfg.cnn_arch();
    let (rows, cols) = (arch.input_rows, arch.input_cols);
    let images = |t: &TrialLabel| similarity_image(lookup(&queries, &t.query)?, lookup(&utterances, &t.utterance)?, rows, cols);
    let mut model = CnnModel::build(arch, derive_seed(cfg.seed, 200))?;
    let history = train_cnn(&mut model, &images, &train, &dev, &cfg.cnn_schedule())?;
    model.save(&layout.cnn(None))?;
    fs::write(layout.train_log("cnn"), train_history_text(&history))?;
    Ok(history)
}

/// Matcher scores of every selected query against every utterance.
fn matcher_scores(model: &CnnModel, queries: &[SearchItem], utterances: &[SearchItem]) -> Result<Vec<ScoreRecord>> {
    let pairs: Vec<(usize, usize)> = (0..queries.len())
        .flat_map(|q| (0..utterances.len()).map(move |u| (q, u)))
        .collect();
    let (rows, cols) = (model.arch.input_rows, model.arch.input_cols);
    pairs
        .par_iter()
        .map(|&(qi, ui)| {
            let (q, u) = (&queries[qi], &utterances[ui]);
            let mut rec = ScoreRecord::unspanned(&q.id, &u.id, SENTINEL);
            if !(q.short || u.short) {
                rec.score = model.score_pair(&similarity_image(&q.features, &u.features, rows, cols)?)?;
            }
            Ok(rec)
        })
        .collect()
}

pub fn cmd_search_cnn(cfg: &RunConfig) -> Result<PathBuf> {
    let layout = Layout::prepared(cfg)?;
    require(&layout.cnn(None), "CNN matcher")?;
    let model = CnnModel::load(&layout.cnn(None))?;
    let data = load_detection(&layout.corpus)?;
    let set = load_features(&layout, &cfg.features, &data)?;
    let (queries, utterances) = search_items(&set, &data, cfg.search_queries)?;
    let out = layout.scores("cnn");
    save_scores(&out, &matcher_scores(&model, &queries, &utterances)?)?;
    Ok(out)
}

struct Sides {
    queries: Vec<(String, E2eSide)>,
    utterances: Vec<(String, E2eSide)>,
}

impl TrialSource for Sides {
    fn query(&self, trial: &TrialLabel) -> Result<&E2eSide> {
        lookup(&self.queries, &trial.query)
    }
    fn utterance(&self, trial: &TrialLabel) -> Result<&E2eSide> {
        lookup(&self.utterances, &trial.utterance)
    }
}

/// Jointly trains the `features` extractor with the CNN matcher. With
/// `matcher_frozen` the result is a tuned extractor saved as model `ft`;
/// otherwise both parts are saved as model `e2e`.
pub fn cmd_train_e2e(cfg: &RunConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let layout = Layout::prepared(cfg)?;
    require(&layout.bnf(&cfg.features), "bottleneck model")?;
    require(&layout.cnn(None), "CNN matcher")?;
    let bnf = BnfModel::load(&layout.bnf(&cfg.features))?;
    let cnn = CnnModel::load(&layout.cnn(None))?;
    let mut model = E2eModel::from_pretrained(&bnf, &cnn, cfg.freeze_spec, cfg.matcher_frozen)?;
    let data = load_detection(&layout.corpus)?;
    let gt = load_ground_truth_in(&layout.corpus)?;

    // Same trial set as the separately trained matcher.
    let set = load_features(&layout, &cfg.features, &data)?;
    let md = matcher_data(&set, &data)?;
    let q_ids: Vec<String> = md.queries.iter().map(|q| q.0.clone()).collect();
    let u_ids: Vec<String> = md.utterances.iter().map(|u| u.0.clone()).collect();
    let (train, dev) = matcher_trials(&q_ids, &u_ids, &gt)?;
    let keep_q: HashSet<&str> = q_ids.iter().map(String::as_str).collect();
    let keep_u: HashSet<&str> = u_ids.iter().map(String::as_str).collect();
    let queries = data
        .queries
        .iter()
        .zip(&data.query_masks)
        .filter(|(q, _)| keep_q.contains(q.id.as_str()))
        .map(|(q, m)| {
            (
                q.id.clone(),
                E2eSide {
                    frames: network_input(&q.examples[0]),
                    mask: m[0].clone(),
                },
            )
        })
        .collect();
    let utterances = data
        .utterances
        .iter()
        .zip(&data.utterance_masks)
        .filter(|((id, _), _)| keep_u.contains(id.as_str()))
        .map(|((id, f), m)| {
            (
                id.clone(),
                E2eSide {
                    frames: network_input(f),
                    mask: m.clone(),
                },
            )
        })
        .collect();
    let sides = Sides {
        queries: sorted(queries),
        utterances: sorted(utterances),
    };
    let history = e2e_train(&mut model, &sides, &train, &dev, &cfg.e2e_schedule())?;
    let name = if cfg.matcher_frozen { FINETUNED } else { E2E };
    let tuned = BnfModel {
        extractor: model.extractor.clone(),
        ..bnf
    };
    tuned.save(&layout.bnf(name))?;
    model.matcher.save(&layout.cnn(Some(name)))?;
    fs::write(layout.train_log(name), train_history_text(&history))?;
    Ok(history)
}

/// Scores with the jointly trained model: tuned extractor features, then the
/// jointly trained matcher. System `e2e`.
pub fn cmd_search_e2e(cfg: &RunConfig) -> Result<PathBuf> {
    let layout = Layout::prepared(cfg)?;
    require(&layout.bnf(E2E), "end-to-end extractor")?;
    require(&layout.cnn(Some(E2E)), "end-to-end matcher")?;
    let bnf = BnfModel::load(&layout.bnf(E2E))?;
    let cnn = CnnModel::load(&layout.cnn(Some(E2E)))?;
    let data = load_detection(&layout.corpus)?;
    let set = extract_all(&bnf, &data)?;
    let (queries, utterances) = search_items(&set, &data, cfg.search_queries)?;
    let out = layout.scores(E2E);
    save_scores(&out, &matcher_scores(&cnn, &queries, &utterances)?)?;
    Ok(out)
}

/// Metrics of one score file: report, DET CSV and DET SVG under `system`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let layout = Layout::prepared(cfg)?;
    let scores_path = cfg.scores.clone().unwrap_or_else(|| layout.scores(&cfg.system));
    require(&scores_path, "score file")?;
    let scores = load_scores(&scores_path)?;
    let gt = match &cfg.ground_truth {
        Some(p) => {
            require(p, "ground truth")?;
            load_ground_truth(p)?
        }
        None => load_ground_truth_in(&layout.corpus)?,
    };
    let queries: HashSet<String> = scores.iter().map(|s| s.query.clone()).collect();
    let trials = build_trials(&scores, &gt.for_queries(&queries))?;
    let (report, sweep) = evaluate(trials, &cfg.twv(), &cfg.cnxe())?;
    fs::write(layout.report(&cfg.system), report.to_text())?;
    write_det_csv(BufWriter::new(fs::File::create(layout.det(&cfg.system, "csv"))?), &sweep.det)?;
    fs::write(
        layout.det(&cfg.system, "svg"),
        det_svg(&[(cfg.system.clone(), sweep.det.clone())]),
    )?;
    Ok(report)
}

// ---------------------------------------------------------------- experiment

/// Metrics of every system produced by [`run_experiment`].
#[derive(Clone, Debug, Default)]
pub struct Experiment {
    pub languages: Vec<String>,
    pub reports: Vec<(String, EvalReport)>,
    pub cnn_history: TrainHistory,
    pub e2e_history: TrainHistory,
}

impl Experiment {
    pub fn report(&self, system: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|(s, _)| s == system).map(|(_, r)| r)
    }

    /// Best monolingual DTW result by MTWV.
    pub fn best_mono_dtw(&self) -> Option<(&str, &EvalReport)> {
        self.languages
            .iter()
            .filter_map(|l| {
                let sys = format!("dtw_{l}");
                self.reports.iter().find(|(s, _)| *s == sys).map(|(s, r)| (s.as_str(), r))
            })
            .max_by(|a, b| a.1.mtwv.total_cmp(&b.1.mtwv))
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("system\tmin_cnxe\tmtwv\n");
        for (name, r) in &self.reports {
            let _ = writeln!(s, "{name}\t{:.6}\t{:.6}", r.min_cnxe, r.mtwv);
        }
        s
    }
}

/// Every stage in order: corpus, bottleneck networks, DTW on each feature
/// set, CNN matcher, joint model; optionally the matcher-as-loss extractor.
pub fn run_experiment(cfg: &RunConfig, with_finetune: bool) -> Result<Experiment> {
    cfg.validate()?;
    let mut exp = Experiment::default();
    let timer = std::time::Instant::now();
    let stage = |name: &str| log::info!("[{:>7.1}s] {name}", timer.elapsed().as_secs_f64());

    stage("gen-corpus");
    cmd_gen_corpus(cfg)?;
    stage("train-bnf");
    cmd_train_bnf(cfg)?;
    exp.languages = manifest_languages(&cfg.corpus_dir)?.into_iter().map(|(l, _)| l).collect();

    let mut feature_sets = exp.languages.clone();
    if exp.languages.len() > 1 {
        feature_sets.push(MULTI.to_string());
    }
    let eval_system = |cfg: &RunConfig, system: &str, exp: &mut Experiment| -> Result<()> {
        let mut c = cfg.clone();
        c.system = system.to_string();
        c.scores = None;
        let r = cmd_eval(&c)?;
        log::info!("{system}: min_cnxe {:.4} mtwv {:.4}", r.min_cnxe, r.mtwv);
        exp.reports.push((system.to_string(), r));
        Ok(())
    };
    for name in &feature_sets {
        stage(&format!("extract + search-dtw {name}"));
        let mut c = cfg.clone();
        c.features = name.clone();
        cmd_extract(&c)?;
        cmd_search_dtw(&c)?;
        eval_system(&c, &format!("dtw_{name}"), &mut exp)?;
    }

    let mut c = cfg.clone();
    c.features = MULTI.to_string();
    c.matcher_frozen = false;
    stage("train-cnn");
    exp.cnn_history = cmd_train_cnn(&c)?;
    stage("search-cnn");
    cmd_search_cnn(&c)?;
    eval_system(&c, "cnn", &mut exp)?;

    stage("train-e2e");
    exp.e2e_history = cmd_train_e2e(&c)?;
    stage("search-e2e");
    cmd_search_e2e(&c)?;
    eval_system(&c, E2E, &mut exp)?;

    if with_finetune {
        stage("feature fine-tuning");
        let mut f = c.clone();
        f.matcher_frozen = true;
        cmd_train_e2e(&f)?;
        f.features = FINETUNED.to_string();
        cmd_extract(&f)?;
        cmd_search_dtw(&f)?;
        eval_system(&f, &format!("dtw_{FINETUNED}"), &mut exp)?;
    }
    stage("done");
    fs::write(cfg.work_dir.join("summary.tsv"), exp.summary())?;
    Ok(exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;

    #[test]
    fn splits_partition_queries() {
        let splits: Vec<Split> = (0..8).map(split_of).collect();
        assert_eq!(
            splits,
            [
                Split::Train,
                Split::Test,
                Split::Dev,
                Split::Test,
                Split::Train,
                Split::Test,
                Split::Dev,
                Split::Test
            ]
        );
        assert_eq!(id_index("q017").unwrap(), 17);
        assert!(id_index("q").is_err());
    }

    #[test]
    fn grouping_round_trips() {
        let f = FeatureMatrix::new(1, 1, vec![0.0], FeatureKind::Raw).unwrap();
        let entries: Vec<Entry> = ["q000#0", "q001#0", "q001#1"].iter().map(|s| (s.to_string(), f.clone())).collect();
        let g = group_examples(entries.clone()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[1].examples.len(), 2);
        assert_eq!(ungroup(&g), entries);
        let bad: Vec<Entry> = ["q000#1"].iter().map(|s| (s.to_string(), f.clone())).collect();
        assert!(group_examples(bad).is_err());
    }
}
