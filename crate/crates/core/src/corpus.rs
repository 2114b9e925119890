//! Deterministic synthetic multilingual corpus.
//!
//! Phones live in a shared latent space; each language observes them through
//! its own affine map (a shared base map plus a language-specific shift), so
//! representations learned on several languages transfer. Observations are
//! 13-dim "MFCC-like" frames whose first column is an energy term (high for
//! speech, low for silence) so the energy SAD applies unchanged.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::archive::{load_archive, save_archive};
use crate::error::{QbeError, Result};
use crate::features::{FeatureKind, FeatureMatrix};
use crate::scores::{load_ground_truth, save_ground_truth, GroundTruth};
use crate::util::{derive_seed, rng, Rng};

/// Observation dimensionality (energy plus 12 cepstrum-like terms).
pub const OBS_DIM: usize = 13;
/// Inventory index of silence; every language has it as class 0.
pub const SILENCE: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub languages: usize,
    /// Shared phones, silence excluded.
    pub inventory: usize,
    /// Phones per language, silence excluded.
    pub phones_per_language: usize,
    pub latent_dim: usize,
    /// Minimum distance between latent phone means.
    pub margin: f64,
    pub mean_scale: f64,
    pub latent_noise: f64,
    /// Size of each language's deviation from the shared observation map.
    pub language_shift: f64,
    pub obs_noise: f64,
    pub speech_energy: f64,
    pub silence_energy: f64,
    pub energy_noise: f64,
    pub phone_frames: (usize, usize),
    pub frames_per_language: usize,
    pub queries: usize,
    pub utterances: usize,
    pub positive_rate: f64,
    /// Every n-th query gets several examples (0 disables).
    pub multi_example_every: usize,
    pub examples_per_multi: usize,
    pub query_phones: (usize, usize),
    pub filler_phones: (usize, usize),
    pub fillers: (usize, usize),
    /// Maximum relative tempo change of a realization.
    pub tempo_warp: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            languages: 3,
            inventory: 24,
            phones_per_language: 14,
            latent_dim: 6,
            margin: 2.0,
            mean_scale: 1.6,
            latent_noise: 0.6,
            language_shift: 0.6,
            obs_noise: 0.3,
            speech_energy: 1.5,
            silence_energy: -3.0,
            energy_noise: 0.3,
            phone_frames: (3, 5),
            frames_per_language: 10_000,
            queries: 200,
            utterances: 500,
            positive_rate: 0.01,
            multi_example_every: 3,
            examples_per_multi: 3,
            query_phones: (5, 7),
            filler_phones: (3, 6),
            fillers: (1, 3),
            tempo_warp: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(QbeError::Config(m.to_string()));
        if self.languages == 0 {
            return bad("at least one language is required");
        }
        if self.phones_per_language + 1 < 5 {
            return bad("languages need at least 5 phone classes");
        }
        if self.phones_per_language > self.inventory {
            return bad("phones_per_language exceeds the inventory");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad("positive_rate must lie in (0, 1)");
        }
        if self.phone_frames.0 == 0 || self.phone_frames.0 > self.phone_frames.1 {
            return bad("invalid phone duration range");
        }
        if !(0.0..0.5).contains(&self.tempo_warp) {
            return bad("tempo_warp must lie in [0, 0.5)");
        }
        if self.query_phones.0 == 0 || self.query_phones.0 > self.query_phones.1 {
            return bad("invalid query length range");
        }
        Ok(())
    }
}

/// Latent phone means; index 0 is silence.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneInventory {
    pub means: Vec<Vec<f64>>,
}

impl PhoneInventory {
    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.means.iter().enumerate() {
            for b in &self.means[i + 1..] {
                best = best.min(dist(a, b));
            }
        }
        best
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthLanguage {
    pub id: String,
    /// Inventory indices; position is the class label, silence first.
    pub phones: Vec<usize>,
    /// Row-major `(OBS_DIM - 1) x latent_dim` map.
    pub mixing: Vec<f64>,
    pub offset: Vec<f64>,
}

impl SynthLanguage {
    pub fn classes(&self) -> usize {
        self.phones.len()
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Shared inventory plus `cfg.languages` observation maps.
pub fn gen_languages(cfg: &CorpusConfig) -> Result<(PhoneInventory, Vec<SynthLanguage>)> {
    cfg.validate()?;
    let mut r = rng(derive_seed(cfg.seed, 1));
    let ld = cfg.latent_dim;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.inventory + 1);
    let mut attempts = 0;
    while means.len() < cfg.inventory + 1 {
        attempts += 1;
        if attempts > 100_000 {
            return Err(QbeError::Config("cannot place phone means with the requested margin".into()));
        }
        let m: Vec<f64> = (0..ld).map(|_| cfg.mean_scale * gaussian(&mut r)).collect();
        if means.iter().all(|o| dist(o, &m) >= cfg.margin) {
            means.push(m);
        }
    }
    let inventory = PhoneInventory { means };
    assert!(inventory.min_distance() >= cfg.margin);

    let rows = OBS_DIM - 1;
    let scale = 1.0 / (ld as f64).sqrt();
    let base: Vec<f64> = (0..rows * ld).map(|_| scale * gaussian(&mut r)).collect();
    let mut langs = Vec::with_capacity(cfg.languages);
    for l in 0..cfg.languages {
        let mut lr = rng(derive_seed(cfg.seed, 100 + l as u64));
        let mixing = base
            .iter()
            .map(|b| b + cfg.language_shift * scale * gaussian(&mut lr))
            .collect();
        let offset = (0..rows).map(|_| 0.5 * cfg.language_shift * gaussian(&mut lr)).collect();
        let mut pool: Vec<usize> = (1..=cfg.inventory).collect();
        pool.shuffle(&mut lr);
        let mut phones = vec![SILENCE];
        phones.extend(pool.into_iter().take(cfg.phones_per_language));
        langs.push(SynthLanguage {
            id: format!("lang{l}"),
            phones,
            mixing,
            offset,
        });
    }
    Ok((inventory, langs))
}

/// Frame-level renderer shared by all generators.
struct Renderer<'a> {
    cfg: &'a CorpusConfig,
    inventory: &'a PhoneInventory,
}

impl Renderer<'_> {
    fn latent(&self, phone: usize, r: &mut Rng) -> Vec<f64> {
        self.inventory.means[phone]
            .iter()
            .map(|m| m + self.cfg.latent_noise * gaussian(r))
            .collect()
    }

    fn frame(&self, lang: &SynthLanguage, phone: usize, r: &mut Rng) -> Vec<f32> {
        let z = self.latent(phone, r);
        let ld = self.cfg.latent_dim;
        let energy = if phone == SILENCE {
            self.cfg.silence_energy
        } else {
            self.cfg.speech_energy
        };
        let mut out = Vec::with_capacity(OBS_DIM);
        out.push((energy + self.cfg.energy_noise * gaussian(r)) as f32);
        for k in 0..OBS_DIM - 1 {
            let row = &lang.mixing[k * ld..(k + 1) * ld];
            let v: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
                + lang.offset[k]
                + self.cfg.obs_noise * gaussian(r);
            out.push(v as f32);
        }
        out
    }

    /// Phone string with random per-phone durations; returns frames and
    /// per-frame inventory labels.
    fn render(&self, lang: &SynthLanguage, phones: &[usize], r: &mut Rng) -> (Vec<Vec<f32>>, Vec<usize>) {
        let (lo, hi) = self.cfg.phone_frames;
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        for &p in phones {
            for _ in 0..r.gen_range(lo..=hi) {
                frames.push(self.frame(lang, p, r));
                labels.push(p);
            }
        }
        (frames, labels)
    }

    fn silence(&self, lang: &SynthLanguage, frames: usize, r: &mut Rng) -> Vec<Vec<f32>> {
        (0..frames).map(|_| self.frame(lang, SILENCE, r)).collect()
    }
}

/// Resamples to `round(len * factor)` frames by repetition or deletion.
pub fn tempo_warp<T: Clone>(frames: &[T], factor: f64) -> Vec<T> {
    if frames.is_empty() {
        return Vec::new();
    }
    let target = ((frames.len() as f64 * factor).round() as usize).max(1);
    (0..target).map(|k| frames[k * frames.len() / target].clone()).collect()
}

/// Labeled phone sequences of one language.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneSequence {
    pub id: String,
    pub features: FeatureMatrix,
    /// Class index within the language (0 = silence).
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageData {
    pub language: String,
    pub classes: usize,
    pub train: Vec<PhoneSequence>,
    pub dev: Vec<PhoneSequence>,
}

impl LanguageData {
    pub fn train_frames(&self) -> usize {
        self.train.iter().map(|s| s.labels.len()).sum()
    }

    pub fn dev_frames(&self) -> usize {
        self.dev.iter().map(|s| s.labels.len()).sum()
    }
}

pub type PhoneDataset = Vec<LanguageData>;

/// Exactly `frames_per_language` labeled frames per language, sequences
/// split 90/10 into train and dev (by frame count).
pub fn gen_phone_dataset(
    cfg: &CorpusConfig,
    inventory: &PhoneInventory,
    langs: &[SynthLanguage],
) -> Result<PhoneDataset> {
    let renderer = Renderer { cfg, inventory };
    let dev_target = cfg.frames_per_language / 10;
    langs
        .iter()
        .enumerate()
        .map(|(li, lang)| {
            let mut r = rng(derive_seed(cfg.seed, 1000 + li as u64));
            let mut seqs = Vec::new();
            let mut total = 0;
            while total < cfg.frames_per_language {
                let n_phones = r.gen_range(4..=12);
                let mut phones = vec![SILENCE];
                phones.extend((0..n_phones).map(|_| lang.phones[r.gen_range(1..lang.phones.len())]));
                phones.push(SILENCE);
                let (mut frames, inv_labels) = renderer.render(lang, &phones, &mut r);
                let mut labels: Vec<usize> = inv_labels
                    .iter()
                    .map(|p| lang.phones.iter().position(|q| q == p).expect("language phone"))
                    .collect();
                let room = cfg.frames_per_language - total;
                frames.truncate(room);
                labels.truncate(room);
                total += labels.len();
                let id = format!("{}_s{:05}", lang.id, seqs.len());
                seqs.push(PhoneSequence {
                    id,
                    features: FeatureMatrix::from_rows(&frames, FeatureKind::Mfcc)?,
                    labels,
                });
            }
            // Dev takes trailing sequences, trimmed so the split is exact.
            let mut dev = Vec::new();
            let mut dev_frames = 0;
            while dev_frames < dev_target {
                let mut s = seqs.pop().expect("enough sequences");
                let need = dev_target - dev_frames;
                if s.labels.len() > need {
                    let keep = s.labels.len() - need;
                    let head = s.features.select(&(0..keep).collect::<Vec<_>>());
                    let tail = s.features.select(&(keep..s.labels.len()).collect::<Vec<_>>());
                    let tail_labels = s.labels.split_off(keep);
                    dev.push(PhoneSequence {
                        id: format!("{}b", s.id),
                        features: tail,
                        labels: tail_labels,
                    });
                    s.features = head;
                    dev_frames += need;
                    seqs.push(s);
                } else {
                    dev_frames += s.labels.len();
                    dev.push(s);
                }
            }
            dev.reverse();
            Ok(LanguageData {
                language: lang.id.clone(),
                classes: lang.classes(),
                train: seqs,
                dev,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthQuery {
    pub id: String,
    pub language: String,
    pub phones: Vec<usize>,
    pub examples: Vec<FeatureMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub query: String,
    /// Inclusive frame span.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub language: String,
    pub phones: Vec<usize>,
    pub features: FeatureMatrix,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub queries: Vec<SynthQuery>,
    pub utterances: Vec<SynthUtterance>,
    pub ground_truth: GroundTruth,
}

fn contains(hay: &[usize], needle: &[usize]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

fn random_word(lang: &SynthLanguage, range: (usize, usize), r: &mut Rng) -> Vec<usize> {
    let n = r.gen_range(range.0..=range.1);
    (0..n).map(|_| lang.phones[r.gen_range(1..lang.phones.len())]).collect()
}

/// Positives per query: `round(rate * utterances)`, at least one.
pub fn positives_per_query(cfg: &CorpusConfig) -> usize {
    ((cfg.positive_rate * cfg.utterances as f64).round() as usize).max(1)
}

pub fn gen_detection_set(
    cfg: &CorpusConfig,
    inventory: &PhoneInventory,
    langs: &[SynthLanguage],
) -> Result<DetectionSet> {
    cfg.validate()?;
    let renderer = Renderer { cfg, inventory };
    let mut r = rng(derive_seed(cfg.seed, 2));
    let n_lang = langs.len();

    // Lexicon: distinct words, none contained in another.
    let mut words: Vec<Vec<usize>> = Vec::with_capacity(cfg.queries);
    let mut attempts = 0;
    while words.len() < cfg.queries {
        attempts += 1;
        if attempts > 1_000_000 {
            return Err(QbeError::Config("cannot build a collision-free query lexicon".into()));
        }
        let lang = &langs[words.len() % n_lang];
        let w = random_word(lang, cfg.query_phones, &mut r);
        if words.iter().all(|o| !contains(o, &w) && !contains(&w, o)) {
            words.push(w);
        }
    }
    let query_lang = |q: usize| q % n_lang;
    let utt_lang = |u: usize| u % n_lang;

    let k = positives_per_query(cfg);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); cfg.utterances];
    for q in 0..cfg.queries {
        let pool: Vec<usize> = (0..cfg.utterances).filter(|&u| utt_lang(u) == query_lang(q)).collect();
        if pool.len() < k {
            return Err(QbeError::Config(format!(
                "language {} has {} utterances, fewer than {k} positives per query",
                query_lang(q),
                pool.len()
            )));
        }
        for &u in pool.choose_multiple(&mut r, k) {
            assigned[u].push(q);
        }
    }

    let mut queries = Vec::with_capacity(cfg.queries);
    for (q, word) in words.iter().enumerate() {
        let lang = &langs[query_lang(q)];
        let mut qr = rng(derive_seed(cfg.seed, 10_000 + q as u64));
        let n_examples = if cfg.multi_example_every > 0 && q % cfg.multi_example_every == cfg.multi_example_every - 1 {
            cfg.examples_per_multi.max(1)
        } else {
            1
        };
        let mut examples = Vec::with_capacity(n_examples);
        for _ in 0..n_examples {
            let (body, _) = renderer.render(lang, word, &mut qr);
            let body = tempo_warp(&body, 1.0 + qr.gen_range(-cfg.tempo_warp..=cfg.tempo_warp));
            let mut frames = renderer.silence(lang, qr.gen_range(4..=8), &mut qr);
            frames.extend(body);
            frames.extend(renderer.silence(lang, qr.gen_range(4..=8), &mut qr));
            examples.push(FeatureMatrix::from_rows(&frames, FeatureKind::Mfcc)?);
        }
        queries.push(SynthQuery {
            id: format!("q{q:03}"),
            language: lang.id.clone(),
            phones: word.clone(),
            examples,
        });
    }

    let mut utterances = Vec::with_capacity(cfg.utterances);
    for (u, own) in assigned.iter().enumerate() {
        let lang = &langs[utt_lang(u)];
        let mut ur = rng(derive_seed(cfg.seed, 20_000 + u as u64));
        let own_set: HashSet<usize> = own.iter().copied().collect();
        // Word order: assigned queries and fillers, shuffled; fillers are
        // redrawn until no foreign query appears anywhere in the string.
        let mut tries = 0;
        let items = loop {
            tries += 1;
            if tries > 10_000 {
                return Err(QbeError::Config(format!("utterance {u}: cannot avoid query collisions")));
            }
            let n_fill = ur.gen_range(cfg.fillers.0..=cfg.fillers.1);
            let mut items: Vec<(Option<usize>, Vec<usize>)> =
                own.iter().map(|&q| (Some(q), words[q].clone())).collect();
            items.extend((0..n_fill).map(|_| (None, random_word(lang, cfg.filler_phones, &mut ur))));
            items.shuffle(&mut ur);
            let flat: Vec<usize> = items.iter().flat_map(|(_, w)| w.iter().copied()).collect();
            let clash = words
                .iter()
                .enumerate()
                .any(|(q, w)| !own_set.contains(&q) && contains(&flat, w));
            if !clash {
                break items;
            }
        };

        let mut frames = renderer.silence(lang, ur.gen_range(5..=10), &mut ur);
        let mut phones = Vec::new();
        let mut annotations = Vec::new();
        for (i, (q, w)) in items.iter().enumerate() {
            if i > 0 {
                frames.extend(renderer.silence(lang, ur.gen_range(0..=3), &mut ur));
            }
            let (mut body, _) = renderer.render(lang, w, &mut ur);
            if let Some(q) = q {
                body = tempo_warp(&body, 1.0 + ur.gen_range(-cfg.tempo_warp..=cfg.tempo_warp));
                annotations.push(Annotation {
                    query: queries[*q].id.clone(),
                    start: frames.len(),
                    end: frames.len() + body.len() - 1,
                });
            }
            frames.extend(body);
            phones.extend(w.iter().copied());
        }
        frames.extend(renderer.silence(lang, ur.gen_range(5..=10), &mut ur));
        utterances.push(SynthUtterance {
            id: format!("u{u:04}"),
            language: lang.id.clone(),
            phones,
            features: FeatureMatrix::from_rows(&frames, FeatureKind::Mfcc)?,
            annotations,
        });
    }

    let mut rows = Vec::with_capacity(cfg.queries * cfg.utterances);
    for (qi, q) in queries.iter().enumerate() {
        for (ui, u) in utterances.iter().enumerate() {
            rows.push((q.id.clone(), u.id.clone(), assigned[ui].contains(&qi)));
        }
    }
    Ok(DetectionSet {
        queries,
        utterances,
        ground_truth: GroundTruth::from_rows(rows),
    })
}

/// Everything the generator produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub inventory: PhoneInventory,
    pub languages: Vec<SynthLanguage>,
    pub phones: PhoneDataset,
    pub detection: DetectionSet,
}

pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    let (inventory, languages) = gen_languages(cfg)?;
    let phones = gen_phone_dataset(cfg, &inventory, &languages)?;
    let detection = gen_detection_set(cfg, &inventory, &languages)?;
    Ok(Corpus {
        config: cfg.clone(),
        inventory,
        languages,
        phones,
        detection,
    })
}

// ---------------------------------------------------------------- on disk

pub const MANIFEST: &str = "manifest.txt";
pub const QUERIES: &str = "queries.qbfa";
pub const UTTERANCES: &str = "utterances.qbfa";
pub const GROUND_TRUTH: &str = "ground_truth.tsv";
pub const ANNOTATIONS: &str = "annotations.tsv";

/// Archive id of the `k`-th example of a query.
pub fn example_id(query: &str, k: usize) -> String {
    format!("{query}#{k}")
}

/// Splits an example id back into query id and index.
pub fn parse_example_id(id: &str) -> (&str, usize) {
    match id.rsplit_once('#') {
        Some((q, k)) => (q, k.parse().unwrap_or(0)),
        None => (id, 0),
    }
}

fn write_labels(path: &Path, seqs: &[PhoneSequence]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in seqs {
        let labels: Vec<String> = s.labels.iter().map(usize::to_string).collect();
        writeln!(w, "{} {}", s.id, labels.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let file = fs::File::open(path)
        .map_err(|e| QbeError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let mut it = line.split_whitespace();
        let Some(id) = it.next() else { continue };
        let labels = it
            .map(|t| t.parse().map_err(|_| QbeError::Data(format!("bad label `{t}` in {}", path.display()))))
            .collect::<Result<Vec<usize>>>()?;
        out.push((id.to_string(), labels));
    }
    Ok(out)
}

fn manifest_text(c: &Corpus) -> String {
    let cfg = &c.config;
    let mut s = String::new();
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "obs_dim = {OBS_DIM}");
    let langs: Vec<&str> = c.languages.iter().map(|l| l.id.as_str()).collect();
    let _ = writeln!(s, "languages = {}", langs.join(","));
    let classes: Vec<String> = c.languages.iter().map(|l| l.classes().to_string()).collect();
    let _ = writeln!(s, "classes = {}", classes.join(","));
    let _ = writeln!(s, "frames_per_language = {}", cfg.frames_per_language);
    let _ = writeln!(s, "queries = {}", c.detection.queries.len());
    let _ = writeln!(s, "utterances = {}", c.detection.utterances.len());
    let _ = writeln!(s, "positives_per_query = {}", positives_per_query(cfg));
    let _ = writeln!(s, "positive_rate = {}", cfg.positive_rate);
    s
}

pub fn write_corpus(dir: &Path, c: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), manifest_text(c))?;
    for l in &c.phones {
        for (split, seqs) in [("train", &l.train), ("dev", &l.dev)] {
            let entries: Vec<_> = seqs.iter().map(|s| (s.id.clone(), s.features.clone())).collect();
            save_archive(&dir.join(format!("{}_{split}.qbfa", l.language)), &entries)?;
            write_labels(&dir.join(format!("{}_{split}.labels", l.language)), seqs)?;
        }
    }
    let examples: Vec<_> = c
        .detection
        .queries
        .iter()
        .flat_map(|q| {
            q.examples
                .iter()
                .enumerate()
                .map(move |(k, e)| (example_id(&q.id, k), e.clone()))
        })
        .collect();
    save_archive(&dir.join(QUERIES), &examples)?;
    let utts: Vec<_> = c
        .detection
        .utterances
        .iter()
        .map(|u| (u.id.clone(), u.features.clone()))
        .collect();
    save_archive(&dir.join(UTTERANCES), &utts)?;
    save_ground_truth(&dir.join(GROUND_TRUTH), &c.detection.ground_truth)?;
    let mut ann = String::new();
    for u in &c.detection.utterances {
        for a in &u.annotations {
            let _ = writeln!(ann, "{}\t{}\t{}\t{}", a.query, u.id, a.start, a.end);
        }
    }
    fs::write(dir.join(ANNOTATIONS), ann)?;
    Ok(())
}

/// Flat `key = value` pairs.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| QbeError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

/// Phone data of the named language, as written by [`write_corpus`].
pub fn load_language(dir: &Path, language: &str, classes: usize) -> Result<LanguageData> {
    let load = |split: &str| -> Result<Vec<PhoneSequence>> {
        let feats = load_archive(&dir.join(format!("{language}_{split}.qbfa")))?;
        let labels = read_labels(&dir.join(format!("{language}_{split}.labels")))?;
        if feats.len() != labels.len() {
            return Err(QbeError::Data(format!("{language}_{split}: archive and labels disagree")));
        }
        feats
            .into_iter()
            .zip(labels)
            .map(|((id, features), (lid, labels))| {
                if id != lid || labels.len() != features.frames() || labels.iter().any(|&c| c >= classes) {
                    return Err(QbeError::Data(format!("{language}_{split}: bad labels for {id}")));
                }
                Ok(PhoneSequence { id, features, labels })
            })
            .collect()
    };
    Ok(LanguageData {
        language: language.to_string(),
        classes,
        train: load("train")?,
        dev: load("dev")?,
    })
}

/// Languages and class counts listed in the manifest.
pub fn manifest_languages(dir: &Path) -> Result<Vec<(String, usize)>> {
    let m = read_manifest(dir)?;
    let get = |k: &str| {
        m.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| QbeError::Data(format!("manifest lacks `{k}`")))
    };
    let names = get("languages")?;
    let classes = get("classes")?;
    let classes: Vec<usize> = classes
        .split(',')
        .map(|c| c.trim().parse().map_err(|_| QbeError::Data("bad class count in manifest".into())))
        .collect::<Result<_>>()?;
    let names: Vec<String> = names.split(',').map(|s| s.trim().to_string()).collect();
    if names.len() != classes.len() {
        return Err(QbeError::Data("manifest language and class lists differ".into()));
    }
    Ok(names.into_iter().zip(classes).collect())
}

pub fn load_ground_truth_in(dir: &Path) -> Result<GroundTruth> {
    load_ground_truth(&dir.join(GROUND_TRUTH))
}
