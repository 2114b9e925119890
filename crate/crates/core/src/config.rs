//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors, as are
//! repeated keys within one file; `--set` style overrides apply afterwards.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bnf::BnfSchedule;
use crate::cnnmatch::{CnnArch, TrainSchedule};
use crate::corpus::CorpusConfig;
use crate::error::{QbeError, Result};
use crate::evalkit::{CnxeAveraging, CnxeConfig, TwvConfig};
use crate::util::{derive_seed, fmt_f64, parse_f64};

/// Which queries a search command scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySet {
    /// Held-out queries only.
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub work_dir: PathBuf,

    pub corpus_languages: usize,
    pub corpus_queries: usize,
    pub corpus_utterances: usize,
    pub corpus_positive_rate: f64,
    pub corpus_frames_per_language: usize,
    pub corpus_obs_noise: f64,
    pub corpus_latent_noise: f64,
    pub corpus_language_shift: f64,

    pub bnf_hidden: usize,
    pub bnf_epochs: usize,
    pub bnf_batch: usize,
    pub bnf_lr: f64,
    pub bnf_lr_floor: f64,
    pub bnf_dropout: f64,

    pub cnn_rows: usize,
    pub cnn_cols: usize,
    pub cnn_pre_pool: bool,
    pub cnn_channels: usize,
    pub cnn_final_channels: usize,
    pub cnn_blocks: usize,
    pub cnn_fc_hidden: usize,
    pub cnn_dropout: f64,
    pub cnn_epochs: usize,
    pub cnn_batch: usize,
    pub cnn_lr: f64,

    pub e2e_epochs: usize,
    pub e2e_batch: usize,
    pub e2e_lr: f64,
    pub freeze_spec: usize,
    pub matcher_frozen: bool,

    /// Bottleneck model whose features a command uses: `multi`, a language
    /// id for a monolingual model, or `e2e` for a fine-tuned extractor.
    pub features: String,
    pub search_queries: QuerySet,
    /// Score file for `eval`; defaults to the one named by `system`.
    pub scores: Option<PathBuf>,
    /// Ground truth for `eval`; defaults to the corpus one.
    pub ground_truth: Option<PathBuf>,
    /// Name used for eval outputs and the default score file.
    pub system: String,

    pub twv_cost_fa: f64,
    pub twv_cost_miss: f64,
    pub twv_prior: Option<f64>,
    pub cnxe_averaging: CnxeAveraging,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let twv = TwvConfig::default();
        Self {
            seed: 1,
            corpus_dir: "corpus".into(),
            work_dir: "work".into(),
            corpus_languages: corpus.languages,
            corpus_queries: corpus.queries,
            corpus_utterances: corpus.utterances,
            corpus_positive_rate: corpus.positive_rate,
            corpus_frames_per_language: corpus.frames_per_language,
            corpus_obs_noise: corpus.obs_noise,
            corpus_latent_noise: corpus.latent_noise,
            corpus_language_shift: corpus.language_shift,
            bnf_hidden: 256,
            bnf_epochs: 15,
            bnf_batch: 255,
            bnf_lr: 1e-3,
            bnf_lr_floor: 1e-4,
            bnf_dropout: 0.1,
            cnn_rows: 32,
            cnn_cols: 128,
            cnn_pre_pool: false,
            cnn_channels: 8,
            cnn_final_channels: 4,
            cnn_blocks: 2,
            cnn_fc_hidden: 16,
            cnn_dropout: 0.1,
            cnn_epochs: 15,
            cnn_batch: 20,
            cnn_lr: 1e-4,
            e2e_epochs: 5,
            e2e_batch: 20,
            e2e_lr: 1e-4,
            freeze_spec: 0,
            matcher_frozen: false,
            features: "multi".into(),
            search_queries: QuerySet::Test,
            scores: None,
            ground_truth: None,
            system: "dtw_multi".into(),
            twv_cost_fa: twv.cost_fa,
            twv_cost_miss: twv.cost_miss,
            twv_prior: twv.prior,
            cnxe_averaging: CnxeAveraging::Pooled,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "corpus_dir",
    "work_dir",
    "corpus_languages",
    "corpus_queries",
    "corpus_utterances",
    "corpus_positive_rate",
    "corpus_frames_per_language",
    "corpus_obs_noise",
    "corpus_latent_noise",
    "corpus_language_shift",
    "bnf_hidden",
    "bnf_epochs",
    "bnf_batch",
    "bnf_lr",
    "bnf_lr_floor",
    "bnf_dropout",
    "cnn_rows",
    "cnn_cols",
    "cnn_pre_pool",
    "cnn_channels",
    "cnn_final_channels",
    "cnn_blocks",
    "cnn_fc_hidden",
    "cnn_dropout",
    "cnn_epochs",
    "cnn_batch",
    "cnn_lr",
    "e2e_epochs",
    "e2e_batch",
    "e2e_lr",
    "freeze_spec",
    "matcher_frozen",
    "features",
    "search_queries",
    "scores",
    "ground_truth",
    "system",
    "twv_cost_fa",
    "twv_cost_miss",
    "twv_prior",
    "cnxe_averaging",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| QbeError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn real(key: &str, value: &str) -> Result<f64> {
    parse_f64(value).ok_or_else(|| QbeError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| value.into())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "corpus_dir" => self.corpus_dir = v.into(),
            "work_dir" => self.work_dir = v.into(),
            "corpus_languages" => self.corpus_languages = parse(key, v)?,
            "corpus_queries" => self.corpus_queries = parse(key, v)?,
            "corpus_utterances" => self.corpus_utterances = parse(key, v)?,
            "corpus_positive_rate" => self.corpus_positive_rate = real(key, v)?,
            "corpus_frames_per_language" => self.corpus_frames_per_language = parse(key, v)?,
            "corpus_obs_noise" => self.corpus_obs_noise = real(key, v)?,
            "corpus_latent_noise" => self.corpus_latent_noise = real(key, v)?,
            "corpus_language_shift" => self.corpus_language_shift = real(key, v)?,
            "bnf_hidden" => self.bnf_hidden = parse(key, v)?,
            "bnf_epochs" => self.bnf_epochs = parse(key, v)?,
            "bnf_batch" => self.bnf_batch = parse(key, v)?,
            "bnf_lr" => self.bnf_lr = real(key, v)?,
            "bnf_lr_floor" => self.bnf_lr_floor = real(key, v)?,
            "bnf_dropout" => self.bnf_dropout = real(key, v)?,
            "cnn_rows" => self.cnn_rows = parse(key, v)?,
            "cnn_cols" => self.cnn_cols = parse(key, v)?,
            "cnn_pre_pool" => self.cnn_pre_pool = parse(key, v)?,
            "cnn_channels" => self.cnn_channels = parse(key, v)?,
            "cnn_final_channels" => self.cnn_final_channels = parse(key, v)?,
            "cnn_blocks" => self.cnn_blocks = parse(key, v)?,
            "cnn_fc_hidden" => self.cnn_fc_hidden = parse(key, v)?,
            "cnn_dropout" => self.cnn_dropout = real(key, v)?,
            "cnn_epochs" => self.cnn_epochs = parse(key, v)?,
            "cnn_batch" => self.cnn_batch = parse(key, v)?,
            "cnn_lr" => self.cnn_lr = real(key, v)?,
            "e2e_epochs" => self.e2e_epochs = parse(key, v)?,
            "e2e_batch" => self.e2e_batch = parse(key, v)?,
            "e2e_lr" => self.e2e_lr = real(key, v)?,
            "freeze_spec" => self.freeze_spec = parse(key, v)?,
            "matcher_frozen" => self.matcher_frozen = parse(key, v)?,
            "features" => self.features = v.to_string(),
            "search_queries" => {
                self.search_queries = match v {
                    "test" => QuerySet::Test,
                    "all" => QuerySet::All,
                    _ => return Err(QbeError::Config(format!("search_queries must be test or all, got `{v}`"))),
                }
            }
            "scores" => self.scores = optional_path(v),
            "ground_truth" => self.ground_truth = optional_path(v),
            "system" => self.system = v.to_string(),
            "twv_cost_fa" => self.twv_cost_fa = real(key, v)?,
            "twv_cost_miss" => self.twv_cost_miss = real(key, v)?,
            "twv_prior" => self.twv_prior = if v.is_empty() { None } else { Some(real(key, v)?) },
            "cnxe_averaging" => {
                self.cnxe_averaging = match v {
                    "pooled" => CnxeAveraging::Pooled,
                    "per_query" => CnxeAveraging::PerQuery,
                    _ => return Err(QbeError::Config(format!("cnxe_averaging must be pooled or per_query, got `{v}`"))),
                }
            }
            other => return Err(QbeError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| QbeError::Config(format!("line {}: expected key = value", n + 1)))?;
            if !seen.insert(k.trim().to_string()) {
                return Err(QbeError::Config(format!("line {}: `{}` given twice", n + 1, k.trim())));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| QbeError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| QbeError::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("corpus_dir", self.corpus_dir.display().to_string());
        put("work_dir", self.work_dir.display().to_string());
        put("corpus_languages", self.corpus_languages.to_string());
        put("corpus_queries", self.corpus_queries.to_string());
        put("corpus_utterances", self.corpus_utterances.to_string());
        put("corpus_positive_rate", fmt_f64(self.corpus_positive_rate));
        put("corpus_frames_per_language", self.corpus_frames_per_language.to_string());
        put("corpus_obs_noise", fmt_f64(self.corpus_obs_noise));
        put("corpus_latent_noise", fmt_f64(self.corpus_latent_noise));
        put("corpus_language_shift", fmt_f64(self.corpus_language_shift));
        put("bnf_hidden", self.bnf_hidden.to_string());
        put("bnf_epochs", self.bnf_epochs.to_string());
        put("bnf_batch", self.bnf_batch.to_string());
        put("bnf_lr", fmt_f64(self.bnf_lr));
        put("bnf_lr_floor", fmt_f64(self.bnf_lr_floor));
        put("bnf_dropout", fmt_f64(self.bnf_dropout));
        put("cnn_rows", self.cnn_rows.to_string());
        put("cnn_cols", self.cnn_cols.to_string());
        put("cnn_pre_pool", self.cnn_pre_pool.to_string());
        put("cnn_channels", self.cnn_channels.to_string());
        put("cnn_final_channels", self.cnn_final_channels.to_string());
        put("cnn_blocks", self.cnn_blocks.to_string());
        put("cnn_fc_hidden", self.cnn_fc_hidden.to_string());
        put("cnn_dropout", fmt_f64(self.cnn_dropout));
        put("cnn_epochs", self.cnn_epochs.to_string());
        put("cnn_batch", self.cnn_batch.to_string());
        put("cnn_lr", fmt_f64(self.cnn_lr));
        put("e2e_epochs", self.e2e_epochs.to_string());
        put("e2e_batch", self.e2e_batch.to_string());
        put("e2e_lr", fmt_f64(self.e2e_lr));
        put("freeze_spec", self.freeze_spec.to_string());
        put("matcher_frozen", self.matcher_frozen.to_string());
        put("features", self.features.clone());
        put(
            "search_queries",
            match self.search_queries {
                QuerySet::Test => "test".into(),
                QuerySet::All => "all".into(),
            },
        );
        put("scores", self.scores.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put(
            "ground_truth",
            self.ground_truth.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("system", self.system.clone());
        put("twv_cost_fa", fmt_f64(self.twv_cost_fa));
        put("twv_cost_miss", fmt_f64(self.twv_cost_miss));
        put("twv_prior", self.twv_prior.map(fmt_f64).unwrap_or_default());
        put(
            "cnxe_averaging",
            match self.cnxe_averaging {
                CnxeAveraging::Pooled => "pooled".into(),
                CnxeAveraging::PerQuery => "per_query".into(),
            },
        );
        s
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            seed: derive_seed(self.seed, 10),
            languages: self.corpus_languages,
            queries: self.corpus_queries,
            utterances: self.corpus_utterances,
            positive_rate: self.corpus_positive_rate,
            frames_per_language: self.corpus_frames_per_language,
            obs_noise: self.corpus_obs_noise,
            latent_noise: self.corpus_latent_noise,
            language_shift: self.corpus_language_shift,
            ..CorpusConfig::default()
        }
    }

    pub fn bnf_schedule(&self) -> BnfSchedule {
        BnfSchedule {
            epochs: self.bnf_epochs,
            batch: self.bnf_batch,
            lr: self.bnf_lr,
            lr_floor: self.bnf_lr_floor,
            seed: derive_seed(self.seed, 20),
        }
    }

    pub fn cnn_arch(&self) -> CnnArch {
        CnnArch {
            input_rows: self.cnn_rows,
            input_cols: self.cnn_cols,
            pre_pool: self.cnn_pre_pool,
            channels: self.cnn_channels,
            final_channels: self.cnn_final_channels,
            same_blocks: self.cnn_blocks,
            fc_hidden: self.cnn_fc_hidden,
            dropout: self.cnn_dropout as f32,
        }
    }

    pub fn cnn_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.cnn_epochs,
            batch: self.cnn_batch,
            lr: self.cnn_lr,
            seed: derive_seed(self.seed, 30),
        }
    }

    pub fn e2e_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.e2e_epochs,
            batch: self.e2e_batch,
            lr: self.e2e_lr,
            seed: derive_seed(self.seed, 40),
        }
    }

    pub fn twv(&self) -> TwvConfig {
        TwvConfig {
            cost_fa: self.twv_cost_fa,
            cost_miss: self.twv_cost_miss,
            prior: self.twv_prior,
        }
    }

    pub fn cnxe(&self) -> CnxeConfig {
        CnxeConfig {
            prior: self.twv_prior,
            averaging: self.cnxe_averaging,
        }
    }

    /// Checks value ranges; path existence is checked by each command.
    pub fn validate(&self) -> Result<()> {
        self.corpus().validate()?;
        let bad = |m: String| Err(QbeError::Config(m));
        if self.bnf_hidden == 0 || self.bnf_batch == 0 || self.cnn_batch == 0 || self.e2e_batch == 0 {
            return bad("layer widths and batch sizes must be positive".into());
        }
        for (k, v) in [("bnf_lr", self.bnf_lr), ("cnn_lr", self.cnn_lr), ("e2e_lr", self.e2e_lr)] {
            if !(v > 0.0) {
                return bad(format!("`{k}` must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.bnf_dropout) || !(0.0..1.0).contains(&self.cnn_dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if self.bnf_lr_floor > self.bnf_lr {
            return bad("bnf_lr_floor exceeds bnf_lr".into());
        }
        if let Some(p) = self.twv_prior {
            if !(p > 0.0 && p < 1.0) {
                return bad("twv_prior must lie in (0, 1)".into());
            }
        }
        if self.freeze_spec > crate::e2e::MAX_FREEZE {
            return bad(format!("freeze_spec must be at most {}", crate::e2e::MAX_FREEZE));
        }
        self.cnn_arch().spec()?;
        Ok(())
    }
}
