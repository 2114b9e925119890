//! CNN classifier over similarity images.

use std::fmt::Write as _;
use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use qbe_gradkit::{
    adam_step, backward, cross_entropy_rows, forward, infer, read_checkpoint, write_checkpoint, AdamConfig,
    AdamState, LayerSpec, Mode, NetworkParams, NetworkSpec, Padding, Tensor,
};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dtwsearch::average_template;
use crate::error::{QbeError, Result};
use crate::features::FeatureMatrix;
use crate::simimage::{similarity_image, SimilarityMatrix};
use crate::util::{derive_seed, rng};

/// Index of the "query occurs" class.
pub const POSITIVE: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CnnArch {
    pub input_rows: usize,
    pub input_cols: usize,
    /// Max-pool the raw image before the first convolution.
    pub pre_pool: bool,
    pub channels: usize,
    /// Output channels of the last convolution.
    pub final_channels: usize,
    /// Same-padded conv pairs, each followed by pooling.
    pub same_blocks: usize,
    pub fc_hidden: usize,
    pub dropout: f32,
}

impl CnnArch {
    /// 100x800 input, 30 channels narrowing to 15, 60 hidden units.
    pub fn full() -> Self {
        Self {
            input_rows: 100,
            input_cols: 800,
            pre_pool: true,
            channels: 30,
            final_channels: 15,
            same_blocks: 3,
            fc_hidden: 60,
            dropout: 0.1,
        }
    }

    /// Same layer pattern on a small image, for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            input_rows: 16,
            input_cols: 32,
            pre_pool: false,
            channels: 3,
            final_channels: 2,
            same_blocks: 1,
            fc_hidden: 4,
            dropout: 0.1,
        }
    }

    fn conv(in_channels: usize, out_channels: usize, padding: Padding) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding,
        }
    }

    fn feature_layers(&self) -> Vec<LayerSpec> {
        let pool = LayerSpec::MaxPool2d { size: 2, stride: 2 };
        let drop = LayerSpec::Dropout { p: self.dropout };
        let c = self.channels;
        let mut layers = Vec::new();
        if self.pre_pool {
            layers.push(pool.clone());
            layers.push(drop.clone());
        }
        let mut cin = 1;
        for _ in 0..self.same_blocks {
            layers.extend([
                Self::conv(cin, c, Padding::Same),
                LayerSpec::Relu,
                Self::conv(c, c, Padding::Same),
                LayerSpec::Relu,
                pool.clone(),
                drop.clone(),
            ]);
            cin = c;
        }
        layers.extend([
            Self::conv(cin, c, Padding::Valid),
            LayerSpec::Relu,
            Self::conv(c, self.final_channels, Padding::Valid),
            LayerSpec::Relu,
            pool,
            drop,
        ]);
        layers
    }

    /// `[channels, rows, cols]` entering the first fully connected layer.
    pub fn fc_input_shape(&self) -> Result<Vec<usize>> {
        let spec = NetworkSpec::new(vec![1, self.input_rows, self.input_cols], self.feature_layers())?;
        Ok(spec.output_shape(&[1, self.input_rows, self.input_cols])?)
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        let fc_in: usize = self.fc_input_shape()?.iter().product();
        let mut layers = self.feature_layers();
        layers.extend([
            LayerSpec::Linear {
                inputs: fc_in,
                outputs: self.fc_hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                inputs: self.fc_hidden,
                outputs: 2,
            },
            LayerSpec::Softmax,
        ]);
        Ok(NetworkSpec::new(vec![1, self.input_rows, self.input_cols], layers)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_rows = {}", self.input_rows);
        let _ = writeln!(s, "input_cols = {}", self.input_cols);
        let _ = writeln!(s, "pre_pool = {}", self.pre_pool);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "final_channels = {}", self.final_channels);
        let _ = writeln!(s, "same_blocks = {}", self.same_blocks);
        let _ = writeln!(s, "fc_hidden = {}", self.fc_hidden);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| QbeError::Data(format!("cnn arch: {m}"));
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        Ok(Self {
            input_rows: num("input_rows")?,
            input_cols: num("input_cols")?,
            pre_pool: get("pre_pool")?.parse().map_err(|_| bad("bad `pre_pool`".into()))?,
            channels: num("channels")?,
            final_channels: num("final_channels")?,
            same_blocks: num("same_blocks")?,
            fc_hidden: num("fc_hidden")?,
            dropout: get("dropout")?.parse().map_err(|_| bad("bad `dropout`".into()))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CnnModel {
    pub arch: CnnArch,
    pub spec: NetworkSpec,
    pub params: NetworkParams,
}

impl CnnModel {
    pub fn build(arch: CnnArch, seed: u64) -> Result<Self> {
        let spec = arch.spec()?;
        let params = NetworkParams::init(&spec, &mut rng(seed));
        Ok(Self { arch, spec, params })
    }

    pub fn from_params(arch: CnnArch, params: NetworkParams) -> Result<Self> {
        let spec = arch.spec()?;
        params.check(&spec)?;
        Ok(Self { arch, spec, params })
    }

    fn image_tensor(&self, image: &SimilarityMatrix) -> Result<Tensor> {
        if (image.rows(), image.cols()) != (self.arch.input_rows, self.arch.input_cols) {
            return Err(QbeError::Data(format!(
                "image is {}x{}, network expects {}x{}",
                image.rows(),
                image.cols(),
                self.arch.input_rows,
                self.arch.input_cols
            )));
        }
        Ok(Tensor::new(vec![1, image.rows(), image.cols()], image.values().to_vec())?)
    }

    /// Positive-class probability in eval mode.
    pub fn score_pair(&self, image: &SimilarityMatrix) -> Result<f64> {
        let p = infer(&self.spec, &self.params, self.image_tensor(image)?)?;
        Ok(f64::from(p.data()[POSITIVE]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(BufWriter::new(File::create(path)?), &self.params.named(&self.spec))?;
        fs::write(crate::bnf::arch_path(path), self.arch.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(crate::bnf::arch_path(path))
            .map_err(|e| QbeError::Data(format!("cannot read arch sidecar of {}: {e}", path.display())))?;
        let arch = CnnArch::from_text(&text)?;
        let spec = arch.spec()?;
        let file = File::open(path).map_err(|e| QbeError::Data(format!("cannot open {}: {e}", path.display())))?;
        let params = NetworkParams::from_named(&spec, read_checkpoint(BufReader::new(file))?)?;
        Ok(Self { arch, spec, params })
    }
}

/// Averages the examples (already in matcher feature space) and scores the
/// resulting template against the utterance.
pub fn query_multi_example_score(model: &CnnModel, examples: &[FeatureMatrix], utterance: &FeatureMatrix) -> Result<f64> {
    let template = average_template(examples)?;
    let image = similarity_image(&template.0, utterance, model.arch.input_rows, model.arch.input_cols)?;
    model.score_pair(&image)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrialLabel {
    pub query: String,
    pub utterance: String,
    pub positive: bool,
}

/// All positives plus as many negatives drawn without replacement, shuffled.
pub fn balanced_epoch(labels: &[TrialLabel], seed: u64) -> Result<Vec<TrialLabel>> {
    let positives: Vec<&TrialLabel> = labels.iter().filter(|l| l.positive).collect();
    let negatives: Vec<&TrialLabel> = labels.iter().filter(|l| !l.positive).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(QbeError::Data(format!(
            "balanced epoch needs both classes: {} positives, {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    if negatives.len() < positives.len() {
        return Err(QbeError::Data(format!(
            "{} negatives cannot balance {} positives without replacement",
            negatives.len(),
            positives.len()
        )));
    }
    let mut r = rng(seed);
    let mut out: Vec<TrialLabel> = positives.into_iter().cloned().collect();
    let p = out.len();
    out.extend(negatives.choose_multiple(&mut r, p).map(|l| (*l).clone()));
    out.shuffle(&mut r);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch: 20,
            lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// Entry 0 is the loss before training.
    pub dev_loss: Vec<f64>,
    /// Epoch (1-based; 0 = initial parameters) whose parameters were kept.
    pub best_epoch: usize,
}

/// Source of network input images for labeled trials.
pub trait ImageSource: Sync {
    fn image(&self, trial: &TrialLabel) -> Result<SimilarityMatrix>;
}

impl<F> ImageSource for F
where
    F: Fn(&TrialLabel) -> Result<SimilarityMatrix> + Sync,
{
    fn image(&self, trial: &TrialLabel) -> Result<SimilarityMatrix> {
        self(trial)
    }
}

fn target(l: &TrialLabel) -> usize {
    if l.positive {
        POSITIVE
    } else {
        1 - POSITIVE
    }
}

/// Mean cross entropy in eval mode.
pub fn eval_loss(model: &CnnModel, images: &dyn ImageSource, trials: &[TrialLabel]) -> Result<f64> {
    let logits_spec = model.spec.without_softmax();
    let losses: Vec<f64> = trials
        .par_iter()
        .map(|t| {
            let x = model.image_tensor(&images.image(t)?)?;
            let logits = infer(&logits_spec, &model.params, x)?;
            Ok(cross_entropy_rows(&logits, &[target(t)])?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Mean loss and summed gradients over a batch, one image at a time.
fn batch_gradients(
    model: &CnnModel,
    images: &dyn ImageSource,
    batch: &[TrialLabel],
    seed: u64,
) -> Result<(f64, NetworkParams)> {
    let logits_spec = model.spec.without_softmax();
    let per_item: Vec<(f64, NetworkParams)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let x = model.image_tensor(&images.image(t)?)?;
            let mut r = rng(derive_seed(seed, i as u64));
            let (logits, tape) = forward(&logits_spec, &model.params, x, Mode::Train, &mut r)?;
            let (loss, g) = cross_entropy_rows(&logits, &[target(t)])?;
            Ok((loss, backward(&logits_spec, &model.params, tape, &g)?.params))
        })
        .collect::<Result<_>>()?;
    let mut total = NetworkParams::zeros_like(&logits_spec);
    let mut loss = 0.0;
    for (l, g) in &per_item {
        loss += l;
        total.add_assign(g);
    }
    let n = batch.len() as f32;
    total.scale(1.0 / n);
    Ok((loss / f64::from(n), total))
}

/// Adam on balanced epochs; keeps the parameters with the lowest balanced
/// dev loss (the initial ones included).
pub fn train_cnn(
    model: &mut CnnModel,
    images: &dyn ImageSource,
    train: &[TrialLabel],
    dev: &[TrialLabel],
    schedule: &TrainSchedule,
) -> Result<TrainHistory> {
    let dev_set = balanced_epoch(dev, derive_seed(schedule.seed, 0xdef))?;
    let mut opt = AdamState::new(&model.params, AdamConfig::with_lr(schedule.lr));
    let mut history = TrainHistory::default();
    let mut best = (eval_loss(model, images, &dev_set)?, model.params.clone());
    history.dev_loss.push(best.0);
    for epoch in 0..schedule.epochs {
        let epoch_seed = derive_seed(schedule.seed, 1 + epoch as u64);
        let items = balanced_epoch(train, epoch_seed)?;
        let mut total = 0.0;
        let batches = items.chunks(schedule.batch.max(1));
        let n_batches = batches.len();
        for (b, batch) in batches.enumerate() {
            let (loss, grads) = batch_gradients(model, images, batch, derive_seed(epoch_seed, b as u64))?;
            if !loss.is_finite() {
                return Err(QbeError::Numeric(format!("CNN training diverged in epoch {epoch}, batch {b}")));
            }
            total += loss;
            adam_step(&mut model.params, &grads, &mut opt, None)?;
        }
        let dev_loss = eval_loss(model, images, &dev_set)?;
        history.train_loss.push(total / n_batches.max(1) as f64);
        history.dev_loss.push(dev_loss);
        log::info!("cnn epoch {epoch}: train {:.4} dev {dev_loss:.4}", total / n_batches.max(1) as f64);
        if dev_loss < best.0 {
            best = (dev_loss, model.params.clone());
            history.best_epoch = epoch + 1;
        }
    }
    model.params = best.1;
    Ok(history)
}
