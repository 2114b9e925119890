//! Bottleneck feature networks with one softmax head per language.
//!
//! The network is kept as three parts so multitask training and the
//! end-to-end model can reuse them: the extractor (hidden layers up to and
//! including the linear bottleneck), one post-bottleneck hidden layer, and a
//! classification head per language.

use std::fmt::Write as _;
use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use qbe_gradkit::{
    adam_step, backward, cross_entropy_rows, forward, infer, read_checkpoint, write_checkpoint, AdamConfig,
    AdamState, LayerSpec, Mode, NetworkParams, NetworkSpec, Tensor,
};
use rand::seq::SliceRandom;

use crate::corpus::LanguageData;
use crate::error::{QbeError, Result};
use crate::features::{network_input, FeatureKind, FeatureMatrix};
use crate::util::{derive_seed, rng, Rng};

pub const INPUT_DIM: usize = 507;
pub const BOTTLENECK_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageHead {
    pub language: String,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnfArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub shared_layers: usize,
    pub bottleneck: usize,
    pub dropout: f32,
    pub heads: Vec<LanguageHead>,
}

impl BnfArch {
    /// Hidden-layer count grows with the number of languages: 3 for one,
    /// 4 for up to three, 5 beyond.
    pub fn for_heads(heads: Vec<LanguageHead>, hidden: usize) -> Self {
        let shared_layers = match heads.len() {
            0 | 1 => 3,
            2 | 3 => 4,
            _ => 5,
        };
        Self {
            input_dim: INPUT_DIM,
            hidden,
            shared_layers,
            bottleneck: BOTTLENECK_DIM,
            dropout: 0.1,
            heads,
        }
    }

    /// 1024-unit layers.
    pub fn full(heads: Vec<LanguageHead>) -> Self {
        Self::for_heads(heads, 1024)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(QbeError::Config("bottleneck network needs at least one head".into()));
        }
        if let Some(h) = self.heads.iter().find(|h| h.classes < 2) {
            return Err(QbeError::Config(format!("head {} has fewer than 2 classes", h.language)));
        }
        if self.shared_layers == 0 || self.hidden == 0 || self.bottleneck == 0 || self.input_dim == 0 {
            return Err(QbeError::Config("bottleneck network sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(QbeError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Input through the linear bottleneck.
    pub fn extractor_spec(&self) -> NetworkSpec {
        let mut layers = Vec::new();
        let mut width = self.input_dim;
        for _ in 0..self.shared_layers {
            layers.push(LayerSpec::LayerNorm { dim: width });
            layers.push(LayerSpec::Linear {
                inputs: width,
                outputs: self.hidden,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dropout { p: self.dropout });
            width = self.hidden;
        }
        layers.push(LayerSpec::LayerNorm { dim: width });
        layers.push(LayerSpec::Linear {
            inputs: width,
            outputs: self.bottleneck,
        });
        NetworkSpec::new(vec![0, self.input_dim], layers).expect("dense layers are always valid")
    }

    pub fn post_spec(&self) -> NetworkSpec {
        NetworkSpec::new(
            vec![0, self.bottleneck],
            vec![
                LayerSpec::LayerNorm { dim: self.bottleneck },
                LayerSpec::Linear {
                    inputs: self.bottleneck,
                    outputs: self.hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { p: self.dropout },
            ],
        )
        .expect("dense layers are always valid")
    }

    pub fn head_spec(&self, classes: usize) -> NetworkSpec {
        NetworkSpec::new(
            vec![0, self.hidden],
            vec![
                LayerSpec::LayerNorm { dim: self.hidden },
                LayerSpec::Linear {
                    inputs: self.hidden,
                    outputs: classes,
                },
            ],
        )
        .expect("dense layers are always valid")
    }

    /// Number of (layer norm, linear) pairs in the extractor.
    pub fn extractor_blocks(&self) -> usize {
        self.shared_layers + 1
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_dim = {}", self.input_dim);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "shared_layers = {}", self.shared_layers);
        let _ = writeln!(s, "bottleneck = {}", self.bottleneck);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let heads: Vec<String> = self.heads.iter().map(|h| format!("{}:{}", h.language, h.classes)).collect();
        let _ = writeln!(s, "heads = {}", heads.join(","));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| QbeError::Data(format!("bottleneck arch: {m}"));
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let heads = get("heads")?
            .split(',')
            .map(|h| {
                let (l, c) = h.split_once(':').ok_or_else(|| bad(format!("bad head `{h}`")))?;
                Ok(LanguageHead {
                    language: l.to_string(),
                    classes: c.parse().map_err(|_| bad(format!("bad head `{h}`")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let arch = Self {
            input_dim: num("input_dim")?,
            hidden: num("hidden")?,
            shared_layers: num("shared_layers")?,
            bottleneck: num("bottleneck")?,
            dropout: get("dropout")?.parse().map_err(|_| bad("bad `dropout`".into()))?,
            heads,
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug)]
pub struct BnfModel {
    pub arch: BnfArch,
    pub extractor: NetworkParams,
    pub post: NetworkParams,
    pub heads: Vec<NetworkParams>,
}

impl BnfModel {
    pub fn build(arch: BnfArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng(seed);
        let extractor = NetworkParams::init(&arch.extractor_spec(), &mut r);
        let post = NetworkParams::init(&arch.post_spec(), &mut r);
        let heads = arch
            .heads
            .iter()
            .map(|h| NetworkParams::init(&arch.head_spec(h.classes), &mut r))
            .collect();
        Ok(Self {
            arch,
            extractor,
            post,
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.extractor.scalar_count()
            + self.post.scalar_count()
            + self.heads.iter().map(NetworkParams::scalar_count).sum::<usize>()
    }

    /// Bottleneck features, one output frame per input frame.
    pub fn extract_bottleneck(&self, f: &FeatureMatrix) -> Result<FeatureMatrix> {
        extract_with(&self.arch, &self.extractor, f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named = Vec::new();
        fn prefix(p: &str, v: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
            v.into_iter().map(|(n, t)| (format!("{p}.{n}"), t)).collect()
        }
        named.extend(prefix("extractor", self.extractor.named(&self.arch.extractor_spec())));
        named.extend(prefix("post", self.post.named(&self.arch.post_spec())));
        for (i, (h, p)) in self.arch.heads.iter().zip(&self.heads).enumerate() {
            named.extend(prefix(&format!("head{i}"), p.named(&self.arch.head_spec(h.classes))));
        }
        write_checkpoint(BufWriter::new(File::create(path)?), &named)?;
        fs::write(arch_path(path), self.arch.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(arch_path(path))
            .map_err(|e| QbeError::Data(format!("cannot read arch sidecar of {}: {e}", path.display())))?;
        let arch = BnfArch::from_text(&text)?;
        let file = File::open(path).map_err(|e| QbeError::Data(format!("cannot open {}: {e}", path.display())))?;
        let named = read_checkpoint(BufReader::new(file))?;
        let take = |prefix: &str| -> Vec<(String, Tensor)> {
            named
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&format!("{prefix}.")).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        let extractor = NetworkParams::from_named(&arch.extractor_spec(), take("extractor"))?;
        let post = NetworkParams::from_named(&arch.post_spec(), take("post"))?;
        let heads = arch
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| NetworkParams::from_named(&arch.head_spec(h.classes), take(&format!("head{i}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            arch,
            extractor,
            post,
            heads,
        })
    }
}

pub fn arch_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".arch");
    s.into()
}

/// Extractor forward in eval mode on a whole file.
pub fn extract_with(arch: &BnfArch, extractor: &NetworkParams, f: &FeatureMatrix) -> Result<FeatureMatrix> {
    if f.dim() != arch.input_dim {
        return Err(QbeError::DimMismatch {
            left: f.dim(),
            right: arch.input_dim,
        });
    }
    if f.frames() == 0 {
        return FeatureMatrix::new(0, arch.bottleneck, Vec::new(), FeatureKind::Bottleneck);
    }
    let x = Tensor::new(vec![f.frames(), f.dim()], f.values().to_vec())?;
    let y = infer(&arch.extractor_spec(), extractor, x)?;
    FeatureMatrix::new(f.frames(), arch.bottleneck, y.into_data(), FeatureKind::Bottleneck)
}

// ---------------------------------------------------------------- data

/// Context-stacked frames with labels, row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameSet {
    pub dim: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageFrames {
    pub language: String,
    pub classes: usize,
    pub train: FrameSet,
    pub dev: FrameSet,
}

/// Deltas and context stacking applied per sequence.
pub fn stack_language(data: &LanguageData) -> LanguageFrames {
    let stack = |seqs: &[crate::corpus::PhoneSequence]| {
        let mut set = FrameSet {
            dim: 0,
            ..FrameSet::default()
        };
        for s in seqs {
            let x = network_input(&s.features);
            set.dim = x.dim();
            set.inputs.extend_from_slice(x.values());
            set.labels.extend_from_slice(&s.labels);
        }
        set
    };
    LanguageFrames {
        language: data.language.clone(),
        classes: data.classes,
        train: stack(&data.train),
        dev: stack(&data.dev),
    }
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq)]
pub struct BnfSchedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for BnfSchedule {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 255,
            lr: 1e-3,
            lr_floor: 1e-4,
            seed: 0,
        }
    }
}

/// Halves the rate when the dev loss strictly increased, never going below
/// `floor`.
pub fn next_lr(lr: f64, previous_dev: Option<f64>, dev: f64, floor: f64) -> f64 {
    match previous_dev {
        Some(p) if dev > p => (lr / 2.0).max(floor),
        _ => lr,
    }
}

/// Rate used in each epoch given the dev losses observed after each epoch.
pub fn lr_trace(initial: f64, floor: f64, dev_losses: &[f64]) -> Vec<f64> {
    let mut lrs = Vec::with_capacity(dev_losses.len() + 1);
    let mut lr = initial;
    lrs.push(lr);
    let mut prev = None;
    for &d in dev_losses {
        lr = next_lr(lr, prev, d, floor);
        lrs.push(lr);
        prev = Some(d);
    }
    lrs
}

/// Samples per language in a batch of `batch` rows at step `step`:
/// an even split, remainder handed out round-robin.
pub fn batch_split(batch: usize, languages: usize, step: usize) -> Vec<usize> {
    let base = batch / languages;
    let extra = batch % languages;
    (0..languages)
        .map(|l| base + usize::from((l + languages - step % languages) % languages < extra))
        .collect()
}

/// Endless shuffled pass over one language's training rows.
struct Stream {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Stream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng: rng(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnfHistory {
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
    pub lr: Vec<f64>,
}

/// Gradients for one batch; heads without rows in the batch get zeros.
#[derive(Clone, Debug)]
pub struct BnfGradients {
    pub loss: f64,
    pub extractor: NetworkParams,
    pub post: NetworkParams,
    pub heads: Vec<NetworkParams>,
}

/// One language's rows of a batch.
pub struct BatchPart<'a> {
    pub head: usize,
    pub inputs: Vec<f32>,
    pub labels: &'a [usize],
}

pub fn batch_gradients(model: &BnfModel, parts: &[BatchPart<'_>], rng: &mut Rng) -> Result<BnfGradients> {
    let arch = &model.arch;
    let total: usize = parts.iter().map(|p| p.labels.len()).sum();
    let mut x = Vec::with_capacity(total * arch.input_dim);
    for p in parts {
        x.extend_from_slice(&p.inputs);
    }
    let ext_spec = arch.extractor_spec();
    let post_spec = arch.post_spec();
    let (z, ext_tape) = forward(&ext_spec, &model.extractor, Tensor::new(vec![total, arch.input_dim], x)?, Mode::Train, rng)?;
    let (h, post_tape) = forward(&post_spec, &model.post, z, Mode::Train, rng)?;

    let mut dh = vec![0.0f32; total * arch.hidden];
    let mut heads: Vec<NetworkParams> = arch
        .heads
        .iter()
        .map(|hd| NetworkParams::zeros_like(&arch.head_spec(hd.classes)))
        .collect();
    let mut loss = 0.0;
    let mut row = 0;
    for p in parts {
        let n = p.labels.len();
        if n == 0 {
            continue;
        }
        let spec = arch.head_spec(arch.heads[p.head].classes);
        let hp = Tensor::new(
            vec![n, arch.hidden],
            h.data()[row * arch.hidden..(row + n) * arch.hidden].to_vec(),
        )?;
        let (logits, tape) = forward(&spec, &model.heads[p.head], hp, Mode::Train, rng)?;
        let (l, mut g) = cross_entropy_rows(&logits, p.labels)?;
        let weight = n as f64 / total as f64;
        loss += weight * l;
        g.scale(weight as f32);
        let grads = backward(&spec, &model.heads[p.head], tape, &g)?;
        heads[p.head].add_assign(&grads.params);
        dh[row * arch.hidden..(row + n) * arch.hidden].copy_from_slice(grads.input.data());
        row += n;
    }
    let post_grads = backward(&post_spec, &model.post, post_tape, &Tensor::new(vec![total, arch.hidden], dh)?)?;
    let ext_grads = backward(&ext_spec, &model.extractor, ext_tape, &post_grads.input)?;
    Ok(BnfGradients {
        loss,
        extractor: ext_grads.params,
        post: post_grads.params,
        heads,
    })
}

/// Equal-weight mean dev cross entropy over languages, and mean accuracy.
pub fn dev_metrics(model: &BnfModel, data: &[LanguageFrames]) -> Result<(f64, f64)> {
    let arch = &model.arch;
    let (mut loss, mut acc) = (0.0, 0.0);
    for (li, d) in data.iter().enumerate() {
        let set = &d.dev;
        let mut l_sum = 0.0;
        let mut correct = 0usize;
        for start in (0..set.len()).step_by(2048) {
            let end = (start + 2048).min(set.len());
            let x = Tensor::new(vec![end - start, set.dim], set.inputs[start * set.dim..end * set.dim].to_vec())?;
            let z = infer(&arch.extractor_spec(), &model.extractor, x)?;
            let h = infer(&arch.post_spec(), &model.post, z)?;
            let logits = infer(&arch.head_spec(d.classes), &model.heads[li], h)?;
            let labels = &set.labels[start..end];
            let (l, _) = cross_entropy_rows(&logits, labels)?;
            l_sum += l * labels.len() as f64;
            for (r, &y) in logits.data().chunks_exact(d.classes).zip(labels) {
                let arg = r
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                correct += usize::from(arg == y);
            }
        }
        loss += l_sum / set.len().max(1) as f64;
        acc += correct as f64 / set.len().max(1) as f64;
    }
    Ok((loss / data.len() as f64, acc / data.len() as f64))
}

/// Multitask training; `data[i]` feeds head `i`.
pub fn train(model: &mut BnfModel, data: &[LanguageFrames], schedule: &BnfSchedule) -> Result<BnfHistory> {
    let arch = model.arch.clone();
    if data.len() != arch.heads.len() {
        return Err(QbeError::Config(format!(
            "{} languages of data for {} heads",
            data.len(),
            arch.heads.len()
        )));
    }
    for (d, h) in data.iter().zip(&arch.heads) {
        if d.train.is_empty() || d.dev.is_empty() {
            return Err(QbeError::Data(format!("language {} has no training or dev frames", d.language)));
        }
        if d.train.dim != arch.input_dim || d.dev.dim != arch.input_dim {
            return Err(QbeError::DimMismatch {
                left: d.train.dim,
                right: arch.input_dim,
            });
        }
        if d.classes != h.classes {
            return Err(QbeError::Config(format!("language {} class count differs from its head", d.language)));
        }
    }
    if schedule.batch < data.len() {
        return Err(QbeError::Config("batch smaller than the number of languages".into()));
    }

    let adam = |p: &NetworkParams| AdamState::new(p, AdamConfig::with_lr(schedule.lr));
    let mut ext_opt = adam(&model.extractor);
    let mut post_opt = adam(&model.post);
    let mut head_opt: Vec<AdamState> = model.heads.iter().map(adam).collect();
    let mut streams: Vec<Stream> = data
        .iter()
        .enumerate()
        .map(|(i, d)| Stream::new(d.train.len(), derive_seed(schedule.seed, 10 + i as u64)))
        .collect();
    let mut dropout_rng = rng(derive_seed(schedule.seed, 1));
    let total: usize = data.iter().map(|d| d.train.len()).sum();
    let steps = total.div_ceil(schedule.batch);

    let mut history = BnfHistory::default();
    let mut lr = schedule.lr;
    let mut prev_dev = None;
    for epoch in 0..schedule.epochs {
        for o in std::iter::once(&mut ext_opt).chain(std::iter::once(&mut post_opt)).chain(head_opt.iter_mut()) {
            o.set_lr(lr);
        }
        history.lr.push(lr);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let split = batch_split(schedule.batch, data.len(), step);
            let mut label_buf: Vec<Vec<usize>> = Vec::with_capacity(data.len());
            let mut inputs: Vec<Vec<f32>> = Vec::with_capacity(data.len());
            for (li, &n) in split.iter().enumerate() {
                let mut x = Vec::with_capacity(n * arch.input_dim);
                let mut y = Vec::with_capacity(n);
                for _ in 0..n {
                    let i = streams[li].next();
                    x.extend_from_slice(data[li].train.row(i));
                    y.push(data[li].train.labels[i]);
                }
                inputs.push(x);
                label_buf.push(y);
            }
            let parts: Vec<BatchPart> = inputs
                .into_iter()
                .zip(&label_buf)
                .enumerate()
                .map(|(head, (inputs, labels))| BatchPart {
                    head,
                    inputs,
                    labels,
                })
                .collect();
            let g = batch_gradients(model, &parts, &mut dropout_rng)?;
            if !g.loss.is_finite() {
                return Err(QbeError::Numeric(format!(
                    "bottleneck training diverged: epoch {epoch}, step {step}, loss {}",
                    g.loss
                )));
            }
            epoch_loss += g.loss;
            adam_step(&mut model.extractor, &g.extractor, &mut ext_opt, None)?;
            adam_step(&mut model.post, &g.post, &mut post_opt, None)?;
            for (li, &n) in split.iter().enumerate() {
                if n > 0 {
                    adam_step(&mut model.heads[li], &g.heads[li], &mut head_opt[li], None)?;
                }
            }
        }
        let (dev, acc) = dev_metrics(model, data)?;
        if !dev.is_finite() {
            return Err(QbeError::Numeric(format!("dev loss is {dev} after epoch {epoch}")));
        }
        history.train_loss.push(epoch_loss / steps as f64);
        history.dev_loss.push(dev);
        history.dev_accuracy.push(acc);
        log::info!(
            "bnf epoch {epoch}: train {:.4} dev {:.4} acc {:.3} lr {:.2e}",
            epoch_loss / steps as f64,
            dev,
            acc,
            lr
        );
        lr = next_lr(lr, prev_dev, dev, schedule.lr_floor);
        prev_dev = Some(dev);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(c: usize) -> LanguageHead {
        LanguageHead {
            language: "x".into(),
            classes: c,
        }
    }

    #[test]
    fn lr_trace_halves_to_floor() {
        let devs = [1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6];
        let t = lr_trace(1e-3, 1e-4, &devs);
        let expect = [1e-3, 1e-3, 5e-4, 2.5e-4, 1.25e-4, 1e-4, 1e-4, 1e-4];
        assert_eq!(t.len(), expect.len());
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-18, "{a} vs {b}");
        }
        assert_eq!(lr_trace(1e-3, 1e-4, &[1.0, 1.0, 0.9]), vec![1e-3; 4]);
    }

    #[test]
    fn batch_split_is_even_with_rotating_remainder() {
        assert_eq!(batch_split(255, 1, 0), vec![255]);
        assert_eq!(batch_split(255, 3, 0), vec![85, 85, 85]);
        assert_eq!(batch_split(255, 2, 0), vec![128, 127]);
        assert_eq!(batch_split(255, 2, 1), vec![127, 128]);
        let s: Vec<Vec<usize>> = (0..4).map(|k| batch_split(11, 4, k)).collect();
        assert!(s.iter().all(|v| v.iter().sum::<usize>() == 11));
        assert_eq!(s[0], vec![3, 3, 3, 2]);
        assert_eq!(s[1], vec![2, 3, 3, 3]);
    }

    #[test]
    fn full_size_parameter_count() {
        let m = BnfModel::build(BnfArch::full(vec![head(10)]), 1).unwrap();
        let layernorms = 2 * (507 + 1024 + 1024 + 1024 + 32 + 1024);
        let expect = layernorms
            + 507 * 1024
            + 1024
            + 2 * (1024 * 1024 + 1024)
            + 1024 * 32
            + 32
            + 32 * 1024
            + 1024
            + 1024 * 10
            + 10;
        assert_eq!(m.param_count(), expect);
    }

    #[test]
    fn layer_counts_by_language_count() {
        assert_eq!(BnfArch::full(vec![head(5)]).shared_layers, 3);
        assert_eq!(BnfArch::full(vec![head(5); 3]).shared_layers, 4);
        let five = BnfModel::build(BnfArch::for_heads(vec![head(5); 5], 16), 3).unwrap();
        assert_eq!((five.arch.shared_layers, five.heads.len()), (5, 5));
    }

    #[test]
    fn arch_text_round_trip() {
        let arch = BnfArch::for_heads(vec![head(7), head(9)], 64);
        assert_eq!(BnfArch::from_text(&arch.to_text()).unwrap(), arch);
    }
}
