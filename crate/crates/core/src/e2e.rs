//! Joint model: shared feature extractor, similarity image, CNN matcher.
//!
//! The speech mask is decided on the input energy track and applied to the
//! extractor outputs, so the extractor still sees full context and the
//! masked frames simply receive no gradient.

use qbe_gradkit::{
    adam_step, backward, cross_entropy_rows, forward, softmax, AdamConfig, AdamState, Mode, NetworkParams,
    NetworkSpec, Scalar, Tape, Tensor,
};
use rand::RngCore;
use rayon::prelude::*;

use crate::bnf::{extract_with, BnfArch, BnfModel};
use crate::cnnmatch::{balanced_epoch, CnnModel, TrainHistory, TrainSchedule, TrialLabel, POSITIVE};
use crate::error::{QbeError, Result};
use crate::features::{FeatureMatrix, SadMask, MIN_SAD_FRAMES};
use crate::simimage::{cosine_core, extremes, normalize_rows, range_normalize_core, resample_indices, resize_core};
use crate::util::{derive_seed, rng};

/// Largest supported number of frozen leading extractor layers.
pub const MAX_FREEZE: usize = 3;

/// Borrowed network pieces, generic so gradients can be checked in f64.
pub struct E2eNet<'a, S: Scalar> {
    pub extractor_spec: &'a NetworkSpec,
    pub extractor: &'a NetworkParams<S>,
    /// Matcher without its final softmax.
    pub matcher_spec: &'a NetworkSpec,
    pub matcher: &'a NetworkParams<S>,
    pub image_rows: usize,
    pub image_cols: usize,
    pub min_frames: usize,
}

struct Branch<S> {
    tape: Tape<S>,
    frames: usize,
    keep: Vec<usize>,
    unit: Vec<S>,
    norms: Vec<f64>,
}

/// Everything [`E2eNet::backward`] needs from a forward pass.
pub struct E2eTape<S> {
    query: Branch<S>,
    utterance: Branch<S>,
    dim: usize,
    sim: Vec<S>,
    extremes: (f64, usize, f64, usize),
    matcher: Tape<S>,
}

#[derive(Clone, Debug)]
pub struct E2eGradients<S: Scalar> {
    pub extractor: NetworkParams<S>,
    pub matcher: NetworkParams<S>,
}

/// One side of a trial: network input frames plus its speech mask.
pub struct SideInput<'a, S> {
    pub frames: &'a Tensor<S>,
    pub keep: &'a [usize],
}

impl<S: Scalar> E2eNet<'_, S> {
    fn branch(&self, side: &SideInput<'_, S>, mode: Mode, rng: &mut dyn RngCore) -> Result<(Branch<S>, usize)> {
        let (out, tape) = forward(self.extractor_spec, self.extractor, side.frames.clone(), mode, rng)?;
        let dim = *out.shape().last().expect("rank 2 output");
        let mut kept = Vec::with_capacity(side.keep.len() * dim);
        for &t in side.keep {
            kept.extend_from_slice(&out.data()[t * dim..(t + 1) * dim]);
        }
        let (unit, norms) = normalize_rows(&kept, side.keep.len(), dim);
        Ok((
            Branch {
                tape,
                frames: out.shape()[0],
                keep: side.keep.to_vec(),
                unit,
                norms,
            },
            dim,
        ))
    }

    /// Logits `[1, 2]`, or `None` when either side has too few kept frames.
    pub fn forward(
        &self,
        query: &SideInput<'_, S>,
        utterance: &SideInput<'_, S>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Option<(Tensor<S>, E2eTape<S>)>> {
        if query.keep.len() < self.min_frames || utterance.keep.len() < self.min_frames {
            return Ok(None);
        }
        let (q, dim) = self.branch(query, mode, rng)?;
        let (u, _) = self.branch(utterance, mode, rng)?;
        let (m, n) = (q.keep.len(), u.keep.len());
        let sim = cosine_core(&q.unit, m, &u.unit, n, dim);
        let image = resize_core(&range_normalize_core(&sim), m, n, self.image_rows, self.image_cols);
        let x = Tensor::new(vec![1, self.image_rows, self.image_cols], image)?;
        let (logits, matcher) = forward(self.matcher_spec, self.matcher, x, mode, rng)?;
        Ok(Some((
            logits,
            E2eTape {
                extremes: extremes(&sim),
                query: q,
                utterance: u,
                dim,
                sim,
                matcher,
            },
        )))
    }

    pub fn backward(&self, tape: E2eTape<S>, dlogits: &Tensor<S>) -> Result<E2eGradients<S>> {
        let E2eTape {
            query,
            utterance,
            dim,
            sim,
            extremes: (lo, lo_at, hi, hi_at),
            matcher,
        } = tape;
        let (m, n) = (query.keep.len(), utterance.keep.len());
        let mg = backward(self.matcher_spec, self.matcher, matcher, dlogits)?;

        // Resize: copied cells pass gradient back, padding is constant.
        let mut d_norm = vec![0.0f64; m * n];
        let rows = resample_indices(m, self.image_rows);
        let cols = resample_indices(n, self.image_cols);
        let gi = mg.input.data();
        for (k, r) in rows.iter().enumerate() {
            let Some(r) = r else { continue };
            for (l, c) in cols.iter().enumerate() {
                if let Some(c) = c {
                    d_norm[r * n + c] += gi[k * self.image_cols + l].to_f64();
                }
            }
        }

        // Range normalization, extremes differentiated through their cells.
        let mut d_sim = vec![0.0f64; m * n];
        if hi > lo {
            let range = hi - lo;
            let (mut g_lo, mut g_hi) = (0.0, 0.0);
            for (i, (dn, s)) in d_norm.iter().zip(&sim).enumerate() {
                let s = s.to_f64();
                d_sim[i] = dn * 2.0 / range;
                g_lo += dn * 2.0 * (s - hi) / (range * range);
                g_hi += dn * -2.0 * (s - lo) / (range * range);
            }
            d_sim[lo_at] += g_lo;
            d_sim[hi_at] += g_hi;
        }

        // Cosine similarity through the row normalization.
        let d_sim_s: Vec<S> = d_sim.iter().map(|v| S::from_f64(*v)).collect();
        let mut dq_unit = vec![S::ZERO; m * dim];
        S::gemm(false, false, m, dim, n, S::ONE, &d_sim_s, &utterance.unit, S::ZERO, &mut dq_unit);
        let mut du_unit = vec![S::ZERO; n * dim];
        S::gemm(true, false, n, dim, m, S::ONE, &d_sim_s, &query.unit, S::ZERO, &mut du_unit);

        let branch_grad = |b: Branch<S>, d_unit: Vec<S>| -> Result<NetworkParams<S>> {
            let mut d_out = vec![S::ZERO; b.frames * dim];
            for (row, &t) in b.keep.iter().enumerate() {
                let norm = b.norms[row];
                if norm == 0.0 {
                    continue;
                }
                let g = &d_unit[row * dim..(row + 1) * dim];
                let u = &b.unit[row * dim..(row + 1) * dim];
                let dot: f64 = g.iter().zip(u).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                for k in 0..dim {
                    d_out[t * dim + k] = S::from_f64((g[k].to_f64() - dot * u[k].to_f64()) / norm);
                }
            }
            let dy = Tensor::new(vec![b.frames, dim], d_out)?;
            Ok(backward(self.extractor_spec, self.extractor, b.tape, &dy)?.params)
        };
        let mut extractor = branch_grad(query, dq_unit)?;
        extractor.add_assign(&branch_grad(utterance, du_unit)?);
        Ok(E2eGradients {
            extractor,
            matcher: mg.params,
        })
    }
}

#[derive(Clone, Debug)]
pub struct E2eModel {
    pub arch: BnfArch,
    pub extractor: NetworkParams,
    pub matcher: CnnModel,
    /// Leading (layer norm, linear) extractor blocks kept fixed.
    pub freeze: usize,
    pub matcher_frozen: bool,
    /// False for a model built from random weights.
    pub pretrained: bool,
    pub min_frames: usize,
}

impl E2eModel {
    pub fn from_pretrained(bnf: &BnfModel, matcher: &CnnModel, freeze: usize, matcher_frozen: bool) -> Result<Self> {
        bnf.extractor.check(&bnf.arch.extractor_spec())?;
        matcher.params.check(&matcher.spec)?;
        let model = Self {
            arch: bnf.arch.clone(),
            extractor: bnf.extractor.clone(),
            matcher: matcher.clone(),
            freeze,
            matcher_frozen,
            pretrained: true,
            min_frames: MIN_SAD_FRAMES,
        };
        model.validate()?;
        Ok(model)
    }

    /// Random weights throughout; such models are known to train poorly.
    pub fn random(arch: BnfArch, matcher: CnnModel, seed: u64) -> Result<Self> {
        log::warn!("end-to-end model built without pretrained weights");
        let bnf = BnfModel::build(arch, seed)?;
        let mut model = Self::from_pretrained(&bnf, &matcher, 0, false)?;
        model.pretrained = false;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.freeze > MAX_FREEZE || self.freeze >= self.arch.extractor_blocks() {
            return Err(QbeError::Config(format!(
                "freeze_spec {} out of range for a {}-block extractor (max {MAX_FREEZE})",
                self.freeze,
                self.arch.extractor_blocks()
            )));
        }
        Ok(())
    }

    /// Per-tensor update flags for the extractor.
    pub fn extractor_trainable(&self) -> Vec<bool> {
        // Each block holds layer-norm gain and bias, then weight and bias.
        (0..self.extractor.tensors.len()).map(|t| t / 4 >= self.freeze).collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        let ext: usize = self
            .extractor
            .tensors
            .iter()
            .zip(self.extractor_trainable())
            .filter(|(_, on)| *on)
            .map(|(t, _)| t.len())
            .sum();
        ext + if self.matcher_frozen { 0 } else { self.matcher.params.scalar_count() }
    }

    pub fn extract(&self, f: &FeatureMatrix) -> Result<FeatureMatrix> {
        extract_with(&self.arch, &self.extractor, f)
    }

    /// Positive-class probability, or `None` for a short file.
    pub fn score(&self, query: &E2eSide, utterance: &E2eSide) -> Result<Option<f64>> {
        let ext_spec = self.arch.extractor_spec();
        let matcher_spec = self.matcher.spec.without_softmax();
        let net = self.net(&ext_spec, &matcher_spec);
        let (q, u) = (query.input()?, utterance.input()?);
        let out = net.forward(&q.side(), &u.side(), Mode::Eval, &mut rng(0))?;
        Ok(out.map(|(logits, _)| f64::from(softmax(&logits).data()[POSITIVE])))
    }

    fn net<'a>(&'a self, ext_spec: &'a NetworkSpec, matcher_spec: &'a NetworkSpec) -> E2eNet<'a, f32> {
        E2eNet {
            extractor_spec: ext_spec,
            extractor: &self.extractor,
            matcher_spec,
            matcher: &self.matcher.params,
            image_rows: self.matcher.arch.input_rows,
            image_cols: self.matcher.arch.input_cols,
            min_frames: self.min_frames,
        }
    }
}

/// Network input frames of one file with its speech mask.
#[derive(Clone, Debug)]
pub struct E2eSide {
    pub frames: FeatureMatrix,
    pub mask: SadMask,
}

struct OwnedSide {
    frames: Tensor,
    keep: Vec<usize>,
}

impl OwnedSide {
    fn side(&self) -> SideInput<'_, f32> {
        SideInput {
            frames: &self.frames,
            keep: &self.keep,
        }
    }
}

impl E2eSide {
    fn input(&self) -> Result<OwnedSide> {
        if self.mask.len() != self.frames.frames() {
            return Err(QbeError::Data("speech mask length differs from frame count".into()));
        }
        Ok(OwnedSide {
            frames: Tensor::new(vec![self.frames.frames(), self.frames.dim()], self.frames.values().to_vec())?,
            keep: self.mask.kept(),
        })
    }
}

/// Inputs for labeled trials: the query side is always a single example.
pub trait TrialSource: Sync {
    fn query(&self, trial: &TrialLabel) -> Result<&E2eSide>;
    fn utterance(&self, trial: &TrialLabel) -> Result<&E2eSide>;
}

fn target(t: &TrialLabel) -> usize {
    if t.positive {
        POSITIVE
    } else {
        1 - POSITIVE
    }
}

/// Per-trial loss and gradients; `None` for trials with a short side.
fn trial_gradients(
    model: &E2eModel,
    source: &dyn TrialSource,
    trial: &TrialLabel,
    seed: u64,
) -> Result<Option<(f64, E2eGradients<f32>)>> {
    let ext_spec = model.arch.extractor_spec();
    let matcher_spec = model.matcher.spec.without_softmax();
    let net = model.net(&ext_spec, &matcher_spec);
    let (q, u) = (source.query(trial)?.input()?, source.utterance(trial)?.input()?);
    let Some((logits, tape)) = net.forward(&q.side(), &u.side(), Mode::Train, &mut rng(seed))? else {
        return Ok(None);
    };
    let (loss, g) = cross_entropy_rows(&logits, &[target(trial)])?;
    Ok(Some((loss, net.backward(tape, &g)?)))
}

/// Mean eval-mode cross entropy over trials that are not short.
pub fn e2e_eval_loss(model: &E2eModel, source: &dyn TrialSource, trials: &[TrialLabel]) -> Result<f64> {
    let ext_spec = model.arch.extractor_spec();
    let matcher_spec = model.matcher.spec.without_softmax();
    let net = model.net(&ext_spec, &matcher_spec);
    let losses: Vec<Option<f64>> = trials
        .par_iter()
        .map(|t| {
            let (q, u) = (source.query(t)?.input()?, source.utterance(t)?.input()?);
            match net.forward(&q.side(), &u.side(), Mode::Eval, &mut rng(0))? {
                Some((logits, _)) => Ok(Some(cross_entropy_rows(&logits, &[target(t)])?.0)),
                None => Ok(None),
            }
        })
        .collect::<Result<_>>()?;
    let used: Vec<f64> = losses.into_iter().flatten().collect();
    Ok(used.iter().sum::<f64>() / used.len().max(1) as f64)
}

/// Balanced-epoch Adam over all non-frozen parameters; keeps the best
/// balanced dev loss (initial parameters included).
pub fn e2e_train(
    model: &mut E2eModel,
    source: &dyn TrialSource,
    train: &[TrialLabel],
    dev: &[TrialLabel],
    schedule: &TrainSchedule,
) -> Result<TrainHistory> {
    model.validate()?;
    let trainable = model.extractor_trainable();
    let mut ext_opt = AdamState::new(&model.extractor, AdamConfig::with_lr(schedule.lr));
    let mut matcher_opt = AdamState::new(&model.matcher.params, AdamConfig::with_lr(schedule.lr));
    let dev_set = balanced_epoch(dev, derive_seed(schedule.seed, 0xdef))?;
    let mut history = TrainHistory::default();
    let mut best = (
        e2e_eval_loss(model, source, &dev_set)?,
        model.extractor.clone(),
        model.matcher.params.clone(),
    );
    history.dev_loss.push(best.0);
    for epoch in 0..schedule.epochs {
        let epoch_seed = derive_seed(schedule.seed, 1 + epoch as u64);
        let items = balanced_epoch(train, epoch_seed)?;
        let (mut total, mut batches) = (0.0, 0usize);
        for (b, batch) in items.chunks(schedule.batch.max(1)).enumerate() {
            let batch_seed = derive_seed(epoch_seed, b as u64);
            let results: Vec<Option<(f64, E2eGradients<f32>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, t)| trial_gradients(model, source, t, derive_seed(batch_seed, i as u64)))
                .collect::<Result<_>>()?;
            let used: Vec<(f64, E2eGradients<f32>)> = results.into_iter().flatten().collect();
            if used.is_empty() {
                continue;
            }
            let mut ext_g = NetworkParams::zeros_like(&model.arch.extractor_spec());
            let mut matcher_g = NetworkParams::zeros_like(&model.matcher.spec);
            let mut loss = 0.0;
            for (l, g) in &used {
                loss += l;
                ext_g.add_assign(&g.extractor);
                matcher_g.add_assign(&g.matcher);
            }
            let scale = 1.0 / used.len() as f32;
            ext_g.scale(scale);
            matcher_g.scale(scale);
            loss /= used.len() as f64;
            if !loss.is_finite() {
                return Err(QbeError::Numeric(format!("end-to-end training diverged in epoch {epoch}, batch {b}")));
            }
            adam_step(&mut model.extractor, &ext_g, &mut ext_opt, Some(&trainable))?;
            if !model.matcher_frozen {
                adam_step(&mut model.matcher.params, &matcher_g, &mut matcher_opt, None)?;
            }
            total += loss;
            batches += 1;
        }
        let dev_loss = e2e_eval_loss(model, source, &dev_set)?;
        history.train_loss.push(total / batches.max(1) as f64);
        history.dev_loss.push(dev_loss);
        log::info!("e2e epoch {epoch}: train {:.4} dev {dev_loss:.4}", total / batches.max(1) as f64);
        if dev_loss < best.0 {
            best = (dev_loss, model.extractor.clone(), model.matcher.params.clone());
            history.best_epoch = epoch + 1;
        }
    }
    model.extractor = best.1;
    model.matcher.params = best.2;
    Ok(history)
}

/// Tunes only the extractor, using the frozen matcher as the loss.
pub fn finetune_features_with_cnn_loss(
    model: &mut E2eModel,
    source: &dyn TrialSource,
    train: &[TrialLabel],
    dev: &[TrialLabel],
    schedule: &TrainSchedule,
) -> Result<(NetworkParams, TrainHistory)> {
    if !model.matcher_frozen {
        return Err(QbeError::Config("feature fine-tuning requires a frozen matcher".into()));
    }
    let history = e2e_train(model, source, train, dev, schedule)?;
    Ok((model.extractor.clone(), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnf::LanguageHead;
    use crate::cnnmatch::CnnArch;

    fn toy() -> E2eModel {
        let mut arch = BnfArch::for_heads(
            vec![LanguageHead {
                language: "a".into(),
                classes: 3,
            }],
            8,
        );
        arch.input_dim = 10;
        arch.bottleneck = 4;
        arch.shared_layers = 4;
        let bnf = BnfModel::build(arch, 1).unwrap();
        let cnn = CnnModel::build(CnnArch::toy(), 2).unwrap();
        let mut m = E2eModel::from_pretrained(&bnf, &cnn, 0, false).unwrap();
        m.min_frames = 1;
        m
    }

    #[test]
    fn trainable_count_shrinks_with_freezing() {
        let mut m = toy();
        let mut last = usize::MAX;
        for f in 0..=3 {
            m.freeze = f;
            let c = m.trainable_param_count();
            assert!(c < last);
            last = c;
        }
        m.freeze = 4;
        assert!(m.validate().is_err());
    }

    #[test]
    fn matcher_frozen_requirement() {
        let mut m = toy();
        struct Nothing;
        impl TrialSource for Nothing {
            fn query(&self, _: &TrialLabel) -> Result<&E2eSide> {
                unreachable!()
            }
            fn utterance(&self, _: &TrialLabel) -> Result<&E2eSide> {
                unreachable!()
            }
        }
        let r = finetune_features_with_cnn_loss(&mut m, &Nothing, &[], &[], &TrainSchedule::default());
        assert!(matches!(r, Err(QbeError::Config(_))));
    }
}
