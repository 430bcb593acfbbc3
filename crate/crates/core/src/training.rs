//! Mini-batch training with Adam and a single step decay of the learning
//! rate, plus batched inference helpers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{AudioSegment, Split, SplitRecord};
use crate::error::{Error, Result};
use crate::features::{AugmentMasks, FeatureExtractor, FeatureKind, FeatureStats, Grid, FREQ_MASK, TIME_MASK};
use crate::model::{stack_batch, ForwardOptions, Model, ParamSet};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Last epoch (1-based) trained at `lr0`.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Smaller, five-class, 130-epoch protocol.
    pub fn shipsear() -> Self {
        Self {
            lr0: 1.5e-3,
            decay_epoch: 90,
            decay_factor: 0.5,
            batch_size: 16,
            epochs: 130,
            seed: 0,
            augment: true,
            adam: AdamConfig::default(),
        }
    }

    /// Larger, four-class, 180-epoch protocol.
    pub fn deepship() -> Self {
        Self {
            lr0: 1.2e-3,
            decay_epoch: 130,
            decay_factor: 0.5,
            batch_size: 64,
            epochs: 180,
            seed: 0,
            augment: true,
            adam: AdamConfig::default(),
        }
    }

    /// Short runs: same rates as [`TrainConfig::shipsear`], decay after 70%
    /// of the epochs.
    pub fn short(epochs: usize) -> Self {
        Self {
            epochs,
            decay_epoch: ((epochs as f64 * 0.7).round() as usize).clamp(1, epochs.saturating_sub(1).max(1)),
            ..Self::shipsear()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if self.decay_epoch >= self.epochs && self.epochs > 1 {
            return Err(Error::invalid(format!(
                "decay_epoch {} must precede the last epoch {}",
                self.decay_epoch, self.epochs
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!("decay_factor {} outside (0, 1]", self.decay_factor)));
        }
        self.adam.validate()
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch <= cfg.decay_epoch {
        cfg.lr0
    } else {
        cfg.lr0 * cfg.decay_factor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid(format!("bad Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates for every parameter of one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, cfg: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. `grads[i]` belongs to the i-th parameter;
    /// `None` means zero. Nothing changes if any gradient is non-finite.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Option<&Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.tensor.shape() {
                    return Err(Error::shape(format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.tensor.shape())));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = T::of(1.0 - beta1.powi(t));
        let c2 = T::of(1.0 - beta2.powi(t));
        let (b1, b2, eps, lr) = (T::of(beta1), T::of(beta2), T::of(eps), T::of(lr));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = p.tensor.data_mut();
            match grads[i] {
                Some(g) => {
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + one_b1 * g;
                        *v = b2 * *v + one_b2 * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
                None => {
                    for ((w, m), v) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= b1;
                        *v *= b2;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Normalized spectrograms with labels, all `[frames][bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub bins: usize,
    pub items: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(frames: usize, bins: usize, items: Vec<Vec<f32>>, labels: Vec<usize>) -> Result<Self> {
        if items.len() != labels.len() {
            return Err(Error::shape(format!("{} items with {} labels", items.len(), labels.len())));
        }
        if let Some(bad) = items.iter().position(|x| x.len() != frames * bins) {
            return Err(Error::shape(format!("item {bad} is not {frames}x{bins}")));
        }
        Ok(Self { frames, bins, items, labels })
    }

    /// Applies `stats` to raw feature grids.
    pub fn from_grids(grids: &[Grid], labels: Vec<usize>, stats: &FeatureStats) -> Result<Self> {
        let (frames, bins) = grids.first().map_or((0, 0), |g| (g.rows, g.cols));
        let items = grids
            .iter()
            .map(|g| {
                let mut v = g.to_f32();
                stats.apply(&mut v);
                v
            })
            .collect();
        Self::new(frames, bins, items, labels)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn batch<T: Real>(&self, idx: &[usize], masks: Option<&[AugmentMasks]>) -> Result<(Tensor<T>, Vec<usize>)> {
        let items: Vec<Vec<T>> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut x: Vec<T> = self.items[i].iter().map(|&v| T::of(v as f64)).collect();
                if let Some(m) = masks {
                    m[j].apply(&mut x, self.frames, self.bins);
                }
                x
            })
            .collect();
        let refs: Vec<&[T]> = items.iter().map(|v| v.as_slice()).collect();
        let x = stack_batch(&refs, self.frames, self.bins)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Feature grids of every segment, computed in parallel.
pub fn extract_features(segments: &[AudioSegment], kind: FeatureKind) -> Result<Vec<Grid>> {
    let fx = FeatureExtractor::new(kind)?;
    segments.par_iter().map(|s| fx.extract(&s.samples)).collect()
}

/// Normalized train/val/test datasets with the train-set statistics.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub stats: FeatureStats,
}

/// Extracts features for every segment and normalizes all three splits
/// with statistics of the training split only.
pub fn prepare_splits(segments: &[AudioSegment], records: &[SplitRecord], kind: FeatureKind) -> Result<SplitData> {
    if segments.len() != records.len() {
        return Err(Error::shape(format!("{} segments with {} split records", segments.len(), records.len())));
    }
    let grids = extract_features(segments, kind)?;
    let pick = |split: Split| -> (Vec<Grid>, Vec<usize>) {
        records
            .iter()
            .zip(&grids)
            .filter(|(r, _)| r.split == split)
            .map(|(r, g)| (g.clone(), r.label))
            .unzip()
    };
    let (tr, tr_labels) = pick(Split::Train);
    if tr.is_empty() {
        return Err(Error::Degenerate("no training segments".into()));
    }
    let stats = FeatureStats::from_grids(&tr)?;
    let (va, va_labels) = pick(Split::Val);
    let (te, te_labels) = pick(Split::Test);
    Ok(SplitData {
        train: Dataset::from_grids(&tr, tr_labels, &stats)?,
        val: Dataset::from_grids(&va, va_labels, &stats)?,
        test: Dataset::from_grids(&te, te_labels, &stats)?,
        stats,
    })
}

/// One split, normalized with given statistics (e.g. from a checkpoint).
pub fn split_dataset(
    segments: &[AudioSegment],
    records: &[SplitRecord],
    split: Split,
    kind: FeatureKind,
    stats: &FeatureStats,
) -> Result<Dataset> {
    let chosen: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == split).collect();
    let segs: Vec<AudioSegment> = chosen.iter().map(|&i| segments[i].clone()).collect();
    let grids = extract_features(&segs, kind)?;
    Dataset::from_grids(&grids, chosen.iter().map(|&i| records[i].label).collect(), stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub oa: f64,
    pub steps: usize,
}

/// Number of optimizer steps per epoch; the last partial batch is kept.
pub fn steps_per_epoch(n_items: usize, batch_size: usize) -> usize {
    n_items.div_ceil(batch_size)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// One pass over `data` in shuffled mini-batches.
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let c = model.config().n_classes;
    let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
    let mut tape = Tape::new();
    for idx in order.chunks(cfg.batch_size) {
        let masks: Option<Vec<AugmentMasks>> = cfg.augment.then(|| {
            idx.iter()
                .map(|_| AugmentMasks::sample(rng, data.frames, data.bins, FREQ_MASK, TIME_MASK))
                .collect()
        });
        let (x, y) = data.batch::<T>(idx, masks.as_deref())?;
        tape.reset();
        let vars = model.bind(&mut tape, true);
        let xv = tape.constant(x);
        let out = model.forward_train(&mut tape, &vars, xv, &ForwardOptions::default())?;
        let loss = tape.cross_entropy(out.logits, &y)?;
        let lv = tape.value(loss).data()[0].f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", steps + 1)));
        }
        correct += tape
            .value(out.logits)
            .data()
            .chunks(c)
            .zip(&y)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
        let grads = tape.backward(loss)?;
        let g: Vec<Option<&Tensor<T>>> = vars.iter().map(|&v| grads.get(v)).collect();
        opt.update(model.params_mut(), &g, lr)?;
        loss_sum += lv * idx.len() as f64;
        steps += 1;
    }
    Ok(EpochStats {
        loss: loss_sum / data.len() as f64,
        oa: correct as f64 / data.len() as f64,
        steps,
    })
}

/// Class probabilities for every item, in inference mode.
pub fn predict_proba<T: Real>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let c = model.config().n_classes;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch::<T>(chunk, None)?;
        let (logits, _) = model.infer(&x, &ForwardOptions::default())?;
        for row in logits.data().chunks(c) {
            out.push(softmax_f64(row));
        }
    }
    Ok(out)
}

pub fn softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.f64() - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn predict<T: Real>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    Ok(predict_proba(model, data, batch_size)?.iter().map(|p| argmax(p.as_slice())).collect())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_oa: f64,
    pub val_oa: f64,
}

pub struct FitOutcome<T> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_oa: f64,
    pub best: Model<T>,
    /// Weights after the last epoch.
    pub last: Model<T>,
}

/// Trains for `cfg.epochs` epochs, validating after each in inference mode
/// and keeping the weights with the best validation OA (earliest on ties).
/// With an empty validation set the last epoch is kept and `val_oa` is NaN.
///
/// `on_epoch` sees every history row, plus the model whenever it is the new
/// best.
pub fn fit<T: Real>(
    mut model: Model<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&Model<T>>) -> Result<()>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params(), cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let stats = train_epoch(&mut model, &mut opt, train, cfg, lr, &mut rng)?;
        let val_oa = if val.is_empty() {
            f64::NAN
        } else {
            accuracy(&predict(&model, val, cfg.batch_size)?, &val.labels)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: stats.loss,
            train_oa: stats.oa,
            val_oa,
        };
        history.push(rec);
        let improved = match &best {
            None => true,
            Some(_) if val.is_empty() => true,
            Some((_, b, _)) => val_oa > *b,
        };
        if improved {
            best = Some((epoch, val_oa, model.clone()));
        }
        on_epoch(&rec, improved.then(|| &best.as_ref().unwrap().2))?;
    }
    let (best_epoch, best_val_oa, best) = best.expect("at least one epoch");
    Ok(FitOutcome {
        history,
        best_epoch,
        best_val_oa,
        best,
        last: model,
    })
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file).deserialize().map(|r| r.map_err(Error::from)).collect()
}
