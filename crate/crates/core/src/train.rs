//! Progressive multi-scale training with checkpoint/resume and
//! evaluation against a resize baseline.
//!
//! Stages run deepest level first. Each stage optimizes only the
//! parameter groups at its level and below in the pyramid (group >=
//! level) with a fresh ADAM state, against targets box-averaged to the
//! level's output scale. The full-resolution stage (level 1) swaps the
//! pixel L1 objective for the composite of L1, structural dissimilarity
//! and a feature-space error, and trains at a reduced learning rate.
//!
//! Checkpoints land in `out_dir`: `last.ckpt` at every epoch boundary
//! the cadence selects, `best.ckpt` whenever the validation PSNR of the
//! current stage improves (tracked in `best.json`). Resuming from
//! `last.ckpt` restores parameters, optimizer moments, and the shuffle
//! RNG mid-stream, so an interrupted run and an uninterrupted one
//! produce bit-identical parameters.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, Moments};
use crate::data::{Dataset, Sample};
use crate::error::{ConfigError, Error, FormatError, TrainError};
use crate::io::{self, CheckpointMeta, RunConfig, TrainCursor};
use crate::kernels;
use crate::loss::{self, composite, l1, to_unit, FeatureNet};
use crate::model::PyNet;
use crate::num::Element;
use crate::rng::DetRng;
use crate::tape::{ExecMode, Tape};
use crate::tensor::Tensor;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const BEST_FILE: &str = "best.json";
pub const EVENTS_FILE: &str = "events.ndjson";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub level: usize,
    /// Completed epochs within the stage, counting this one.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub level: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Nearest-neighbor 2x upscale of the input as a reference point.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

impl EvalReport {
    pub fn psnr_margin(&self) -> f64 {
        self.psnr - self.baseline_psnr
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BestRecord {
    stage: usize,
    epoch: usize,
    val_psnr: f64,
}

/// Rebuilds a model from a checkpoint, ignoring optimizer state.
pub fn load_model<T: Element>(path: &Path) -> Result<(PyNet<T>, CheckpointMeta), Error> {
    let (meta, tensors) = io::load_checkpoint::<T>(path)?;
    let mut model = PyNet::init(meta.model.clone(), 0)?;
    let map: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
    for idx in 0..model.params().len() {
        let (name, shape) = {
            let p = &model.params()[idx];
            (p.name.clone(), p.tensor.shape().to_vec())
        };
        let stored = map
            .get(&name)
            .ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
        if stored.shape() != shape {
            return Err(FormatError::ShapeDisagreement {
                name,
                detail: format!("expected {:?}, got {:?}", shape, stored.shape()),
            }
            .into());
        }
        *model.param_tensor_mut(idx) = stored.clone();
    }
    Ok((model, meta))
}

pub struct Trainer<T: Element> {
    cfg: RunConfig,
    model: PyNet<T>,
    feature: FeatureNet<T>,
    rng: DetRng,
    /// Level currently in training; 0 after every stage has finished.
    stage: usize,
    /// Completed epochs within the current stage.
    epoch: usize,
    /// Optimizer steps within the current stage.
    step: u64,
    moments: BTreeMap<usize, Moments<T>>,
    best_psnr: f64,
}

impl<T: Element> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self, Error> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| ConfigError::Path {
            path: cfg.out_dir.display().to_string(),
            detail: e.to_string(),
        })?;
        let model = PyNet::init(cfg.model.clone(), cfg.seed)?;
        let stage = cfg.model.levels;
        let rng = DetRng::new(DetRng::sub_seed(cfg.seed, 1));
        let moments = fresh_moments(&model, stage);
        Ok(Self {
            cfg,
            model,
            feature: FeatureNet::fixed(),
            rng,
            stage,
            epoch: 0,
            step: 0,
            moments,
            best_psnr: f64::NEG_INFINITY,
        })
    }

    /// Restores a run from a checkpoint written by [`Trainer::save`].
    /// The run config must describe the same model.
    pub fn resume(cfg: RunConfig, path: &Path) -> Result<Self, Error> {
        cfg.validate()?;
        let (meta, tensors) = io::load_checkpoint::<T>(path)?;
        if meta.model != cfg.model {
            return Err(ConfigError::Invalid {
                field: "model",
                detail: "checkpoint model disagrees with the run config".into(),
            }
            .into());
        }
        let mut model = PyNet::init(meta.model.clone(), cfg.seed)?;
        let map: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        for idx in 0..model.params().len() {
            let (name, shape) = {
                let p = &model.params()[idx];
                (p.name.clone(), p.tensor.shape().to_vec())
            };
            let stored = map
                .get(&name)
                .ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
            if stored.shape() != shape {
                return Err(FormatError::ShapeDisagreement {
                    name,
                    detail: format!("expected {:?}, got {:?}", shape, stored.shape()),
                }
                .into());
            }
            *model.param_tensor_mut(idx) = stored.clone();
        }
        let cursor = meta.cursor;
        if cursor.stage > cfg.model.levels {
            return Err(TrainError::Invalid(format!(
                "checkpoint stage {} exceeds model levels {}",
                cursor.stage, cfg.model.levels
            ))
            .into());
        }
        let mut moments = BTreeMap::new();
        if cursor.stage >= 1 {
            for idx in model.trainable_set(cursor.stage) {
                let name = &model.params()[idx].name;
                let numel = model.params()[idx].tensor.numel();
                let m = map
                    .get(&format!("opt.m.{name}"))
                    .ok_or_else(|| FormatError::MissingTensor(format!("opt.m.{name}")))?;
                let v = map
                    .get(&format!("opt.v.{name}"))
                    .ok_or_else(|| FormatError::MissingTensor(format!("opt.v.{name}")))?;
                if m.numel() != numel || v.numel() != numel {
                    return Err(FormatError::ShapeDisagreement {
                        name: format!("opt.m.{name}"),
                        detail: format!("expected {numel} values", ),
                    }
                    .into());
                }
                moments.insert(
                    idx,
                    Moments {
                        m: m.data().to_vec(),
                        v: v.data().to_vec(),
                    },
                );
            }
        }
        let word_pos = ((cursor.rng_word_hi as u128) << 64) | cursor.rng_word_lo as u128;
        let rng = DetRng::restore(cursor.rng_seed, word_pos);
        let best_path = cfg.out_dir.join(BEST_FILE);
        let best_psnr = match io::read_json::<BestRecord>(&best_path) {
            Ok(rec) if rec.stage == cursor.stage => rec.val_psnr,
            _ => f64::NEG_INFINITY,
        };
        Ok(Self {
            cfg,
            model,
            feature: FeatureNet::fixed(),
            rng,
            stage: cursor.stage,
            epoch: cursor.epoch,
            step: cursor.step,
            moments,
            best_psnr,
        })
    }

    /// The level the next epoch will train, or `None` once every stage
    /// has finished.
    pub fn stage(&self) -> Option<usize> {
        if self.stage == 0 {
            None
        } else {
            Some(self.stage)
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn model(&self) -> &PyNet<T> {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn cursor(&self) -> TrainCursor {
        let (seed, pos) = self.rng.state();
        TrainCursor {
            stage: self.stage,
            epoch: self.epoch,
            step: self.step,
            rng_seed: seed,
            rng_word_hi: (pos >> 64) as u64,
            rng_word_lo: pos as u64,
        }
    }

    fn exec(&self) -> ExecMode {
        if self.cfg.deterministic {
            ExecMode::SingleThread
        } else {
            ExecMode::MultiThread
        }
    }

    fn lr_for(&self, level: usize) -> f64 {
        if level == 1 {
            self.cfg.learning_rate * self.cfg.level1_lr_scale
        } else {
            self.cfg.learning_rate
        }
    }

    fn check_data(&self, data: &Dataset<T>) -> Result<(), Error> {
        let s = data.config.input_size;
        self.model.config().check_input_extent(s, s)?;
        if data.train.is_empty() || data.val.is_empty() {
            return Err(TrainError::Invalid(
                "dataset train and validation splits must be non-empty".into(),
            )
            .into());
        }
        Ok(())
    }

    fn log(&self, event: serde_json::Value) -> Result<(), Error> {
        io::append_event(&self.cfg.out_dir.join(EVENTS_FILE), &event)
    }

    /// Writes a full checkpoint: every parameter plus the optimizer
    /// moments of the stage in progress.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            cursor: self.cursor(),
        };
        let mut owned: Vec<(String, Tensor<T>)> = Vec::new();
        for p in self.model.params() {
            owned.push((p.name.clone(), p.tensor.clone()));
        }
        for (&idx, m) in &self.moments {
            let name = &self.model.params()[idx].name;
            owned.push((
                format!("opt.m.{name}"),
                Tensor::new(vec![m.m.len()], m.m.clone())?,
            ));
            owned.push((
                format!("opt.v.{name}"),
                Tensor::new(vec![m.v.len()], m.v.clone())?,
            ));
        }
        let refs: Vec<(String, &Tensor<T>)> =
            owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        io::save_checkpoint(path, &meta, &refs)
    }

    /// Runs a single epoch of the current stage: shuffled mini-batches,
    /// backprop, ADAM updates, then a validation pass. Does not write
    /// checkpoints; [`Trainer::train_level`] handles cadence.
    pub fn run_epoch(&mut self, data: &Dataset<T>, level: usize) -> Result<EpochReport, Error> {
        if self.stage == 0 {
            return Err(TrainError::LevelOrder("every stage has already finished".into()).into());
        }
        if level != self.stage {
            return Err(TrainError::LevelOrder(format!(
                "stage order trains level {} next, not level {level}",
                self.stage
            ))
            .into());
        }
        self.check_data(data)?;

        let mut indices: Vec<usize> = data.train.clone().collect();
        self.rng.shuffle(&mut indices);

        let lr = self.lr_for(level);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in indices.chunks(self.cfg.batch_size) {
            let batch_loss = self.train_batch(data, chunk, level, lr)?;
            loss_sum += batch_loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val_psnr = self.split_psnr(data, data.val.clone(), level)?;
        self.epoch += 1;
        self.log(serde_json::json!({
            "kind": "epoch",
            "level": level,
            "epoch": self.epoch,
            "train_loss": train_loss,
            "val_psnr": val_psnr,
        }))?;
        Ok(EpochReport {
            level,
            epoch: self.epoch,
            train_loss,
            val_psnr,
        })
    }

    fn train_batch(
        &mut self,
        data: &Dataset<T>,
        batch: &[usize],
        level: usize,
        lr: f64,
    ) -> Result<f64, Error> {
        let samples: Vec<&Sample<T>> = batch.iter().map(|&i| &data.samples[i]).collect();
        let input = stack_inputs(&samples)?;
        let target = stack_targets_at_level(&samples, level)?;

        let mut tape = Tape::new(self.exec());
        let input_id = tape.constant(input);
        let target_id = tape.constant(target);
        let fwd = self.model.forward(&mut tape, input_id, level, &[], Some(level))?;
        let pred_u = to_unit(&mut tape, fwd.output)?;
        let targ_u = to_unit(&mut tape, target_id)?;
        let (loss_id, parts) = if level >= 2 {
            (l1(&mut tape, pred_u, targ_u)?, None)
        } else {
            let c = composite(&mut tape, pred_u, targ_u, &self.feature)?;
            (c.total, Some((c.l1, c.ssim, c.feature)))
        };
        let loss_val = tape.value(loss_id).item().expect("scalar loss").to_f64();
        tape.backward(loss_id)?;

        self.step += 1;
        for &(idx, tid) in &fwd.touched {
            let Some(grad) = tape.grad(tid) else { continue };
            let moments = self.moments.get_mut(&idx).ok_or_else(|| {
                TrainError::Invalid(format!(
                    "no optimizer state for trainable parameter {}",
                    self.model.params()[idx].name
                ))
            })?;
            adam_step(
                self.model.param_tensor_mut(idx).data_mut(),
                grad,
                moments,
                lr,
                self.step,
            );
        }
        if let Some((l1_part, ssim_part, feat_part)) = parts {
            self.log(serde_json::json!({
                "kind": "batch",
                "level": level,
                "step": self.step,
                "l1": l1_part.to_f64(),
                "ssim": ssim_part.to_f64(),
                "feature": feat_part.to_f64(),
            }))?;
        }
        Ok(loss_val)
    }

    /// Mean per-sample PSNR of the level's output over an index range.
    fn split_psnr(
        &self,
        data: &Dataset<T>,
        range: Range<usize>,
        level: usize,
    ) -> Result<f64, Error> {
        let indices: Vec<usize> = range.collect();
        let mut total = 0.0;
        for chunk in indices.chunks(self.cfg.batch_size) {
            let samples: Vec<&Sample<T>> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let input = stack_inputs(&samples)?;
            let target = stack_targets_at_level(&samples, level)?;
            let mut tape = Tape::new(self.exec());
            let input_id = tape.constant(input);
            let fwd = self.model.forward(&mut tape, input_id, level, &[], None)?;
            let pred = tape.value(fwd.output);
            let plane: usize = pred.shape()[1..].iter().product();
            for (i, _) in chunk.iter().enumerate() {
                let p = unit_slice(&pred.data()[i * plane..(i + 1) * plane]);
                let t = unit_slice(&target.data()[i * plane..(i + 1) * plane]);
                total += loss::psnr(&p, &t, 1.0);
            }
        }
        Ok(total / indices.len() as f64)
    }

    /// Trains the current stage to `epochs_per_level`, then advances to
    /// the next shallower level. Requesting any other level fails with
    /// a level-order error. On return `last.ckpt` holds the advanced
    /// cursor, so a resumed run continues with the next stage.
    pub fn train_level(&mut self, data: &Dataset<T>, level: usize) -> Result<StageReport, Error> {
        if self.stage == 0 {
            return Err(TrainError::LevelOrder("every stage has already finished".into()).into());
        }
        if level != self.stage {
            return Err(TrainError::LevelOrder(format!(
                "stage order trains level {} next, not level {level}",
                self.stage
            ))
            .into());
        }
        self.check_data(data)?;
        let frozen: Vec<(usize, Vec<T>)> = self
            .model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group < level)
            .map(|(i, p)| (i, p.tensor.data().to_vec()))
            .collect();
        self.log(serde_json::json!({
            "kind": "stage_start",
            "level": level,
            "epoch": self.epoch,
        }))?;
        let last_path = self.cfg.out_dir.join(LAST_CHECKPOINT);
        let mut train_loss = f64::NAN;
        while self.epoch < self.cfg.epochs_per_level {
            let report = self.run_epoch(data, level)?;
            train_loss = report.train_loss;
            if report.val_psnr > self.best_psnr {
                self.best_psnr = report.val_psnr;
                self.save(&self.cfg.out_dir.join(BEST_CHECKPOINT))?;
                io::write_json(
                    &self.cfg.out_dir.join(BEST_FILE),
                    &BestRecord {
                        stage: level,
                        epoch: self.epoch,
                        val_psnr: report.val_psnr,
                    },
                )?;
            }
            if self.epoch % self.cfg.checkpoint_every == 0
                && self.epoch < self.cfg.epochs_per_level
            {
                self.save(&last_path)?;
            }
        }
        for (idx, before) in &frozen {
            let now = self.model.params()[*idx].tensor.data();
            let same = now
                .iter()
                .zip(before)
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits());
            if !same {
                return Err(TrainError::Invalid(format!(
                    "parameter {} changed while training level {level}",
                    self.model.params()[*idx].name
                ))
                .into());
            }
        }
        let val_psnr = self.split_psnr(data, data.val.clone(), level)?;
        self.log(serde_json::json!({
            "kind": "stage_end",
            "level": level,
            "train_loss": train_loss,
            "val_psnr": val_psnr,
        }))?;
        self.advance_stage();
        self.save(&last_path)?;
        Ok(StageReport {
            level,
            train_loss,
            val_psnr,
        })
    }

    fn advance_stage(&mut self) {
        self.stage -= 1;
        self.epoch = 0;
        self.step = 0;
        self.best_psnr = f64::NEG_INFINITY;
        self.moments = fresh_moments(&self.model, self.stage);
    }

    /// Runs every remaining stage in order.
    pub fn run(&mut self, data: &Dataset<T>) -> Result<Vec<StageReport>, Error> {
        let mut reports = Vec::new();
        while self.stage > 0 {
            let level = self.stage;
            reports.push(self.train_level(data, level)?);
        }
        Ok(reports)
    }

    /// Full-resolution metrics over a split, next to a nearest-neighbor
    /// 2x upscale of the input as the no-model baseline.
    pub fn evaluate(
        &self,
        data: &Dataset<T>,
        split: Split,
        disabled: &[usize],
    ) -> Result<EvalReport, Error> {
        evaluate_model(&self.model, data, split, disabled, self.exec())
    }
}

fn fresh_moments<T: Element>(model: &PyNet<T>, stage: usize) -> BTreeMap<usize, Moments<T>> {
    let mut moments = BTreeMap::new();
    if stage >= 1 {
        for idx in model.trainable_set(stage) {
            moments.insert(idx, Moments::zeros(model.params()[idx].tensor.numel()));
        }
    }
    moments
}

fn stack_inputs<T: Element>(samples: &[&Sample<T>]) -> Result<Tensor<T>, Error> {
    let shape = samples[0].input.shape();
    let mut data = Vec::with_capacity(samples.len() * samples[0].input.numel());
    for s in samples {
        data.extend_from_slice(s.input.data());
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(shape);
    Ok(Tensor::new(full, data)?)
}

/// Stacks targets box-averaged down to the level's output scale: level
/// 1 emits at the native target resolution, level `l >= 2` at a factor
/// of `2^l` below it.
fn stack_targets_at_level<T: Element>(
    samples: &[&Sample<T>],
    level: usize,
) -> Result<Tensor<T>, Error> {
    let (mut h, mut w) = match samples[0].target.shape() {
        [3, h, w] => (*h, *w),
        s => {
            return Err(TrainError::Invalid(format!("bad target shape {s:?}")).into());
        }
    };
    let mut data = Vec::with_capacity(samples.len() * samples[0].target.numel());
    for s in samples {
        data.extend_from_slice(s.target.data());
    }
    let downs = if level >= 2 { level } else { 0 };
    let c = samples.len() * 3;
    for _ in 0..downs {
        data = kernels::box_down2(&data, c, h, w);
        h /= 2;
        w /= 2;
    }
    Ok(Tensor::new(vec![samples.len(), 3, h, w], data)?)
}

fn unit_slice<T: Element>(data: &[T]) -> Vec<f64> {
    data.iter().map(|v| (v.to_f64() + 1.0) / 2.0).collect()
}

/// Runs the model on one input ([4, S, S] or [N, 4, S, S]) without
/// recording gradients. Rank-3 inputs come back rank-3.
pub fn infer<T: Element>(
    model: &PyNet<T>,
    input: &Tensor<T>,
    level: usize,
    disabled: &[usize],
    exec: ExecMode,
) -> Result<Tensor<T>, Error> {
    let squeeze = input.rank() == 3;
    let shaped = if squeeze {
        let mut sh = vec![1];
        sh.extend_from_slice(input.shape());
        Tensor::new(sh, input.data().to_vec())?
    } else {
        input.clone()
    };
    let mut tape = Tape::new(exec);
    let id = tape.constant(shaped);
    let fwd = model.forward(&mut tape, id, level, disabled, None)?;
    let out = tape.value(fwd.output);
    if squeeze {
        let sh = out.shape()[1..].to_vec();
        Ok(Tensor::new(sh, out.data().to_vec())?)
    } else {
        Ok(out.clone())
    }
}

/// Full-resolution PSNR and SSIM over a split, for the model and for a
/// nearest-neighbor 2x upscale of the RGB input.
pub fn evaluate_model<T: Element>(
    model: &PyNet<T>,
    data: &Dataset<T>,
    split: Split,
    disabled: &[usize],
    exec: ExecMode,
) -> Result<EvalReport, Error> {
    let range = match split {
        Split::Train => data.train.clone(),
        Split::Val => data.val.clone(),
        Split::Test => data.test.clone(),
    };
    if range.is_empty() {
        return Err(TrainError::Invalid(format!("split {split:?} is empty")).into());
    }
    let s = data.config.input_size;
    let full = 2 * s;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut base_psnr_sum = 0.0;
    let mut base_ssim_sum = 0.0;
    let count = range.len();
    for i in range {
        let sample = &data.samples[i];
        let pred = infer(model, &sample.input, 1, disabled, exec)?;
        let pred_u = unit_slice(pred.data());
        let targ_u = unit_slice(sample.target.data());
        psnr_sum += loss::psnr(&pred_u, &targ_u, 1.0);
        let rgb = &sample.input.data()[..3 * s * s];
        let up = kernels::nn_up2(rgb, 3, s, s);
        let up_u = unit_slice(&up);
        base_psnr_sum += loss::psnr(&up_u, &targ_u, 1.0);

        let shape = vec![3, full, full];
        let pred_t = Tensor::new(shape.clone(), pred_u)?;
        let targ_t = Tensor::new(shape.clone(), targ_u)?;
        ssim_sum += loss::ssim_metric(&pred_t, &targ_t)?;
        let up_t = Tensor::new(shape, up_u)?;
        base_ssim_sum += loss::ssim_metric(&up_t, &targ_t)?;
    }
    let n = count as f64;
    Ok(EvalReport {
        count,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        baseline_psnr: base_psnr_sum / n,
        baseline_ssim: base_ssim_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};
    use crate::model::PyNetConfig;

    fn tiny_dataset(dir: &Path) -> Dataset<f64> {
        let cfg = DatasetConfig {
            pairs: 10,
            input_size: 32,
            seed: 5,
            ..DatasetConfig::default()
        };
        generate_dataset(&cfg, dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    fn tiny_run(out: &Path, data_dir: &Path) -> RunConfig {
        RunConfig {
            data_dir: data_dir.to_path_buf(),
            out_dir: out.to_path_buf(),
            model: PyNetConfig::with_levels(3, 2),
            seed: 42,
            batch_size: 4,
            epochs_per_level: 1,
            learning_rate: 1e-3,
            level1_lr_scale: 0.5,
            checkpoint_every: 1,
            deterministic: false,
        }
    }

    #[test]
    fn stage_order_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&dir.path().join("data"));
        let cfg = tiny_run(&dir.path().join("out"), &dir.path().join("data"));
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        assert_eq!(tr.stage(), Some(3));
        let err = tr.run_epoch(&data, 2).unwrap_err();
        assert!(err.to_string().contains("level 3"), "{err}");
        let err = tr.train_level(&data, 1).unwrap_err();
        assert!(err.to_string().contains("level 3"), "{err}");
    }

    #[test]
    fn one_stage_touches_only_its_groups_and_advances() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&dir.path().join("data"));
        let cfg = tiny_run(&dir.path().join("out"), &dir.path().join("data"));
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        let before: Vec<Vec<f64>> = tr
            .model()
            .params()
            .iter()
            .map(|p| p.tensor.data().to_vec())
            .collect();
        let report = tr.train_level(&data, 3).unwrap();
        assert_eq!(report.level, 3);
        assert!(report.train_loss.is_finite());
        assert_eq!(tr.stage(), Some(2));
        assert_eq!(tr.epoch(), 0);
        let mut changed = 0;
        for (i, p) in tr.model().params().iter().enumerate() {
            let same = p.tensor.data() == before[i].as_slice();
            if p.group >= 3 {
                if !same {
                    changed += 1;
                }
            } else {
                assert!(same, "group {} parameter {} moved", p.group, p.name);
            }
        }
        assert!(changed > 0, "no deep parameter moved at all");
    }

    #[test]
    fn resume_mid_stage_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&dir.path().join("data"));

        let mut cfg_a = tiny_run(&dir.path().join("out_a"), &dir.path().join("data"));
        cfg_a.epochs_per_level = 2;
        let mut straight = Trainer::<f64>::new(cfg_a).unwrap();
        straight.run_epoch(&data, 3).unwrap();
        straight.run_epoch(&data, 3).unwrap();

        let mut cfg_b = tiny_run(&dir.path().join("out_b"), &dir.path().join("data"));
        cfg_b.epochs_per_level = 2;
        let mut first = Trainer::<f64>::new(cfg_b.clone()).unwrap();
        first.run_epoch(&data, 3).unwrap();
        let ckpt = dir.path().join("out_b").join("mid.ckpt");
        first.save(&ckpt).unwrap();
        drop(first);
        let mut resumed = Trainer::<f64>::resume(cfg_b, &ckpt).unwrap();
        assert_eq!(resumed.epoch(), 1);
        resumed.run_epoch(&data, 3).unwrap();

        for (a, b) in straight.model().params().iter().zip(resumed.model().params()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{} diverged", a.name);
        }
        assert_eq!(straight.cursor(), resumed.cursor());
    }

    #[test]
    fn run_covers_all_stages_and_finishes() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&dir.path().join("data"));
        let cfg = tiny_run(&dir.path().join("out"), &dir.path().join("data"));
        let out = cfg.out_dir.clone();
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        let reports = tr.run(&data).unwrap();
        assert_eq!(
            reports.iter().map(|r| r.level).collect::<Vec<_>>(),
            vec![3, 2, 1]
        );
        assert_eq!(tr.stage(), None);
        assert!(out.join(LAST_CHECKPOINT).is_file());
        assert!(out.join(BEST_CHECKPOINT).is_file());
        assert!(out.join(EVENTS_FILE).is_file());
        let err = tr.run_epoch(&data, 1).unwrap_err();
        assert!(err.to_string().contains("finished"), "{err}");

        let (model, meta) = load_model::<f64>(&out.join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(meta.cursor.stage, 0);
        for (a, b) in model.params().iter().zip(tr.model().params()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn evaluation_reports_model_and_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&dir.path().join("data"));
        let cfg = tiny_run(&dir.path().join("out"), &dir.path().join("data"));
        let tr = Trainer::<f64>::new(cfg).unwrap();
        let report = tr.evaluate(&data, Split::Test, &[]).unwrap();
        assert_eq!(report.count, 1);
        assert!(report.psnr.is_finite());
        assert!(report.baseline_psnr > 5.0);
        assert!((-1.0..=1.0).contains(&report.ssim));
        assert!((-1.0..=1.0).contains(&report.baseline_ssim));
    }

    #[test]
    fn inference_squeezes_like_its_input() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&dir.path().join("data"));
        let cfg = tiny_run(&dir.path().join("out"), &dir.path().join("data"));
        let tr = Trainer::<f64>::new(cfg).unwrap();
        let one = infer(
            tr.model(),
            &data.samples[0].input,
            1,
            &[],
            ExecMode::MultiThread,
        )
        .unwrap();
        assert_eq!(one.shape(), [3, 64, 64]);
        for &v in one.data() {
            assert!((-1.0..1.0).contains(&v));
        }
    }
}
