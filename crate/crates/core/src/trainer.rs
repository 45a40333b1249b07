//! The optimisation loop: forward, composite loss, backward, clipped Adam
//! step, batch-norm statistics update, logging and checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gated_tensor::optim::{clip_grad_norm, Adam, AdamConfig};
use gated_tensor::{Graph, Ops, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, LrSchedule, Objective};
use crate::data::{collate, hflip, load_pair, make_batches, scan_dataset, Sample};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LoadOptions};
use crate::losses::{stage_loss, total_loss, LossBreakdown, Stage, StageRecord};
use crate::metrics::{order_independent_mean, psnr};
use crate::model::{Model, BN_MOMENTUM};
use crate::nn::{update_running_stats, Forward, ParamId, ParamKind};

type BnUpdate = (crate::nn::BatchNorm2d, gated_tensor::BatchStats<f32>);

/// Loss values of one step plus the gradients of every trainable tensor.
pub struct StepGradients {
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    /// Trainable parameters that took part in the forward pass, in order.
    pub grads: Vec<(ParamId, Tensor<f32>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: u64,
    pub steps: u64,
    /// Mean total loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// `(epoch, mean PSNR)` of each validation run.
    pub validation: Vec<(u64, f64)>,
    pub best_psnr: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Preprocessed training and validation samples.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    /// Validation samples; when empty the training samples are used.
    pub test: Vec<Sample>,
}

impl TrainData {
    /// Scan and load the dataset named by `config.data`.
    pub fn load(config: &Config) -> Result<Self> {
        let root = config.data_root()?;
        let mut ds = scan_dataset(root, config.data.layout)?;
        if let Some(n) = config.data.train_limit {
            ds.train.truncate(n);
        }
        if let Some(n) = config.data.test_limit {
            ds.test.truncate(n);
        }
        if ds.train.is_empty() {
            return Err(Error::Layout(format!("{} has no training pairs", root.display())));
        }
        let size = Some((config.data.height, config.data.width));
        let opts = LoadOptions {
            replicate_grayscale: config.data.replicate_grayscale,
        };
        let load = |m: &crate::data::DatasetManifest| -> Result<Vec<Sample>> {
            m.entries
                .iter()
                .filter(|e| e.reference.is_some())
                .map(|e| load_pair(e, size, opts))
                .collect()
        };
        log::info!("loading {} train / {} test pairs from {}", ds.train.len(), ds.test.len(), root.display());
        Ok(TrainData {
            train: load(&ds.train)?,
            test: load(&ds.test)?,
        })
    }

    fn validation(&self) -> &[Sample] {
        if self.test.is_empty() {
            &self.train
        } else {
            &self.test
        }
    }
}

pub struct Trainer {
    pub config: Config,
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimiser steps.
    pub step: u64,
    pub best_psnr: Option<f64>,
    /// Length of the learning-rate schedule in steps.
    pub schedule_steps: u64,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.trainer.seed)?;
        let optimizer = Adam::new(AdamConfig::default(), model.params.len());
        Ok(Trainer {
            config,
            model,
            optimizer,
            epoch: 0,
            step: 0,
            best_psnr: None,
            schedule_steps: 1,
        })
    }

    /// Continue from a saved state.
    pub fn resume(config: Config, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        ckpt.restore_into(&mut t.model)?;
        if let Some(opt) = ckpt.optimizer {
            t.optimizer = opt;
        }
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        t.best_psnr = ckpt.best_psnr;
        Ok(t)
    }

    /// Learning rate for the step after `step` completed ones.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let t = &self.config.trainer;
        match t.lr_schedule {
            LrSchedule::Constant => t.learning_rate,
            LrSchedule::Cosine => {
                let total = self.schedule_steps.max(1) as f64;
                let progress = (step as f64 / total).min(1.0);
                t.min_learning_rate
                    + 0.5 * (t.learning_rate - t.min_learning_rate) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Training-mode forward and backward pass without updating anything.
    /// Batch-norm statistics of the pass are returned alongside.
    pub fn compute_gradients(
        &self,
        low: &Tensor<f32>,
        reference: &Tensor<f32>,
    ) -> Result<(StepGradients, Vec<BnUpdate>)> {
        let g = Graph::<f32>::new();
        let fw = Forward::new(&g, &self.model.params, true);
        let x = g.constant(low.clone());
        let y = g.constant(reference.clone());
        let w = &self.config.loss;
        let (loss, losses, total) = match self.config.trainer.objective {
            Objective::Full => {
                let out = self.model.net.forward(&fw, &x)?;
                let terms = total_loss(&g, &out.stage1, &out.output, &y, &out.gamma, w)?;
                let b = LossBreakdown::from_terms(&g, &terms)?;
                (terms.total, b.to_record(), b.total)
            }
            Objective::Stage1 => {
                let s1 = self.model.net.agcm.forward(&fw, &x)?;
                let terms = stage_loss(&g, Stage::One, &s1.image, &y, Some(&s1.gamma), w)?;
                let r = StageRecord::from_terms(&g, &terms)?;
                let mut rec = r.to_record("stage1");
                rec.insert("total".into(), r.total);
                (terms.total, rec, r.total)
            }
        };
        let stats = fw.take_bn_stats();
        if !total.is_finite() {
            return Ok((
                StepGradients {
                    losses,
                    total,
                    grads: Vec::new(),
                },
                stats,
            ));
        }
        let mut back = g.backward(loss)?;
        let grads = fw
            .bound_params()
            .into_iter()
            .filter(|(id, _)| self.model.params.get(*id).kind == ParamKind::Trainable)
            .map(|(id, v)| {
                let grad = back
                    .take(v)
                    .unwrap_or_else(|| self.model.params.tensor(id).zeros_like());
                (id, grad)
            })
            .collect();
        Ok((StepGradients { losses, total, grads }, stats))
    }

    /// One optimisation step on a batch.
    pub fn train_step(&mut self, low: &Tensor<f32>, reference: &Tensor<f32>, ids: &[String]) -> Result<StepRecord> {
        let (step, stats) = self.compute_gradients(low, reference)?;
        let record_step = self.step + 1;
        if !step.total.is_finite() || step.grads.iter().any(|(_, g)| !g.all_finite()) {
            self.dump_nan(record_step, ids, &step.losses);
            return Err(Error::NanLoss {
                step: record_step,
                batch_ids: ids.to_vec(),
            });
        }
        let (ids_, mut grads): (Vec<ParamId>, Vec<Tensor<f32>>) = step.grads.into_iter().unzip();
        let clip = self.config.trainer.grad_clip_norm;
        let grad_norm = if clip > 0.0 {
            clip_grad_norm(&mut grads, clip)
        } else {
            clip_grad_norm(&mut grads, f64::INFINITY)
        };
        let lr = self.learning_rate(self.step);
        let params = &mut self.model.params;
        // Two passes so the optimiser can borrow each tensor mutably.
        let mut taken: Vec<(usize, Tensor<f32>)> = ids_
            .iter()
            .map(|id| (id.0, std::mem::replace(params.tensor_mut(*id), Tensor::scalar(0.0))))
            .collect();
        self.optimizer.step(
            lr,
            taken
                .iter_mut()
                .zip(&grads)
                .map(|((slot, p), g)| (*slot, p, g)),
        );
        for (slot, t) in taken {
            *params.tensor_mut(ParamId(slot)) = t;
        }
        update_running_stats(params, &stats, BN_MOMENTUM);
        self.step = record_step;
        Ok(StepRecord {
            epoch: self.epoch + 1,
            step: self.step,
            lr,
            grad_norm,
            loss: step.losses,
        })
    }

    fn dump_nan(&self, step: u64, ids: &[String], losses: &BTreeMap<String, f64>) {
        let dir = &self.config.trainer.checkpoint_dir;
        let path = dir.join(format!("nan_step{step}.json"));
        let body = serde_json::json!({
            "step": step,
            "epoch": self.epoch + 1,
            "batch_ids": ids,
            // NaN is not JSON; keep the values readable as strings.
            "loss": losses.iter().map(|(k, v)| (k.clone(), v.to_string())).collect::<BTreeMap<_, _>>(),
        });
        let written = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, body.to_string()));
        match written {
            Ok(()) => log::error!("non-finite loss at step {step}; batch written to {}", path.display()),
            Err(e) => log::error!("non-finite loss at step {step} (batch {ids:?}); dump failed: {e}"),
        }
    }

    /// Mean PSNR of the eval-mode model over `samples`.
    pub fn validate(&self, samples: &[Sample]) -> Result<f64> {
        let mut scores = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.trainer.batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = collate(&refs)?;
            let out = self.model.infer(batch.low.tensor())?;
            for (i, s) in chunk.iter().enumerate() {
                let pred = ImageTensor::from_batch(&out.output, i)?;
                scores.push(psnr(&pred, s.reference.as_ref().unwrap(), 1.0)?);
            }
        }
        Ok(order_independent_mean(&scores))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            step: self.step,
            best_psnr: self.best_psnr,
            config: serde_json::to_value(&self.config).expect("plain data serialises"),
        }
    }

    fn epoch_seed(&self, epoch: u64) -> u64 {
        self.config
            .trainer
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch)
    }

    /// Run the configured number of epochs over `data`, calling `on_step`
    /// after every step.
    pub fn fit(&mut self, data: &TrainData, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainSummary> {
        if data.train.is_empty() {
            return Err(Error::Layout("no training samples".into()));
        }
        let tc = self.config.trainer.clone();
        let per_epoch = data.train.len().div_ceil(tc.batch_size) as u64;
        self.schedule_steps = tc.max_steps.unwrap_or(tc.epochs * per_epoch).min(tc.epochs * per_epoch);
        let ckpt_dir = tc.checkpoint_dir.clone();
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let log_path = self.config.log_path();
        let mut log = open_log(&log_path)?;
        let mut summary = TrainSummary {
            best_psnr: self.best_psnr,
            ..Default::default()
        };
        let reached_max = |step: u64| tc.max_steps.is_some_and(|m| step >= m);

        while self.epoch < tc.epochs && !reached_max(self.step) {
            let seed = self.epoch_seed(self.epoch);
            let batches = make_batches(data.train.len(), tc.batch_size, Some(seed))?;
            let mut flip_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF11F);
            let mut losses = Vec::with_capacity(batches.len());
            for idx in batches {
                let flipped: Vec<Sample>;
                let refs: Vec<&Sample> = if self.config.data.hflip {
                    flipped = idx
                        .iter()
                        .map(|&i| {
                            let s = &data.train[i];
                            if flip_rng.random_bool(0.5) {
                                Sample {
                                    low: hflip(&s.low),
                                    reference: s.reference.as_ref().map(hflip),
                                    ..s.clone()
                                }
                            } else {
                                s.clone()
                            }
                        })
                        .collect();
                    flipped.iter().collect()
                } else {
                    idx.iter().map(|&i| &data.train[i]).collect()
                };
                let batch = collate(&refs)?;
                let rec = self.train_step(batch.low.tensor(), batch.reference.tensor(), &batch.ids)?;
                serde_json::to_writer(&mut log, &rec).map_err(|e| Error::io(&log_path, e.into()))?;
                log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
                losses.push(rec.loss["total"]);
                on_step(&rec);
                if reached_max(self.step) {
                    break;
                }
            }
            self.epoch += 1;
            summary.epoch_losses.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
            log.flush().map_err(|e| Error::io(&log_path, e))?;

            let last_epoch = self.epoch == tc.epochs || reached_max(self.step);
            let validate_now = tc.eval_every > 0 && (self.epoch.is_multiple_of(tc.eval_every) || last_epoch);
            if validate_now {
                let v = self.validate(data.validation())?;
                log::info!("epoch {}: validation PSNR {v:.3} dB", self.epoch);
                summary.validation.push((self.epoch, v));
                if self.best_psnr.is_none_or(|b| v > b) {
                    self.best_psnr = Some(v);
                    let path = ckpt_dir.join("best.ckpt");
                    self.checkpoint().save(&path)?;
                    summary.best_checkpoint = Some(path);
                }
            }
            let path = ckpt_dir.join("last.ckpt");
            self.checkpoint().save(&path)?;
            summary.last_checkpoint = Some(path);
        }
        summary.epochs = self.epoch;
        summary.steps = self.step;
        summary.best_psnr = self.best_psnr;
        Ok(summary)
    }
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::options()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Load the configured dataset and train from scratch.
pub fn train(config: Config) -> Result<TrainSummary> {
    let data = TrainData::load(&config)?;
    let mut trainer = Trainer::new(config)?;
    trainer.fit(&data, |rec| {
        log::debug!("step {} loss {:.5} lr {:.2e}", rec.step, rec.loss["total"], rec.lr);
    })
}
