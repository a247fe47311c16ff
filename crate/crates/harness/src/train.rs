//! Training loop and evaluation.
//!
//! Every random choice of iteration `it` (image, crop, dihedral element, σ,
//! noise) comes from seeds derived from `(seed, it, sample)` only, so a run
//! is reproducible bit for bit and resuming from a checkpoint continues the
//! exact same sample stream.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ddt_core::{Checkpoint, Model, OptimizerState, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{crop, dihedral, Dataset};
use crate::error::{HarnessError, Result};
use crate::metrics::{psnr, ssim};
use crate::optim::{adamw_step, cosine_lr};
use crate::synth::{derive_seed, synth_pair};

const STREAM_BATCH: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// Mean absolute error.
pub fn l1_loss<'t, T: Scalar>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
) -> ddt_core::Result<Var<'t, T>> {
    Ok(pred.sub(target)?.abs().mean_all())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss: f64,
    /// Mean over the batch of PSNR(clamped prediction, clean); identical
    /// images are reported as `inf`.
    pub psnr: f64,
    pub ssim: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

/// A training batch: noisy inputs and clean targets, both [B, 3, P, P].
pub struct Batch<T: Scalar> {
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
}

fn stack<T: Scalar>(items: &[Tensor<T>]) -> Tensor<T> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Tensor::new(&shape, data).expect("equal item shapes")
}

/// Deterministic batch for iteration `it`.
pub fn make_batch<T: Scalar>(cfg: &TrainConfig, data: &Dataset<T>, it: u64) -> Result<Batch<T>> {
    let side = cfg.patch_side(it);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_BATCH, it));
    let (mut noisy, mut clean) = (Vec::new(), Vec::new());
    for b in 0..cfg.batch_size {
        let idx = rng.random_range(0..data.len());
        let img = &data.images[idx];
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if h < side || w < side {
            return Err(HarnessError::Config(format!(
                "training image {idx} ({h}x{w}) is smaller than the {side}x{side} patch"
            )));
        }
        let y = rng.random_range(0..=h - side);
        let x = rng.random_range(0..=w - side);
        let k = if cfg.augment {
            rng.random_range(0..8u8)
        } else {
            0
        };
        let [lo, hi] = cfg.sigma_range;
        let sigma = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let noise_seed = if cfg.resample_noise {
            derive_seed(
                cfg.seed,
                STREAM_NOISE,
                it * cfg.batch_size as u64 + b as u64,
            )
        } else {
            derive_seed(cfg.seed, STREAM_NOISE, idx as u64)
        };
        let pair = synth_pair(img, sigma, noise_seed)?;
        clean.push(dihedral(&crop(&pair.clean, y, x, side), k));
        noisy.push(dihedral(&crop(&pair.noisy, y, x, side), k));
    }
    Ok(Batch {
        noisy: stack(&noisy),
        clean: stack(&clean),
    })
}

fn image_at<T: Scalar>(batch: &Tensor<T>, i: usize) -> Tensor<T> {
    let s = batch.shape();
    let per = s[1..].iter().product::<usize>();
    Tensor::new(&s[1..], batch.data()[i * per..(i + 1) * per].to_vec()).expect("slice matches")
}

/// Mean PSNR and SSIM over the images of a batch.
pub fn batch_quality<T: Scalar>(pred: &Tensor<T>, clean: &Tensor<T>) -> Result<(f64, f64)> {
    let n = pred.shape()[0];
    let (mut p, mut s) = (0.0, 0.0);
    for i in 0..n {
        let (a, b) = (image_at(pred, i), image_at(clean, i));
        p += psnr(&a, &b, 1.0)?;
        s += ssim(&a, &b, 1.0)?;
    }
    Ok((p / n as f64, s / n as f64))
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub iteration: u64,
    pub cfg: TrainConfig,
}

/// What one optimisation step produced.
pub struct StepOutput<T: Scalar> {
    pub loss: f64,
    pub lr: f64,
    pub prediction: Tensor<T>,
    pub clean: Tensor<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(model.config())?;
        Ok(Trainer {
            model,
            optimizer: OptimizerState {
                step: 0,
                first: ParamStore::new(),
                second: ParamStore::new(),
            },
            iteration: 0,
            cfg,
        })
    }

    /// Continues from a checkpoint whose network config must match the
    /// model's.
    pub fn resume(mut model: Model<T>, cfg: TrainConfig, ckpt: Checkpoint<T>) -> Result<Self> {
        model.load_params(&ckpt.params)?;
        let mut trainer = Self::new(model, cfg)?;
        if let Some(opt) = ckpt.optimizer {
            trainer.optimizer = opt;
        }
        trainer.iteration = ckpt.iteration;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            iteration: self.iteration,
            seed: self.cfg.seed,
        }
    }

    /// One step on the deterministic batch of the current iteration. A
    /// non-finite loss leaves parameters untouched and returns
    /// [`HarnessError::NonFinite`].
    pub fn step(&mut self, data: &Dataset<T>) -> Result<StepOutput<T>> {
        let it = self.iteration;
        let batch = make_batch(&self.cfg, data, it)?;
        let lr = cosine_lr(it, self.cfg.iterations, self.cfg.lr_init, self.cfg.lr_final);
        let tape = Tape::with_finite_check(false);
        let x = tape.constant(batch.noisy);
        let target = tape.constant(batch.clean.clone());
        let pred = self.model.forward(&tape, x)?;
        let loss = l1_loss(pred, target)?;
        let loss_value = loss.value().item().to_f64().unwrap_or(f64::NAN);
        if !loss_value.is_finite() {
            return Err(HarnessError::NonFinite {
                iteration: it,
                loss: loss_value,
                diagnostic: None,
            });
        }
        let grads = tape.backward(loss)?;
        let t = self.optimizer.step + 1;
        adamw_step(
            &mut self.model.params,
            &grads,
            &mut self.optimizer,
            t,
            lr,
            &self.cfg.adamw(),
        )?;
        self.iteration += 1;
        Ok(StepOutput {
            loss: loss_value,
            lr,
            prediction: pred.value(),
            clean: batch.clean,
        })
    }

    /// Runs until `cfg.iterations`, logging every `log_every` steps and on
    /// the last one. With `out_dir` set, metrics stream to `metrics.csv`,
    /// periodic checkpoints go to `checkpoint_XXXXXXXX.ddt`, the final one to
    /// `final.ddt`, and a non-finite loss writes `diagnostic.ddt`.
    pub fn run(&mut self, data: &Dataset<T>, out_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
        if data.is_empty() {
            return Err(HarnessError::Config("training dataset is empty".into()));
        }
        let mut writer = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(csv::Writer::from_writer(File::create(
                    dir.join("metrics.csv"),
                )?))
            }
            None => None,
        };
        let start = Instant::now();
        let mut rows = Vec::new();
        while self.iteration < self.cfg.iterations {
            let out = match self.step(data) {
                Ok(out) => out,
                Err(HarnessError::NonFinite {
                    iteration, loss, ..
                }) => {
                    let diagnostic = match out_dir {
                        Some(dir) => {
                            let path = dir.join("diagnostic.ddt");
                            self.checkpoint().save(&path)?;
                            Some(path)
                        }
                        None => None,
                    };
                    return Err(HarnessError::NonFinite {
                        iteration,
                        loss,
                        diagnostic,
                    });
                }
                Err(e) => return Err(e),
            };
            let done = self.iteration;
            if done.is_multiple_of(self.cfg.log_every.max(1)) || done == self.cfg.iterations {
                let (p, s) = batch_quality(&out.prediction, &out.clean)?;
                let row = MetricsRow {
                    iter: done,
                    loss: out.loss,
                    psnr: p,
                    ssim: s,
                    lr: out.lr,
                    wall_time_s: if self.cfg.log_wall_time {
                        start.elapsed().as_secs_f64()
                    } else {
                        0.0
                    },
                };
                if let Some(w) = writer.as_mut() {
                    w.serialize(&row)?;
                    w.flush()?;
                }
                rows.push(row);
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && done.is_multiple_of(self.cfg.checkpoint_every) {
                    self.checkpoint()
                        .save(dir.join(format!("checkpoint_{done:08}.ddt")))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join("final.ddt"))?;
        }
        Ok(rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sigma: f64,
    pub images: usize,
    pub psnr_noisy: f64,
    pub ssim_noisy: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-σ mean quality of the noisy input and of the model output over
/// `images` ([3, H, W], any size: inputs are reflect-padded to the network's
/// size multiple and cropped back). Noise seeds depend only on `seed`, σ
/// and the image index.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    images: &[Tensor<T>],
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if images.is_empty() {
        return Err(HarnessError::Config("evaluation set is empty".into()));
    }
    let mut rows = Vec::new();
    for &sigma in sigmas {
        let stream = derive_seed(seed, STREAM_EVAL, sigma.to_bits());
        let mut acc = [0.0f64; 4];
        for (i, img) in images.iter().enumerate() {
            let pair = synth_pair(img, sigma, derive_seed(stream, 0, i as u64))?;
            let s = pair.noisy.shape().to_vec();
            let input = pair.noisy.reshaped(&[1, s[0], s[1], s[2]])?;
            let out = model.infer_padded(&input)?.reshaped(&s)?;
            acc[0] += psnr(&pair.noisy, img, 1.0)?;
            acc[1] += ssim(&pair.noisy, img, 1.0)?;
            acc[2] += psnr(&out, img, 1.0)?;
            acc[3] += ssim(&out, img, 1.0)?;
        }
        let n = images.len() as f64;
        rows.push(EvalRow {
            sigma,
            images: images.len(),
            psnr_noisy: acc[0] / n,
            ssim_noisy: acc[1] / n,
            psnr: acc[2] / n,
            ssim: acc[3] / n,
        });
    }
    Ok(rows)
}

/// Writes evaluation rows as CSV.
pub fn write_eval_csv(rows: &[EvalRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Path of the final checkpoint inside a training output directory.
pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join("final.ddt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PatchStage;
    use ddt_core::NetworkConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_size: 2,
            patch_schedule: vec![PatchStage { start: 0, side: 32 }],
            log_every: 1,
            log_wall_time: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn l1_values() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 + 0.5));
        assert_eq!(l1_loss(a, a).unwrap().value().item(), 0.0);
        assert_eq!(l1_loss(b, a).unwrap().value().item(), 0.5);
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(l1_loss(a, c).is_err());
    }

    #[test]
    fn zero_noise_identity_model_has_zero_loss() {
        let model = Model::<f32>::build(&NetworkConfig::toy(), 0).unwrap();
        let cfg = TrainConfig {
            augment: false,
            sigma_range: [0.0, 0.0],
            ..tiny_cfg()
        };
        let data = Dataset::procedural(2, 48, 1);
        let mut trainer = Trainer::new(model, cfg).unwrap();
        assert_eq!(trainer.step(&data).unwrap().loss, 0.0);
    }

    #[test]
    fn batches_are_deterministic() {
        let data = Dataset::<f32>::procedural(3, 48, 1);
        let cfg = tiny_cfg();
        let a = make_batch(&cfg, &data, 7).unwrap();
        let b = make_batch(&cfg, &data, 7).unwrap();
        let c = make_batch(&cfg, &data, 8).unwrap();
        assert_eq!(a.noisy, b.noisy);
        assert_ne!(a.noisy, c.noisy);
        assert_eq!(a.noisy.shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = Dataset::<f32>::procedural(2, 32, 4);
        let cfg = tiny_cfg();
        let build = || Model::<f32>::build(&NetworkConfig::toy(), 5).unwrap();
        let mut full = Trainer::new(build(), cfg.clone()).unwrap();
        full.run(&data, None).unwrap();

        let mut first = Trainer::new(
            build(),
            TrainConfig {
                iterations: 3,
                ..cfg.clone()
            },
        )
        .unwrap();
        first.step(&data).unwrap();
        let ckpt = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let mut resumed = Trainer::resume(build(), cfg, ckpt).unwrap();
        resumed.run(&data, None).unwrap();
        assert_eq!(resumed.model.params, full.model.params);
    }

    #[test]
    fn identity_model_eval_matches_noisy_input() {
        let model = Model::<f32>::build(&NetworkConfig::toy(), 0).unwrap();
        let data = Dataset::<f32>::procedural(2, 40, 9);
        let rows = evaluate(&model, &data.images, &[15.0, 50.0], 3).unwrap();
        for r in &rows {
            assert_eq!(r.psnr, r.psnr_noisy);
            assert_eq!(r.ssim, r.ssim_noisy);
        }
        assert!(rows[0].psnr > rows[1].psnr);
        assert!(evaluate(&model, &[], &[15.0], 3).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let mut model = Model::<f32>::build(&NetworkConfig::toy(), 0).unwrap();
        let w = model.params.get_mut("output.bias").unwrap();
        *w = Tensor::full(w.shape(), f32::NAN);
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(model, tiny_cfg()).unwrap();
        let err = trainer
            .run(&Dataset::procedural(1, 32, 0), Some(dir.path()))
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(dir.path().join("diagnostic.ddt").exists());
    }
}
