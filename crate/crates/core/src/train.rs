//! Stage-one training: momentum SGD with warmup and linear decay, the
//! host-side loss fed back through a surrogate, and best-epoch tracking.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::data::{letterbox_resize, BoundingBox, LabeledImage};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossOutput};
use crate::metrics::{evaluate, EvalConfig, MetricsReport};
use crate::model::{decode_and_nms, Detection, Detector};
use crate::nn::ParamKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Learning rate at the last epoch as a fraction of `lr`.
    pub final_lr_ratio: f64,
    pub warmup_momentum: f64,
    pub warmup_bias_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            warmup_epochs: 3,
            final_lr_ratio: 0.01,
            warmup_momentum: 0.8,
            warmup_bias_lr: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.warmup_momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::Config("weight_decay must be >= 0 and final_lr_ratio in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning-rate multiplier after warmup: linear from 1 to
    /// `final_lr_ratio` over `epochs`.
    pub fn decay(&self, epoch: usize, epochs: usize) -> f64 {
        let f = epoch as f64 / epochs.max(1) as f64;
        (1.0 - f) * (1.0 - self.final_lr_ratio) + self.final_lr_ratio
    }
}

/// Nesterov momentum SGD; weight decay applies to weight tensors only.
#[derive(Debug, Default)]
pub struct Sgd {
    buffers: Vec<Option<Tensor>>,
}

/// Learning rate and momentum for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub lr: f64,
    pub bias_lr: f64,
    pub momentum: f64,
}

impl Sgd {
    pub fn new() -> Self {
        Sgd::default()
    }

    pub fn step(&mut self, model: &Detector, grads: &GradStore, rates: StepRates, weight_decay: f64) -> Result<()> {
        let params = model.params();
        if self.buffers.len() != params.len() {
            self.buffers = vec![None; params.len()];
        }
        for (i, p) in params.iter().enumerate() {
            if p.group < model.frozen() {
                continue;
            }
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let w = p.var.as_tensor();
            let g = if p.kind == ParamKind::Weight && weight_decay > 0.0 {
                (g + (w * weight_decay)?)?
            } else {
                g.clone()
            };
            let buf = match &self.buffers[i] {
                Some(b) => ((b * rates.momentum)? + &g)?,
                None => g.clone(),
            };
            let update = (&g + (&buf * rates.momentum)?)?;
            let lr = if p.kind == ParamKind::Bias { rates.bias_lr } else { rates.lr };
            p.var.set(&(w - (update * lr)?)?)?;
            self.buffers[i] = Some(buf.detach());
        }
        Ok(())
    }
}

/// Batch of letterboxed images as an `(n, 1, s, s)` tensor in `[0, 1]`.
pub fn images_to_tensor(images: &[&LabeledImage], size: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.width() != size || img.height() != size {
            return Err(Error::Shape(format!(
                "image {} is {}x{}, expected {size}x{size}",
                img.source_id,
                img.width(),
                img.height()
            )));
        }
        data.extend(img.pixels.to_luma_f32());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, size, size), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Images at the model's input size; already-sized ones are borrowed.
fn fit<'a>(images: &'a [LabeledImage], size: usize) -> Vec<std::borrow::Cow<'a, LabeledImage>> {
    images
        .iter()
        .map(|img| {
            if img.width() == size && img.height() == size {
                std::borrow::Cow::Borrowed(img)
            } else {
                std::borrow::Cow::Owned(letterbox_resize(img, size))
            }
        })
        .collect()
}

/// Runs the loss on one batch and backpropagates it. The returned gradients
/// are those of `scale * total`.
pub fn loss_and_grads(
    model: &Detector,
    x: &Tensor,
    targets: &[Vec<BoundingBox>],
    cfg: &LossConfig,
    scale: f64,
) -> Result<(LossOutput, GradStore)> {
    let raw = model.forward_t(x, true)?;
    let out = model.to_output(&raw)?;
    let lambda = cfg.reg_lambda();
    let mut reg = None;
    let mut w2 = 0.0;
    if lambda > 0.0 {
        let mut acc: Option<Tensor> = None;
        for p in model.weight_params() {
            let s = p.var.as_tensor().sqr()?.sum_all()?;
            acc = Some(match acc {
                Some(a) => (a + s)?,
                None => s,
            });
        }
        if let Some(a) = acc {
            w2 = a.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            reg = Some((a * (lambda * scale))?);
        }
    }
    let lo = total_loss(&out, targets, cfg, w2)?;
    let mut surrogate: Option<Tensor> = reg;
    for (t, g) in raw.iter().zip(&lo.grads) {
        let gt = Tensor::from_vec(g.iter().map(|v| v * scale).collect::<Vec<f64>>(), t.dims(), &Device::Cpu)?
            .to_dtype(t.dtype())?;
        let s = (t * gt)?.sum_all()?;
        surrogate = Some(match surrogate {
            Some(a) => (a + s)?,
            None => s,
        });
    }
    let surrogate = surrogate.ok_or_else(|| Error::Shape("model produced no outputs".into()))?;
    let grads = surrogate.backward()?;
    Ok((lo, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            conf_thresh: 0.001,
            nms_iou: 0.6,
            batch_size: 16,
        }
    }
}

/// Detections per image, in the coordinates of the letterboxed input.
pub fn predict(model: &Detector, images: &[LabeledImage], cfg: &InferenceConfig) -> Result<Vec<Vec<Detection>>> {
    let size = model.config().input_size;
    let fitted = fit(images, size);
    let mut out = Vec::with_capacity(images.len());
    for chunk in fitted.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&LabeledImage> = chunk.iter().map(|c| c.as_ref()).collect();
        let x = images_to_tensor(&refs, size, model.dtype())?;
        let o = model.forward(&x)?;
        out.extend(decode_and_nms(&o, cfg.conf_thresh, cfg.nms_iou));
    }
    Ok(out)
}

/// Detection metrics of `model` on labelled images.
pub fn validate(model: &Detector, images: &[LabeledImage], infer: &InferenceConfig, eval: &EvalConfig) -> Result<MetricsReport> {
    let size = model.config().input_size;
    let dets = predict(model, images, infer)?;
    let fitted = fit(images, size);
    let d: Vec<(String, Vec<Detection>)> = images.iter().map(|i| i.source_id.clone()).zip(dets).collect();
    let g: Vec<(String, Vec<BoundingBox>)> = fitted.iter().map(|i| (i.source_id.clone(), i.boxes.clone())).collect();
    evaluate(&d, &g, eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub augment: Option<AugPolicy>,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    /// Gradients are those of `batch_size * loss` when set.
    pub scale_loss_by_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            augment: None,
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            scale_loss_by_batch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValScores {
    pub map50: f64,
    pub map5095: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub val: Option<ValScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights the model holds on return.
    pub best_epoch: usize,
    /// Validation metrics of the restored best model, when validating.
    pub best: Option<MetricsReport>,
}

impl TrainReport {
    pub fn write_steps_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        let scales = self.steps.first().map_or(0, |s| s.loss.per_scale_objectness.len());
        write!(w, "epoch,step,lr,box_ciou,objectness,classification,regularization,total")?;
        for s in 0..scales {
            write!(w, ",objectness_scale{s}")?;
        }
        writeln!(w)?;
        for s in &self.steps {
            let l = &s.loss;
            write!(
                w,
                "{},{},{},{},{},{},{},{}",
                s.epoch, s.step, s.lr, l.box_ciou, l.objectness, l.classification, l.regularization, l.total
            )?;
            for v in &l.per_scale_objectness {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn snapshot(model: &Detector) -> Result<(Vec<Tensor>, Vec<crate::nn::RunningStats>)> {
    let params = model.params().iter().map(|p| p.var.as_tensor().copy()).collect::<candle_core::Result<_>>()?;
    let stats = model
        .buffers()
        .iter()
        .map(|b| b.stats.lock().expect("stats lock").clone())
        .collect();
    Ok((params, stats))
}

fn restore(model: &Detector, snap: &(Vec<Tensor>, Vec<crate::nn::RunningStats>)) -> Result<()> {
    for (p, t) in model.params().iter().zip(&snap.0) {
        p.var.set(t)?;
    }
    for (b, s) in model.buffers().iter().zip(&snap.1) {
        *b.stats.lock().expect("stats lock") = s.clone();
    }
    Ok(())
}

/// Trains `model` in place on `train`. With a validation set, every epoch is
/// scored by mAP@.5:.95 and the best-scoring weights are left in the model;
/// without one the model keeps the weights of the last epoch.
pub fn train(
    model: &Detector,
    train: &[LabeledImage],
    val: Option<&[LabeledImage]>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split".into()));
    }
    if val.is_some_and(|v| v.is_empty()) {
        return Err(Error::EmptyDataset("validation split".into()));
    }
    let size = model.config().input_size;
    let opt = &cfg.optimizer;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new();
    let nb = train.len().div_ceil(cfg.batch_size);
    let warmup_iters = opt.warmup_epochs * nb;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, MetricsReport, _)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut it = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let base_lr = opt.lr * opt.decay(epoch, cfg.epochs);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let rates = if it < warmup_iters {
                let f = (it as f64) / warmup_iters as f64;
                StepRates {
                    lr: base_lr * f,
                    bias_lr: opt.warmup_bias_lr + (base_lr - opt.warmup_bias_lr) * f,
                    momentum: opt.warmup_momentum + (opt.momentum - opt.warmup_momentum) * f,
                }
            } else {
                StepRates {
                    lr: base_lr,
                    bias_lr: base_lr,
                    momentum: opt.momentum,
                }
            };
            let imgs: Vec<LabeledImage> = batch
                .iter()
                .map(|&i| {
                    let img = match &cfg.augment {
                        Some(p) => p.apply(&train[i], train, &mut rng),
                        None => train[i].clone(),
                    };
                    if img.width() == size && img.height() == size {
                        img
                    } else {
                        letterbox_resize(&img, size)
                    }
                })
                .collect();
            let refs: Vec<&LabeledImage> = imgs.iter().collect();
            let x = images_to_tensor(&refs, size, model.dtype())?;
            let targets: Vec<Vec<BoundingBox>> = imgs.iter().map(|i| i.boxes.clone()).collect();
            let scale = if cfg.scale_loss_by_batch { imgs.len() as f64 } else { 1.0 };
            let (lo, grads) = loss_and_grads(model, &x, &targets, &cfg.loss, scale)?;
            if !lo.breakdown.total.is_finite() {
                return Err(Error::Shape(format!("non-finite loss at epoch {epoch} step {step}")));
            }
            sgd.step(model, &grads, rates, opt.weight_decay)?;
            total += lo.breakdown.total;
            steps.push(StepLog {
                epoch,
                step,
                lr: rates.lr,
                loss: lo.breakdown,
            });
            it += 1;
        }
        let mean_total = total / nb as f64;
        let Some(val) = val else {
            log::info!("epoch {epoch}: loss {mean_total:.4}");
            epochs.push(EpochLog {
                epoch,
                mean_total,
                val: None,
            });
            continue;
        };
        let report = validate(model, val, &cfg.inference, &cfg.eval)?;
        log::info!(
            "epoch {epoch}: loss {mean_total:.4} val mAP@.5 {:.4} mAP@.5:.95 {:.4}",
            report.map50,
            report.map5095
        );
        epochs.push(EpochLog {
            epoch,
            mean_total,
            val: Some(ValScores {
                map50: report.map50,
                map5095: report.map5095,
                precision: report.precision,
                recall: report.recall,
            }),
        });
        if best.as_ref().is_none_or(|b| report.map5095 > b.0) {
            best = Some((report.map5095, epoch, report, snapshot(model)?));
        }
    }
    match best {
        Some((_, best_epoch, report, snap)) => {
            restore(model, &snap)?;
            Ok(TrainReport {
                steps,
                epochs,
                best_epoch,
                best: Some(report),
            })
        }
        None => Ok(TrainReport {
            steps,
            epochs,
            best_epoch: cfg.epochs - 1,
            best: None,
        }),
    }
}
