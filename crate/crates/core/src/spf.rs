//! Stage two: pseudo-label the unlabelled target domain with the stage-one
//! model, keep the images with the most confident detections, and fine-tune
//! the head with the backbone frozen.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{letterbox_with_transform, BoundingBox, ImageSource, LabeledImage, Letterbox};
use crate::error::{Error, IoContext, Result};
use crate::losses::ObjectnessMode;
use crate::model::{decode_and_nms, Detection, Detector};
use crate::train::{images_to_tensor, train, TrainConfig, TrainReport};

/// Upper bound on the selected fraction of the target domain.
pub const H_MAX: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpfConfig {
    /// Minimum detection confidence for a pseudo-box.
    pub gate: f64,
    pub alpha: f64,
    pub h_max: f64,
    pub finetune_epochs: usize,
    pub freeze_n: usize,
    /// Fine-tuning learning rate as a fraction of the stage-one rate.
    pub lr_scale: f64,
    pub objectness: ObjectnessMode,
    pub nms_iou: f64,
    pub batch_size: usize,
}

impl Default for SpfConfig {
    fn default() -> Self {
        SpfConfig {
            gate: 0.8,
            alpha: 0.3,
            h_max: H_MAX,
            finetune_epochs: 3,
            freeze_n: 10,
            lr_scale: 0.1,
            objectness: ObjectnessMode::Focal,
            nms_iou: 0.6,
            batch_size: 16,
        }
    }
}

impl SpfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gate) {
            return Err(Error::Config(format!("gate {} outside [0, 1]", self.gate)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.h_max > 0.0 && self.h_max <= H_MAX) {
            return Err(Error::Config(format!("h_max {} outside (0, {H_MAX}]", self.h_max)));
        }
        if !(2..=3).contains(&self.finetune_epochs) {
            return Err(Error::Config(format!(
                "finetune_epochs {} must be 2 or 3",
                self.finetune_epochs
            )));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Config(format!("lr_scale {} must be positive", self.lr_scale)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || self.batch_size == 0 {
            return Err(Error::Config("nms_iou must lie in [0, 1] and batch_size be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub image_id: String,
    /// Boxes normalized to the original image.
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoEntry>,
    pub gate: f64,
    pub source_model_id: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    image_id: String,
    gate: f64,
    detections: Vec<ManifestBox>,
    #[serde(default)]
    source_model_id: String,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn box_count(&self) -> usize {
        self.entries.iter().map(|e| e.detections.len()).sum()
    }

    /// One JSON object per line: `{image_id, gate, detections: [{cx, cy, w, h, confidence}]}`.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            let line = ManifestLine {
                image_id: e.image_id.clone(),
                gate: self.gate,
                detections: e
                    .detections
                    .iter()
                    .map(|d| ManifestBox {
                        cx: d.bbox.cx,
                        cy: d.bbox.cy,
                        w: d.bbox.w,
                        h: d.bbox.h,
                        confidence: d.confidence,
                    })
                    .collect(),
                source_model_id: self.source_model_id.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").ctx(|| "buffering manifest".into())?;
        }
        fs::write(path, out).ctx(|| format!("writing {}", path.display()))
    }

    pub fn read_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        let mut entries = Vec::new();
        let mut gate = None;
        let mut source_model_id = String::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let m: ManifestLine = serde_json::from_str(line)?;
            if gate.is_some_and(|g| g != m.gate) {
                return Err(Error::Config(format!("{}: mixed gates in one manifest", path.display())));
            }
            gate = Some(m.gate);
            source_model_id = m.source_model_id;
            let detections = m
                .detections
                .iter()
                .map(|b| {
                    Ok(Detection {
                        bbox: BoundingBox::crater(b.cx, b.cy, b.w, b.h)?,
                        confidence: b.confidence,
                        class_id: 0,
                    })
                })
                .collect::<Result<_>>()?;
            entries.push(PseudoEntry {
                image_id: m.image_id,
                detections,
            });
        }
        Ok(PseudoLabelSet {
            entries,
            gate: gate.unwrap_or(0.0),
            source_model_id,
        })
    }
}

fn unmap(d: &Detection, lb: &Letterbox) -> Option<Detection> {
    if lb.is_identity() {
        return Some(*d);
    }
    let bbox = lb.unmap_box(&d.bbox).clipped()?;
    Some(Detection { bbox, ..*d })
}

/// Runs `model` over every target image and keeps the detections whose
/// confidence reaches `cfg.gate`. Only pixels are read from `target`.
pub fn generate_pseudo_labels(
    model: &Detector,
    target: &dyn ImageSource,
    cfg: &SpfConfig,
    source_model_id: &str,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyDataset("target domain".into()));
    }
    let size = model.config().input_size;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(target.len());
    let indices: Vec<usize> = (0..target.len()).collect();
    for chunk in indices.chunks(cfg.batch_size) {
        let mut fitted = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let id = target.image_id(i).to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::IdMismatch(format!("duplicate target image id {id}")));
            }
            let img = LabeledImage::unlabeled(target.pixels(i)?, id);
            fitted.push(letterbox_with_transform(&img, size));
        }
        let refs: Vec<&LabeledImage> = fitted.iter().map(|(img, _)| img).collect();
        let x = images_to_tensor(&refs, size, model.dtype())?;
        let out = model.forward(&x)?;
        for ((img, lb), dets) in fitted.iter().zip(decode_and_nms(&out, cfg.gate, cfg.nms_iou)) {
            entries.push(PseudoEntry {
                image_id: img.source_id.clone(),
                detections: dets.iter().filter_map(|d| unmap(d, lb)).collect(),
            });
        }
    }
    Ok(PseudoLabelSet {
        entries,
        gate: cfg.gate,
        source_model_id: source_model_id.to_string(),
    })
}

/// Selected fraction of the target domain: `min(n1 * alpha / n2, 0.3)`.
pub fn compute_h(n1: usize, n2: usize, alpha: f64) -> Result<f64> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::Config(format!("image counts must be positive (n1 {n1}, n2 {n2})")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha {alpha} must be positive")));
    }
    Ok((n1 as f64 * alpha / n2 as f64).min(H_MAX))
}

/// Number of images kept out of `n` for fraction `h`: `ceil(h * n)`, at least one.
pub fn selection_size(h: f64, n: usize) -> usize {
    (((h * n as f64) - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Entries ordered by detection count (descending, ties by image id), cut to
/// the first `ceil(h * N)`.
pub fn sort_and_select(pls: &PseudoLabelSet, h: f64) -> Result<PseudoLabelSet> {
    if !(h > 0.0 && h <= H_MAX) {
        return Err(Error::Config(format!("h {h} outside (0, {H_MAX}]")));
    }
    let mut entries = pls.entries.clone();
    entries.sort_by(|a, b| {
        b.detections
            .len()
            .cmp(&a.detections.len())
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    entries.truncate(selection_size(h, pls.entries.len()));
    Ok(PseudoLabelSet {
        entries,
        gate: pls.gate,
        source_model_id: pls.source_model_id.clone(),
    })
}

/// Training images for the selected entries, with pseudo-boxes as labels.
pub fn pseudo_labelled_images(selected: &PseudoLabelSet, target: &dyn ImageSource) -> Result<Vec<LabeledImage>> {
    let index: HashMap<&str, usize> = (0..target.len()).map(|i| (target.image_id(i), i)).collect();
    selected
        .entries
        .iter()
        .map(|e| {
            let &i = index
                .get(e.image_id.as_str())
                .ok_or_else(|| Error::IdMismatch(format!("pseudo-labelled image {} not in the target set", e.image_id)))?;
            let boxes = e.detections.iter().map(|d| d.bbox).collect();
            LabeledImage::new(target.pixels(i)?, boxes, e.image_id.clone())
        })
        .collect()
}

/// Fine-tunes `model` on the selected pseudo-labelled images with the first
/// `cfg.freeze_n` layer groups frozen. Starts from the stage-one training
/// configuration with the learning rate scaled by `cfg.lr_scale`, no warmup,
/// and `cfg.objectness` as objectness mode.
pub fn finetune(
    model: &mut Detector,
    selected: &PseudoLabelSet,
    target: &dyn ImageSource,
    stage_one: &TrainConfig,
    cfg: &SpfConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if selected.is_empty() || selected.box_count() == 0 {
        return Err(Error::EmptyPseudoLabels { gate: selected.gate });
    }
    let images = pseudo_labelled_images(selected, target)?;
    model.freeze_layers(cfg.freeze_n)?;
    let mut tc = stage_one.clone();
    tc.epochs = cfg.finetune_epochs;
    tc.optimizer.lr *= cfg.lr_scale;
    tc.optimizer.warmup_epochs = 0;
    tc.loss.objectness = cfg.objectness;
    train(model, &images, None, &tc, seed)
}
