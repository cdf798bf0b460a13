//! Experiment configuration and the two-stage pipeline driver.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::augment::select_policy;
use crate::data::{
    generate_synthetic_domain, load_all, load_box_dataset, split_dataset, write_box_dataset, Complexity,
    DirSource, DomainProfile, GeneratedDomain, GuardedSource, ImageSource, LabeledImage, MemorySource,
};
use crate::error::{Error, IoContext, Result};
use crate::losses::ObjectnessMode;
use crate::metrics::MetricsReport;
use crate::model::{default_anchors, load_checkpoint, save_checkpoint, Detector, DetectorConfig};
use crate::plot::write_pr_png;
use crate::spf::{compute_h, finetune, generate_pseudo_labels, sort_and_select, PseudoLabelSet, SpfConfig};
use crate::train::{train, validate, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ComplexToSimple,
    SimpleToComplex,
}

impl Direction {
    pub fn source_complexity(self) -> Complexity {
        match self {
            Direction::ComplexToSimple => Complexity::Complex,
            Direction::SimpleToComplex => Complexity::Simple,
        }
    }
}

/// Which of the three adaptation components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Components {
    pub asaf: bool,
    pub shem: bool,
    /// Training-time augmentation plus pseudo-label fine-tuning.
    pub bot: bool,
}

impl Components {
    pub const BASELINE: Components = Components {
        asaf: false,
        shem: false,
        bot: false,
    };
    pub const FULL: Components = Components {
        asaf: true,
        shem: true,
        bot: true,
    };

    pub fn for_direction(d: Direction) -> Self {
        match d {
            Direction::ComplexToSimple => Components::FULL,
            Direction::SimpleToComplex => Components {
                asaf: false,
                shem: false,
                bot: true,
            },
        }
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [(self.asaf, "asaf"), (self.shem, "shem"), (self.bot, "bot")]
            .iter()
            .filter(|c| c.0)
            .map(|c| c.1)
            .collect();
        if on.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&on.join("+"))
        }
    }
}

/// The eight ablation rows, numbered from 1: none, SHEM, BOT, ASAF,
/// ASAF+BOT, SHEM+BOT, ASAF+SHEM, all three.
pub const ABLATION_ROWS: [Components; 8] = {
    const fn c(asaf: bool, shem: bool, bot: bool) -> Components {
        Components { asaf, shem, bot }
    }
    [
        c(false, false, false),
        c(false, true, false),
        c(false, false, true),
        c(true, false, false),
        c(true, false, true),
        c(false, true, true),
        c(true, true, false),
        c(true, true, true),
    ]
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    /// `"lunar"` or `"mars"`.
    Preset(String),
    Custom(DomainProfile),
}

impl ProfileSpec {
    pub fn resolve(&self) -> Result<DomainProfile> {
        match self {
            ProfileSpec::Preset(name) => match name.as_str() {
                "lunar" => Ok(DomainProfile::lunar_like()),
                "mars" => Ok(DomainProfile::mars_like()),
                other => Err(Error::Config(format!("unknown profile preset {other:?} (expected lunar or mars)"))),
            },
            ProfileSpec::Custom(p) => Ok(p.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    Synthetic {
        profile: ProfileSpec,
        count: usize,
        image_size: usize,
        seed: u64,
    },
    /// A box dataset directory (`images/` and `labels/`, or both side by side).
    Directory { path: PathBuf },
}

impl DomainSpec {
    pub fn complexity(&self) -> Result<Option<Complexity>> {
        match self {
            DomainSpec::Synthetic { profile, .. } => Ok(Some(profile.resolve()?.complexity)),
            DomainSpec::Directory { .. } => Ok(None),
        }
    }

    /// Every image with its labels.
    pub fn load(&self) -> Result<Vec<LabeledImage>> {
        match self {
            DomainSpec::Synthetic {
                profile,
                count,
                image_size,
                seed,
            } => generate_synthetic_domain(&profile.resolve()?, *count, *image_size, *seed),
            DomainSpec::Directory { path } => load_box_dataset(path),
        }
    }

    /// Read access that keeps pixels and labels apart.
    pub fn open(&self) -> Result<Box<dyn ImageSource>> {
        match self {
            DomainSpec::Synthetic { .. } => Ok(Box::new(MemorySource::new(self.load()?))),
            DomainSpec::Directory { path } => Ok(Box::new(DirSource::open(path)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDataset {
    SourceVal,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Defaults to the fine-tuned checkpoint, or the stage-one one when
    /// there is none.
    pub checkpoint: Option<PathBuf>,
    pub dataset: EvalDataset,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            checkpoint: None,
            dataset: EvalDataset::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Row numbers (1 to 8) to run.
    pub rows: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            rows: (1..=8).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub direction: Direction,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub source: DomainSpec,
    pub target: DomainSpec,
    /// Fraction of the source domain held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Overrides the components implied by `direction`.
    #[serde(default)]
    pub components: Option<Components>,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub spf: SpfConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_val_fraction() -> f64 {
    0.2
}

pub const STAGE_ONE_CHECKPOINT: &str = "m1.ckpt";
pub const STAGE_TWO_CHECKPOINT: &str = "m2.ckpt";
pub const MANIFEST: &str = "pseudo_labels.jsonl";

impl ExperimentConfig {
    /// The toy-scale synthetic setup: 300 images per domain at 320 pixels.
    pub fn synthetic(direction: Direction, output_dir: impl Into<PathBuf>) -> Self {
        let (src, tgt) = match direction {
            Direction::ComplexToSimple => ("mars", "lunar"),
            Direction::SimpleToComplex => ("lunar", "mars"),
        };
        let domain = |name: &str, seed| DomainSpec::Synthetic {
            profile: ProfileSpec::Preset(name.into()),
            count: 300,
            image_size: 320,
            seed,
        };
        ExperimentConfig {
            direction,
            seed: 0,
            output_dir: output_dir.into(),
            source: domain(src, 1),
            target: domain(tgt, 2),
            val_fraction: default_val_fraction(),
            components: None,
            detector: DetectorConfig {
                base_channels: 8,
                ..DetectorConfig::default()
            },
            train: TrainConfig::default(),
            spf: SpfConfig::default(),
            evaluation: EvaluationConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        let want = self.direction.source_complexity();
        if let Some(c) = self.source.complexity()? {
            if c != want {
                return Err(Error::Config(format!(
                    "direction {:?} needs a {want:?} source profile, got {c:?}",
                    self.direction
                )));
            }
        }
        if let Some(c) = self.target.complexity()? {
            if c == want {
                return Err(Error::Config(format!(
                    "direction {:?} needs a target profile of the other complexity",
                    self.direction
                )));
            }
        }
        if self.ablation.seeds.is_empty() || self.ablation.rows.iter().any(|r| !(1..=8).contains(r)) {
            return Err(Error::Config("ablation needs at least one seed and rows between 1 and 8".into()));
        }
        self.train.validate()?;
        self.spf.validate()?;
        self.detector_config(self.components())?.validate()
    }

    pub fn components(&self) -> Components {
        self.components.unwrap_or_else(|| Components::for_direction(self.direction))
    }

    /// Detector layout for `c`: attention fusion and the extra fine scale
    /// come together.
    pub fn detector_config(&self, c: Components) -> Result<DetectorConfig> {
        let mut d = self.detector.clone();
        d.asaf_enabled = c.asaf;
        d.num_scales = if c.asaf { 4 } else { 3 };
        if d.anchors.len() != d.num_scales {
            d.anchors = default_anchors(&d.strides());
        }
        Ok(d)
    }

    pub fn train_config(&self, c: Components) -> TrainConfig {
        let mut t = self.train.clone();
        t.loss.objectness = if c.shem { ObjectnessMode::Shem } else { ObjectnessMode::Focal };
        t.augment = if c.bot {
            Some(t.augment.unwrap_or_else(|| select_policy(self.direction.source_complexity())))
        } else {
            None
        };
        t
    }

    fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).ctx(|| format!("writing {}", path.display()))
    }
}

/// Source split into training and validation images.
pub fn source_split(cfg: &ExperimentConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let images = cfg.source.load()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset("source domain".into()));
    }
    let s = split_dataset(images, 1.0 - cfg.val_fraction, cfg.seed)?;
    if s.train.is_empty() || s.val.is_empty() {
        return Err(Error::EmptyDataset("source split leaves no training or validation images".into()));
    }
    Ok((s.train, s.val))
}

/// Writes the synthetic source and target domains as box datasets under
/// `out/data/{source,target}`.
pub fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, spec) in [("source", &cfg.source), ("target", &cfg.target)] {
        let DomainSpec::Synthetic {
            profile,
            count,
            image_size,
            seed,
        } = spec
        else {
            log::info!("{name} domain is a directory, nothing to generate");
            continue;
        };
        let profile = profile.resolve()?;
        let dir = out.join("data").join(name);
        let images = generate_synthetic_domain(&profile, *count, *image_size, *seed)?;
        write_box_dataset(&dir, &images)?;
        GeneratedDomain {
            profile,
            seed: *seed,
            count: *count,
            image_size: *image_size,
        }
        .write(&dir)?;
        written.push(dir);
    }
    cfg.write_echo(out)?;
    Ok(written)
}

pub struct StageOne {
    pub model: Detector,
    pub report: TrainReport,
    pub n_train: usize,
}

/// Trains the stage-one model on the source domain and, with `out`, writes
/// the checkpoint, the step log and the epoch summary there.
pub fn train_stage_one(
    cfg: &ExperimentConfig,
    c: Components,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    seed: u64,
    out: Option<&Path>,
) -> Result<StageOne> {
    let model = Detector::new(cfg.detector_config(c)?, DType::F32, seed)?;
    let tc = cfg.train_config(c);
    log::info!(
        "stage one ({c}): {} train / {} val images, {} parameters, {} attention nodes",
        train_set.len(),
        val_set.len(),
        model.param_count(),
        model.nam_count()
    );
    let report = train(&model, train_set, Some(val_set), &tc, seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        let best = report.best.as_ref().map_or(f64::NAN, |b| b.map5095);
        let meta = serde_json::json!({
            "stage": 1,
            "seed": seed,
            "components": c,
            "n_train": train_set.len(),
            "best_epoch": report.best_epoch,
            "val_map5095": best,
        });
        save_checkpoint(&model, meta, dir.join(STAGE_ONE_CHECKPOINT))?;
        write_train_logs(&report, dir, "stage_one")?;
    }
    Ok(StageOne {
        model,
        report,
        n_train: train_set.len(),
    })
}

fn write_train_logs(report: &TrainReport, dir: &Path, stem: &str) -> Result<()> {
    let path = dir.join(format!("{stem}_steps.csv"));
    let mut f = fs::File::create(&path).ctx(|| format!("creating {}", path.display()))?;
    report.write_steps_csv(&mut f).ctx(|| format!("writing {}", path.display()))?;
    let path = dir.join(format!("{stem}.json"));
    let summary = serde_json::json!({
        "epochs": report.epochs,
        "best_epoch": report.best_epoch,
        "best": report.best,
    });
    fs::write(&path, serde_json::to_string_pretty(&summary)?).ctx(|| format!("writing {}", path.display()))
}

pub struct StageTwo {
    pub selected: PseudoLabelSet,
    pub h: f64,
    pub report: TrainReport,
}

/// Pseudo-labels `target`, selects the most populated images and fine-tunes
/// `model` on them in place. Target labels are never read: the source is
/// wrapped so that any label access fails.
pub fn run_spf(
    cfg: &ExperimentConfig,
    c: Components,
    model: &mut Detector,
    n_train: usize,
    target: &dyn ImageSource,
    seed: u64,
    out: Option<&Path>,
) -> Result<StageTwo> {
    let guarded = GuardedSource::new(Borrowed(target));
    let pls = generate_pseudo_labels(model, &guarded, &cfg.spf, &format!("stage-one-seed{seed}"))?;
    let h = compute_h(n_train, guarded.len(), cfg.spf.alpha)?.min(cfg.spf.h_max);
    let selected = sort_and_select(&pls, h)?;
    log::info!(
        "pseudo-labels: {} boxes on {} images, h = {h:.4}, keeping {} images with {} boxes",
        pls.box_count(),
        pls.len(),
        selected.len(),
        selected.box_count()
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        selected.write_manifest(dir.join(MANIFEST))?;
    }
    let report = finetune(model, &selected, &guarded, &cfg.train_config(c), &cfg.spf, seed)?;
    if guarded.label_read_attempts() > 0 {
        return Err(Error::LabelLeak(format!("{} target label reads", guarded.label_read_attempts())));
    }
    if let Some(dir) = out {
        let meta = serde_json::json!({
            "stage": 2,
            "seed": seed,
            "components": c,
            "h": h,
            "selected_images": selected.len(),
        });
        save_checkpoint(model, meta, dir.join(STAGE_TWO_CHECKPOINT))?;
        write_train_logs(&report, dir, "stage_two")?;
    }
    Ok(StageTwo { selected, h, report })
}

/// Lets a borrowed source be wrapped by value.
struct Borrowed<'a>(&'a dyn ImageSource);

impl ImageSource for Borrowed<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn image_id(&self, index: usize) -> &str {
        self.0.image_id(index)
    }

    fn pixels(&self, index: usize) -> Result<crate::data::Pixels> {
        self.0.pixels(index)
    }

    fn labels(&self, index: usize) -> Result<Vec<crate::data::BoundingBox>> {
        self.0.labels(index)
    }
}

/// Metrics of `model` on labelled images plus, with `out`, `metrics.json`,
/// `pr_curve.csv` and `pr_curve.png`.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &Detector, images: &[LabeledImage], out: Option<&Path>) -> Result<MetricsReport> {
    let report = validate(model, images, &cfg.train.inference, &cfg.train.eval)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        report.write_json(dir.join("metrics.json"))?;
        report.write_pr_csv(dir.join("pr_curve.csv"))?;
        write_pr_png(&report.pr_curve, dir.join("pr_curve.png"))?;
    }
    Ok(report)
}

/// Both stages with the configured components; returns the final model's
/// metrics on the labelled target domain.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    cfg.write_echo(out)?;
    let c = cfg.components();
    let (train_set, val_set) = source_split(cfg)?;
    let mut s1 = train_stage_one(cfg, c, &train_set, &val_set, cfg.seed, Some(out))?;
    let target = cfg.target.open()?;
    if c.bot {
        run_spf(cfg, c, &mut s1.model, s1.n_train, target.as_ref(), cfg.seed, Some(out))?;
    }
    let target_images = load_all(target.as_ref())?;
    evaluate_model(cfg, &s1.model, &target_images, Some(&out.join("eval_target")))
}

pub fn stage_one_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<StageOne> {
    cfg.write_echo(out)?;
    let (train_set, val_set) = source_split(cfg)?;
    train_stage_one(cfg, cfg.components(), &train_set, &val_set, cfg.seed, Some(out))
}

/// Stage two from the stage-one checkpoint in `out`.
pub fn spf_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<StageTwo> {
    let (mut model, header) = load_checkpoint(out.join(STAGE_ONE_CHECKPOINT), DType::F32)?;
    let n_train = header.meta["n_train"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("stage-one checkpoint lacks n_train".into()))? as usize;
    let c = cfg.components();
    let target = cfg.target.open()?;
    run_spf(cfg, c, &mut model, n_train, target.as_ref(), cfg.seed, Some(out))
}

pub fn eval_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    let ckpt = match &cfg.evaluation.checkpoint {
        Some(p) => p.clone(),
        None if out.join(STAGE_TWO_CHECKPOINT).exists() => out.join(STAGE_TWO_CHECKPOINT),
        None => out.join(STAGE_ONE_CHECKPOINT),
    };
    if !ckpt.exists() {
        return Err(Error::Checkpoint(format!("{} not found", ckpt.display())));
    }
    let (model, _) = load_checkpoint(&ckpt, DType::F32)?;
    let images = match cfg.evaluation.dataset {
        EvalDataset::SourceVal => source_split(cfg)?.1,
        EvalDataset::Target => cfg.target.load()?,
    };
    let name = match cfg.evaluation.dataset {
        EvalDataset::SourceVal => "eval_source_val",
        EvalDataset::Target => "eval_target",
    };
    evaluate_model(cfg, &model, &images, Some(&out.join(name)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub row: usize,
    pub components: Components,
    pub seed: u64,
    pub recall: f64,
    pub map5095: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub components: Components,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub map5095_mean: f64,
    pub map5095_std: f64,
    pub runs: usize,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One ablation cell: stage one with components `c`, stage two when BOT is
/// on, then metrics on the labelled target domain.
pub fn ablation_run(
    cfg: &ExperimentConfig,
    c: Components,
    seed: u64,
    data: &(Vec<LabeledImage>, Vec<LabeledImage>),
    target: &[LabeledImage],
) -> Result<MetricsReport> {
    let mut s1 = train_stage_one(cfg, c, &data.0, &data.1, seed, None)?;
    if c.bot {
        let src = MemorySource::new(target.to_vec());
        run_spf(cfg, c, &mut s1.model, s1.n_train, &src, seed, None)?;
    }
    validate(&s1.model, target, &cfg.train.inference, &cfg.train.eval)
}

/// Runs the configured rows over every seed and summarizes each row.
pub fn run_ablation(cfg: &ExperimentConfig, mut on_run: impl FnMut(&AblationRun)) -> Result<(Vec<AblationRow>, Vec<AblationRun>)> {
    let data = source_split(cfg)?;
    let target = cfg.target.load()?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &row in &cfg.ablation.rows {
        let c = ABLATION_ROWS[row - 1];
        let mut recall = Vec::new();
        let mut map = Vec::new();
        for &seed in &cfg.ablation.seeds {
            let m = ablation_run(cfg, c, seed, &data, &target)?;
            let run = AblationRun {
                row,
                components: c,
                seed,
                recall: m.recall,
                map5095: m.map5095,
            };
            on_run(&run);
            recall.push(m.recall);
            map.push(m.map5095);
            runs.push(run);
        }
        let (recall_mean, recall_std) = mean_std(&recall);
        let (map5095_mean, map5095_std) = mean_std(&map);
        rows.push(AblationRow {
            row,
            components: c,
            recall_mean,
            recall_std,
            map5095_mean,
            map5095_std,
            runs: recall.len(),
        });
    }
    Ok((rows, runs))
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("row,asaf,shem,bot,recall_mean,recall_std,map5095_mean,map5095_std,runs\n");
    for r in rows {
        let c = r.components;
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.row, c.asaf, c.shem, c.bot, r.recall_mean, r.recall_std, r.map5095_mean, r.map5095_std, r.runs
        ));
    }
    fs::write(path, s).ctx(|| format!("writing {}", path.display()))
}

pub fn write_ablation_runs_csv(runs: &[AblationRun], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("row,asaf,shem,bot,seed,recall,map5095\n");
    for r in runs {
        let c = r.components;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.row, c.asaf, c.shem, c.bot, r.seed, r.recall, r.map5095
        ));
    }
    fs::write(path, s).ctx(|| format!("writing {}", path.display()))
}

pub fn ablation_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.write_echo(out)?;
    let (rows, runs) = run_ablation(cfg, |r| {
        log::info!(
            "row {} ({}) seed {}: recall {:.4} mAP@.5:.95 {:.4}",
            r.row,
            r.components,
            r.seed,
            r.recall,
            r.map5095
        )
    })?;
    write_ablation_csv(&rows, out.join("ablation.csv"))?;
    write_ablation_runs_csv(&runs, out.join("ablation_runs.csv"))?;
    Ok(rows)
}
