//! Evaluation pipelines: masks → image resolution → hard labels → metrics.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SceneSample;
use crate::decoding::SoftMaskStack;
use crate::error::{Error, Result};
use crate::features::{EncoderConfig, Provider, ToyFrozenEncoder};
use crate::masks::{
    block_pattern, boxes_from_masks, extract_masks, hard_masks, resize_masks, LabelMap, MaskSource,
};
use crate::metrics::{
    adjusted_rand_index, corloc_and_detection_rate, masks_per_label, mean_best_overlap,
    mean_defined, pool_slot_features, semantic_segmentation_eval, MetricsReport, SlotPrediction,
    LOCALIZATION_THRESHOLD,
};
use crate::training::{Model, TrainConfig, TrainSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Discovery,
    Localization,
    Segmentation,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Discovery => "discovery",
            Task::Localization => "localization",
            Task::Segmentation => "segmentation",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discovery" => Ok(Task::Discovery),
            "localization" => Ok(Task::Localization),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::Argument(format!(
                "unknown task {other}; expected discovery, localization or segmentation"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub task: Task,
    /// `None` picks the decoder's default source.
    pub mask_source: Option<MaskSource>,
    pub clusters: usize,
    pub restarts: usize,
    pub repeats: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl EvalSettings {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            mask_source: None,
            clusters: 27,
            restarts: crate::metrics::semantic::DEFAULT_RESTARTS,
            repeats: crate::metrics::semantic::DEFAULT_REPEATS,
            threshold: LOCALIZATION_THRESHOLD,
            seed: 0,
        }
    }
}

impl SceneSample {
    pub fn to_train_sample(&self) -> TrainSample {
        TrainSample {
            features: self.features.clone(),
            image: self.image.clone(),
        }
    }
}

/// Replaces stored features by those of the configured frozen provider.
pub fn prepare_samples(samples: &mut [SceneSample], cfg: &TrainConfig) -> Result<()> {
    let a = &cfg.architecture;
    match a.target {
        Provider::Precomputed => Ok(()),
        Provider::TrainableConv => Err(Error::Config(
            "the trainable encoder cannot provide its own reconstruction target".into(),
        )),
        Provider::ToyFrozen => {
            let Some(first) = samples.first() else {
                return Ok(());
            };
            let channels = first
                .image
                .as_ref()
                .ok_or_else(|| {
                    Error::Data(format!(
                        "sample {} has no image for the toy encoder",
                        first.id
                    ))
                })?
                .channels();
            let encoder = ToyFrozenEncoder::new(
                EncoderConfig {
                    provider: Provider::ToyFrozen,
                    patch_size: a.patch_size,
                    feature_dim: first.features.dim(),
                    seed: cfg.seed,
                },
                channels,
            )?;
            samples.par_iter_mut().try_for_each(|s| {
                let image = s.image.as_ref().ok_or_else(|| {
                    Error::Data(format!("sample {} has no image for the toy encoder", s.id))
                })?;
                s.features = encoder.encode(image)?;
                Ok(())
            })
        }
    }
}

/// Hard per-pixel slot labels at ground-truth resolution.
pub fn hard_labels_at(masks: &SoftMaskStack, height: usize, width: usize) -> Result<LabelMap> {
    Ok(hard_masks(&resize_masks(masks, height, width)?))
}

/// FG-ARI, instance mBO and class mBO of predicted label maps.
pub fn discovery_report(
    predictions: &[LabelMap],
    samples: &[SceneSample],
) -> Result<MetricsReport> {
    let mut ari = Vec::with_capacity(samples.len());
    let mut mbo_i = Vec::with_capacity(samples.len());
    let mut mbo_c = Vec::with_capacity(samples.len());
    for (pred, s) in predictions.iter().zip(samples) {
        ari.push(adjusted_rand_index(pred, &s.instances, true)?);
        let pred_masks = masks_per_label(pred, false);
        mbo_i.push(mean_best_overlap(
            &pred_masks,
            &masks_per_label(&s.instances, true),
        ));
        mbo_c.push(mean_best_overlap(
            &pred_masks,
            &masks_per_label(&s.class_map(), true),
        ));
    }
    let mut r = MetricsReport::new(Task::Discovery.to_string());
    r.metric("fg_ari", mean_defined(&ari).unwrap_or(0.0))
        .metric("mbo_i", mean_defined(&mbo_i).unwrap_or(0.0))
        .metric("mbo_c", mean_defined(&mbo_c).unwrap_or(0.0))
        .setting("images", samples.len())
        .setting(
            "images_without_foreground",
            ari.iter().filter(|a| a.is_none()).count(),
        )
        .per_image("fg_ari", ari)
        .per_image("mbo_i", mbo_i)
        .per_image("mbo_c", mbo_c);
    Ok(r)
}

/// CorLoc and detection rate of the boxes around predicted segments.
pub fn localization_report(
    predictions: &[LabelMap],
    samples: &[SceneSample],
    threshold: f64,
) -> Result<MetricsReport> {
    let pred_boxes: Vec<_> = predictions
        .iter()
        .map(|p| boxes_from_masks(p).into_iter().map(|(_, b)| b).collect())
        .collect();
    let gt_boxes: Vec<_> = samples
        .iter()
        .map(|s| {
            boxes_from_masks(&s.instances)
                .into_iter()
                .filter(|&(l, _)| l != 0)
                .map(|(_, b)| b)
                .collect()
        })
        .collect();
    let scores = corloc_and_detection_rate(&pred_boxes, &gt_boxes, threshold);
    let mut r = MetricsReport::new(Task::Localization.to_string());
    r.metric("corloc", scores.map_or(0.0, |s| s.corloc))
        .metric("detection_rate", scores.map_or(0.0, |s| s.detection_rate))
        .setting("threshold", threshold)
        .setting("images", samples.len())
        .setting("images_with_objects", scores.map_or(0, |s| s.images));
    Ok(r)
}

fn check_samples(samples: &[SceneSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    Ok(())
}

/// Soft masks of every sample under one noise seed, in sample order.
pub fn predict_masks(
    model: &Model,
    samples: &[SceneSample],
    source: MaskSource,
    seed: u64,
) -> Result<Vec<SoftMaskStack>> {
    let valid = model.kind().valid_sources();
    if !valid.contains(&source) {
        let names: Vec<String> = valid.iter().map(ToString::to_string).collect();
        return Err(Error::Config(format!(
            "mask source {source} is unavailable for the {} decoder; valid sources: {}",
            model.kind(),
            names.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<_> = samples.iter().map(|_| model.draw_noise(&mut rng)).collect();
    samples
        .par_iter()
        .zip(noise.par_iter())
        .map(|(s, n)| {
            let inference = model.infer(&s.to_train_sample(), n.as_ref())?;
            extract_masks(&model.masks(&inference)?, source)
        })
        .collect()
}

fn slot_predictions(
    masks: &[SoftMaskStack],
    samples: &[SceneSample],
) -> Result<Vec<SlotPrediction>> {
    masks
        .par_iter()
        .zip(samples.par_iter())
        .map(|(m, s)| {
            let (rows, cols) = s.features.grid;
            let on_grid = resize_masks(m, rows, cols)?;
            let (h, w) = s.instances.labels.dim();
            Ok(SlotPrediction {
                vectors: pool_slot_features(&on_grid, &s.features)?,
                slot_map: hard_labels_at(m, h, w)?,
            })
        })
        .collect()
}

fn finish(mut report: MetricsReport, settings: &EvalSettings) -> Result<MetricsReport> {
    report
        .setting("task", settings.task)
        .setting("seed", settings.seed);
    report.validate()?;
    Ok(report)
}

/// Runs one evaluation task on a trained model.
pub fn evaluate_model(
    model: &Model,
    samples: &[SceneSample],
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    check_samples(samples)?;
    let source = settings
        .mask_source
        .unwrap_or_else(|| model.kind().default_source());
    let hard = |masks: &[SoftMaskStack]| -> Result<Vec<LabelMap>> {
        masks
            .iter()
            .zip(samples)
            .map(|(m, s)| hard_labels_at(m, s.instances.height(), s.instances.width()))
            .collect()
    };
    let mut report = match settings.task {
        Task::Discovery => discovery_report(
            &hard(&predict_masks(model, samples, source, settings.seed)?)?,
            samples,
        )?,
        Task::Localization => localization_report(
            &hard(&predict_masks(model, samples, source, settings.seed)?)?,
            samples,
            settings.threshold,
        )?,
        Task::Segmentation => {
            let gt: Vec<LabelMap> = samples.iter().map(SceneSample::class_map).collect();
            let e = semantic_segmentation_eval(
                &gt,
                settings.clusters,
                settings.restarts,
                settings.repeats,
                settings.seed,
                |seed| slot_predictions(&predict_masks(model, samples, source, seed)?, samples),
            )?;
            segmentation_report(e, settings)
        }
    };
    report
        .setting("mask_source", source)
        .setting("decoder", model.kind())
        .setting("num_slots", model.num_slots)
        .setting("iterations", model.iterations);
    finish(report, settings)
}

fn segmentation_report(
    e: crate::metrics::SemanticEvaluation,
    settings: &EvalSettings,
) -> MetricsReport {
    let mut r = MetricsReport::new(Task::Segmentation.to_string());
    r.metric("miou", e.mean.miou)
        .metric("pixel_accuracy", e.mean.pixel_accuracy)
        .setting("clusters", settings.clusters)
        .setting("restarts", settings.restarts)
        .setting("repeats", settings.repeats)
        .setting("repeat_seeds", &e.repeat_seeds)
        .per_image(
            "miou_per_repeat",
            e.per_repeat.iter().map(|s| Some(s.miou)).collect(),
        )
        .per_image(
            "pixel_accuracy_per_repeat",
            e.per_repeat
                .iter()
                .map(|s| Some(s.pixel_accuracy))
                .collect(),
        );
    r
}

/// One-hot stack of a label map with `k` labels.
pub fn one_hot_masks(labels: &LabelMap, k: usize) -> SoftMaskStack {
    let (h, w) = labels.labels.dim();
    SoftMaskStack {
        masks: Array3::from_shape_fn((k, h, w), |(s, y, x)| {
            f64::from(labels.labels[[y, x]] as usize == s)
        }),
    }
}

/// Evaluates the model-free block pattern with `num_masks` blocks.
pub fn evaluate_block_baseline(
    samples: &[SceneSample],
    num_masks: usize,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    check_samples(samples)?;
    let preds: Vec<LabelMap> = samples
        .iter()
        .map(|s| block_pattern(num_masks, s.instances.height(), s.instances.width()))
        .collect::<Result<_>>()?;
    let mut report = match settings.task {
        Task::Discovery => discovery_report(&preds, samples)?,
        Task::Localization => localization_report(&preds, samples, settings.threshold)?,
        Task::Segmentation => {
            let masks: Vec<SoftMaskStack> =
                preds.iter().map(|p| one_hot_masks(p, num_masks)).collect();
            let gt: Vec<LabelMap> = samples.iter().map(SceneSample::class_map).collect();
            let e = semantic_segmentation_eval(
                &gt,
                settings.clusters,
                settings.restarts,
                settings.repeats,
                settings.seed,
                |_| slot_predictions(&masks, samples),
            )?;
            segmentation_report(e, settings)
        }
    };
    report.task = format!("baseline-{}", settings.task);
    report
        .setting("baseline", "block-pattern")
        .setting("num_masks", num_masks)
        .setting("block_columns", crate::masks::block_columns(num_masks));
    finish(report, settings)
}
