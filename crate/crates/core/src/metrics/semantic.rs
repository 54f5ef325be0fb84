//! Unsupervised semantic segmentation scoring: dataset-wide k-means over
//! pooled slot features, then a Hungarian cluster-to-class assignment.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cluster::{hungarian_match, kmeans};
use crate::error::{Error, Result};
use crate::masks::LabelMap;

pub const DEFAULT_RESTARTS: usize = 20;
pub const DEFAULT_REPEATS: usize = 3;

/// Slot-level output for one image: pooled vectors (None for empty slots)
/// and the per-pixel slot index at ground-truth resolution.
#[derive(Clone, Debug)]
pub struct SlotPrediction {
    pub vectors: Vec<Option<Vec<f64>>>,
    pub slot_map: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub miou: f64,
    pub pixel_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEvaluation {
    pub mean: SegmentationScores,
    pub per_repeat: Vec<SegmentationScores>,
    pub repeat_seeds: Vec<u64>,
}

fn cmp_vectors(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Clusters every slot vector of the dataset, assigns clusters to classes and
/// scores the resulting class maps. Vectors are sorted within each image
/// before clustering so the outcome does not depend on slot order.
pub fn cluster_and_score(
    predictions: &[SlotPrediction],
    ground_truth: &[LabelMap],
    clusters: usize,
    restarts: usize,
    seed: u64,
) -> Result<SegmentationScores> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} ground-truth maps",
            predictions.len(),
            ground_truth.len()
        )));
    }
    for (p, g) in predictions.iter().zip(ground_truth) {
        if p.slot_map.labels.dim() != g.labels.dim() {
            return Err(Error::Argument(format!(
                "slot map {:?} differs from ground truth {:?}",
                p.slot_map.labels.dim(),
                g.labels.dim()
            )));
        }
    }

    let mut vectors: Vec<Vec<f64>> = Vec::new();
    // For each image, slot index -> row in `vectors`.
    let mut rows: Vec<Vec<Option<usize>>> = Vec::with_capacity(predictions.len());
    for p in predictions {
        let mut present: Vec<(usize, &Vec<f64>)> = p
            .vectors
            .iter()
            .enumerate()
            .filter_map(|(s, v)| v.as_ref().map(|v| (s, v)))
            .collect();
        present.sort_by(|a, b| cmp_vectors(a.1, b.1));
        let mut map = vec![None; p.vectors.len()];
        for (s, v) in present {
            map[s] = Some(vectors.len());
            vectors.push(v.clone());
        }
        rows.push(map);
    }
    if clusters > vectors.len() {
        return Err(Error::Argument(format!(
            "{clusters} clusters requested but only {} slot vectors are available",
            vectors.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let km = kmeans(&vectors, clusters, restarts, &mut rng)?;

    // Per-pixel cluster (None for pixels owned by dropped slots).
    let cluster_of = |image: usize, slot: u32| -> Option<usize> {
        rows[image]
            .get(slot as usize)
            .copied()
            .flatten()
            .map(|r| km.assignments[r])
    };

    let mut classes: Vec<u32> = ground_truth.iter().flat_map(LabelMap::distinct).collect();
    classes.sort_unstable();
    classes.dedup();
    let class_col: BTreeMap<u32, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut inter = Array2::<f64>::zeros((clusters, classes.len()));
    let mut cluster_size = vec![0.0; clusters];
    let mut class_size = vec![0.0; classes.len()];
    for (i, (p, g)) in predictions.iter().zip(ground_truth).enumerate() {
        for (&s, &c) in p.slot_map.labels.iter().zip(g.labels.iter()) {
            let col = class_col[&c];
            class_size[col] += 1.0;
            if let Some(k) = cluster_of(i, s) {
                cluster_size[k] += 1.0;
                inter[[k, col]] += 1.0;
            }
        }
    }
    let iou = Array2::from_shape_fn((clusters, classes.len()), |(k, j)| {
        let union = cluster_size[k] + class_size[j] - inter[[k, j]];
        if union > 0.0 {
            inter[[k, j]] / union
        } else {
            0.0
        }
    });
    let matching = hungarian_match(&iou)?;
    let class_of_cluster: Vec<u32> = (0..clusters)
        .map(|k| matching.column_of(k).map_or(0, |j| classes[j]))
        .collect();

    let mut tp = vec![0.0; classes.len()];
    let mut pred_size = vec![0.0; classes.len()];
    let mut correct = 0.0;
    let mut total = 0.0;
    for (i, (p, g)) in predictions.iter().zip(ground_truth).enumerate() {
        for (&s, &c) in p.slot_map.labels.iter().zip(g.labels.iter()) {
            let pred = cluster_of(i, s).map_or(0, |k| class_of_cluster[k]);
            total += 1.0;
            if let Some(&col) = class_col.get(&pred) {
                pred_size[col] += 1.0;
            }
            if pred == c {
                correct += 1.0;
                tp[class_col[&c]] += 1.0;
            }
        }
    }
    let miou = (0..classes.len())
        .map(|j| tp[j] / (class_size[j] + pred_size[j] - tp[j]))
        .sum::<f64>()
        / classes.len().max(1) as f64;
    Ok(SegmentationScores {
        miou,
        pixel_accuracy: if total > 0.0 { correct / total } else { 0.0 },
    })
}

/// Runs `infer` once per repeat (each with its own seed), clusters and scores
/// each run, and averages the scores.
pub fn semantic_segmentation_eval<F>(
    ground_truth: &[LabelMap],
    clusters: usize,
    restarts: usize,
    repeats: usize,
    seed: u64,
    mut infer: F,
) -> Result<SemanticEvaluation>
where
    F: FnMut(u64) -> Result<Vec<SlotPrediction>>,
{
    if repeats == 0 {
        return Err(Error::Argument("repeats must be at least 1".into()));
    }
    let repeat_seeds: Vec<u64> = (0..repeats as u64).map(|r| seed.wrapping_add(r)).collect();
    let mut per_repeat = Vec::with_capacity(repeats);
    for &s in &repeat_seeds {
        let preds = infer(s)?;
        per_repeat.push(cluster_and_score(
            &preds,
            ground_truth,
            clusters,
            restarts,
            s,
        )?);
    }
    let n = repeats as f64;
    let mean = SegmentationScores {
        miou: per_repeat.iter().map(|s| s.miou).sum::<f64>() / n,
        pixel_accuracy: per_repeat.iter().map(|s| s.pixel_accuracy).sum::<f64>() / n,
    };
    Ok(SemanticEvaluation {
        mean,
        per_repeat,
        repeat_seeds,
    })
}
