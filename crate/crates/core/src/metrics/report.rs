//! Serializable evaluation results.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};

/// Metric names whose values may be negative (ARI is bounded by -1 below).
const SIGNED_METRICS: &[&str] = &["fg_ari", "ari"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    /// Dataset-level scalars keyed by metric name.
    pub metrics: BTreeMap<String, f64>,
    /// Everything needed to reproduce the numbers: mask source, slot count,
    /// cluster count, seeds, checkpoint, dataset.
    pub settings: BTreeMap<String, serde_json::Value>,
    /// Per-image values; `None` marks images excluded from the average.
    pub per_image: BTreeMap<String, Vec<Option<f64>>>,
}

impl MetricsReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            ..Self::default()
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn setting(&mut self, name: &str, value: impl Serialize) -> &mut Self {
        let v = serde_json::to_value(value).expect("settings are plain data");
        self.settings.insert(name.to_string(), v);
        self
    }

    pub fn per_image(&mut self, name: &str, values: Vec<Option<f64>>) -> &mut Self {
        self.per_image.insert(name.to_string(), values);
        self
    }

    /// Checks every scalar lies in its range: `[-1, 1]` for ARI-type
    /// metrics, `[0, 1]` for the rest.
    pub fn validate(&self) -> Result<()> {
        let per_image = self
            .per_image
            .iter()
            .flat_map(|(k, v)| v.iter().flatten().map(move |x| (k, *x)));
        for (name, value) in self.metrics.iter().map(|(k, v)| (k, *v)).chain(per_image) {
            let lo = if SIGNED_METRICS.contains(&name.as_str()) {
                -1.0
            } else {
                0.0
            };
            if !(lo - 1e-12..=1.0 + 1e-12).contains(&value) {
                return Err(Error::Numerical(format!(
                    "metric {name} = {value} outside [{lo}, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Mean of the defined entries; `None` when there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}
