//! Adjusted Rand index over label maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::masks::LabelMap;

/// Pair counts between two labelings of the same evaluated pixels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: BTreeMap<(u32, u32), u64>,
    pub row_sums: BTreeMap<u32, u64>,
    pub col_sums: BTreeMap<u32, u64>,
    pub total: u64,
}

impl ContingencyTable {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut table = Self::default();
        for (p, g) in pairs {
            *table.counts.entry((p, g)).or_default() += 1;
            *table.row_sums.entry(p).or_default() += 1;
            *table.col_sums.entry(g).or_default() += 1;
            table.total += 1;
        }
        table
    }

    /// ARI from the table; `None` when it is empty.
    pub fn adjusted_rand_index(&self) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let pairs = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
        let index: f64 = self.counts.values().map(|&n| pairs(n)).sum();
        let rows: f64 = self.row_sums.values().map(|&n| pairs(n)).sum();
        let cols: f64 = self.col_sums.values().map(|&n| pairs(n)).sum();
        let all = pairs(self.total);
        let expected = if all > 0.0 { rows * cols / all } else { 0.0 };
        let max = 0.5 * (rows + cols);
        if max == expected {
            // Both labelings are a single cluster or both are all singletons.
            return Some(1.0);
        }
        Some((index - expected) / (max - expected))
    }
}

/// ARI between a prediction and ground truth. With `foreground_only`,
/// pixels whose ground-truth label is 0 are ignored; `Ok(None)` means no
/// pixel was left to evaluate.
pub fn adjusted_rand_index(
    pred: &LabelMap,
    gt: &LabelMap,
    foreground_only: bool,
) -> Result<Option<f64>> {
    if pred.labels.dim() != gt.labels.dim() {
        return Err(Error::Argument(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.labels.dim(),
            gt.labels.dim()
        )));
    }
    let table = ContingencyTable::from_pairs(
        pred.labels
            .iter()
            .zip(gt.labels.iter())
            .filter(|(_, &g)| !foreground_only || g != 0)
            .map(|(&p, &g)| (p, g)),
    );
    Ok(table.adjusted_rand_index())
}
