//! Slot feature pooling, seeded k-means with restarts, and Hungarian matching.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use crate::decoding::SoftMaskStack;
use crate::error::{Error, Result};
use crate::features::PatchFeatureMap;

/// Slots whose total mask mass falls below this are not clustered.
pub const MIN_SLOT_MASS: f64 = 1e-8;

/// Mask-weighted mean feature of each slot, L2-normalized. Entries are
/// `None` for slots with (almost) no mass.
pub fn pool_slot_features(
    masks: &SoftMaskStack,
    features: &PatchFeatureMap,
) -> Result<Vec<Option<Vec<f64>>>> {
    if masks.grid() != features.grid {
        return Err(Error::Argument(format!(
            "mask grid {:?} differs from feature grid {:?}",
            masks.grid(),
            features.grid
        )));
    }
    let (k, rows, cols) = masks.masks.dim();
    let d = features.dim();
    Ok((0..k)
        .map(|s| {
            let mut acc = vec![0.0; d];
            let mut mass = 0.0;
            for n in 0..rows * cols {
                let w = masks.masks[[s, n / cols, n % cols]];
                mass += w;
                for (a, &h) in acc.iter_mut().zip(features.tokens.row(n)) {
                    *a += w * h;
                }
            }
            if mass < MIN_SLOT_MASS {
                return None;
            }
            let norm = acc
                .iter()
                .map(|v| (v / mass) * (v / mass))
                .sum::<f64>()
                .sqrt();
            Some(if norm > 0.0 {
                acc.iter().map(|v| v / mass / norm).collect()
            } else {
                vec![0.0; d]
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    /// Inertia of every restart, in order.
    pub restart_inertias: Vec<f64>,
}

pub const KMEANS_TOLERANCE: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 300;

fn sq_dist(a: &[f64], b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(vectors: &[Vec<f64>], centers: &Array2<f64>, out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (v, slot) in vectors.iter().zip(out.iter_mut()) {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.rows().into_iter().enumerate() {
            let d = sq_dist(v, center);
            if d < best.1 {
                best = (c, d);
            }
        }
        *slot = best.0;
        inertia += best.1;
    }
    inertia
}

fn lloyd(vectors: &[Vec<f64>], mut centers: Array2<f64>) -> (Vec<usize>, Array2<f64>, f64) {
    let (k, d) = centers.dim();
    let mut assignments = vec![0; vectors.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        assign(vectors, &centers, &mut assignments);
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums.row_mut(a).iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] == 0 {
                continue;
            }
            let mut row = sums.row_mut(c);
            row /= counts[c] as f64;
            let moved = row
                .iter()
                .zip(centers.row(c))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            shift = shift.max(moved);
            centers.row_mut(c).assign(&row);
        }
        if shift <= KMEANS_TOLERANCE {
            break;
        }
    }
    let inertia = assign(vectors, &centers, &mut assignments);
    (assignments, centers, inertia)
}

/// Lloyd's k-means, restarted `restarts` times from `k` distinct randomly
/// chosen input vectors; keeps the restart with the lowest inertia.
pub fn kmeans<R: Rng + ?Sized>(
    vectors: &[Vec<f64>],
    k: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<KMeansResult> {
    if k == 0 || restarts == 0 {
        return Err(Error::Argument(
            "k-means needs k >= 1 and at least one restart".into(),
        ));
    }
    if vectors.len() < k {
        return Err(Error::Argument(format!(
            "k-means with {k} clusters needs at least {k} vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Argument("k-means vectors differ in length".into()));
    }
    let mut best: Option<KMeansResult> = None;
    let mut restart_inertias = Vec::with_capacity(restarts);
    for _ in 0..restarts {
        let picks = sample(rng, vectors.len(), k);
        let centers = Array2::from_shape_fn((k, d), |(c, j)| vectors[picks.index(c)][j]);
        let (assignments, centers, inertia) = lloyd(vectors, centers);
        restart_inertias.push(inertia);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansResult {
                assignments,
                centers,
                inertia,
                restart_inertias: Vec::new(),
            });
        }
    }
    let mut best = best.expect("at least one restart");
    best.restart_inertias = restart_inertias;
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, column)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the matched scores, accumulated in row order.
    pub total: f64,
    /// Rows left without a column.
    pub unmatched_rows: Vec<usize>,
}

impl Assignment {
    pub fn column_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|&(_, c)| c)
    }
}

/// Maximum-score one-to-one matching between rows and columns.
///
/// Shortest-augmenting-path Hungarian algorithm with potentials on the
/// square padding of the matrix; padded cells score zero.
pub fn hungarian_match(scores: &Array2<f64>) -> Result<Assignment> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument(
            "score matrix contains non-finite values".into(),
        ));
    }
    let (rows, cols) = scores.dim();
    let n = rows.max(cols);
    if n == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
            unmatched_rows: Vec::new(),
        });
    }
    let cost = |i: usize, j: usize| {
        if i < rows && j < cols {
            -scores[[i, j]]
        } else {
            0.0
        }
    };
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![None; rows];
    for j in 1..=n {
        let i = owner[j];
        if i >= 1 && i <= rows && j <= cols {
            col_of_row[i - 1] = Some(j - 1);
        }
    }
    let mut pairs = Vec::new();
    let mut unmatched_rows = Vec::new();
    let mut total = 0.0;
    for (r, c) in col_of_row.into_iter().enumerate() {
        match c {
            Some(c) => {
                total += scores[[r, c]];
                pairs.push((r, c));
            }
            None => unmatched_rows.push(r),
        }
    }
    Ok(Assignment {
        pairs,
        total,
        unmatched_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot_stack(k: usize, grid: (usize, usize), owner: &[usize]) -> SoftMaskStack {
        SoftMaskStack {
            masks: ndarray::Array3::from_shape_fn((k, grid.0, grid.1), |(s, y, x)| {
                f64::from(owner[y * grid.1 + x] == s)
            }),
        }
    }

    #[test]
    fn pooling_weighted_mean_is_normalized() {
        let feats = PatchFeatureMap::new(
            Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            (1, 2),
            "t",
        )
        .unwrap();
        let masks = SoftMaskStack {
            masks: ndarray::Array3::from_shape_vec((1, 1, 2), vec![0.25, 0.75]).unwrap(),
        };
        let v = pool_slot_features(&masks, &feats).unwrap()[0]
            .clone()
            .unwrap();
        let norm = (0.25f64.powi(2) + 0.75f64.powi(2)).sqrt();
        assert!((v[0] - 0.25 / norm).abs() < 1e-15 && (v[1] - 0.75 / norm).abs() < 1e-15);
    }

    #[test]
    fn pooling_one_hot_and_empty_slots() {
        let feats = PatchFeatureMap::new(
            Array2::from_shape_vec((2, 2), vec![3.0, 4.0, 1.0, 1.0]).unwrap(),
            (1, 2),
            "t",
        )
        .unwrap();
        let pooled = pool_slot_features(&one_hot_stack(3, (1, 2), &[0, 0]), &feats).unwrap();
        let v = pooled[0].clone().unwrap();
        // Mean of (3,4) and (1,1) is (2, 2.5).
        let norm = (4.0f64 + 6.25).sqrt();
        assert!((v[0] - 2.0 / norm).abs() < 1e-15);
        assert!(pooled[1].is_none() && pooled[2].is_none());
        let single = pool_slot_features(&one_hot_stack(2, (1, 2), &[0, 1]), &feats).unwrap();
        assert_eq!(single[0].clone().unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn kmeans_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 11.0].iter().map(|&x| vec![x]).collect();
        let r = kmeans(&pts, 2, 20, &mut rng).unwrap();
        assert!((r.inertia - 1.0).abs() < 1e-12);
        let mut centers: Vec<f64> = r.centers.column(0).to_vec();
        centers.sort_by(f64::total_cmp);
        assert_eq!(centers, vec![0.5, 10.5]);
        assert!(r.restart_inertias.iter().all(|&i| i >= r.inertia));

        let rep: Vec<Vec<f64>> = (0..9).map(|i| vec![(i % 3) as f64, 1.0]).collect();
        assert_eq!(kmeans(&rep, 3, 20, &mut rng).unwrap().inertia, 0.0);

        let one = kmeans(&pts, 1, 3, &mut rng).unwrap();
        assert_eq!(one.centers[[0, 0]], 5.5);
        assert!(kmeans(&pts, 5, 1, &mut rng).is_err());
    }

    #[test]
    fn kmeans_is_seeded() {
        let mut src = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![src.random::<f64>(), src.random::<f64>()])
            .collect();
        let a = kmeans(&pts, 4, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = kmeans(&pts, 4, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hungarian_small_cases() {
        let id = Array2::from_shape_fn((3, 3), |(i, j)| f64::from(i == j));
        assert_eq!(
            hungarian_match(&id).unwrap().pairs,
            vec![(0, 0), (1, 1), (2, 2)]
        );
        let m = Array2::from_shape_vec((2, 2), vec![0.5, 0.9, 0.8, 0.2]).unwrap();
        let a = hungarian_match(&m).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert!((a.total - 1.7).abs() < 1e-15);
        let single = hungarian_match(&Array2::from_elem((1, 1), 0.3)).unwrap();
        assert_eq!((single.pairs, single.total), (vec![(0, 0)], 0.3));
    }

    #[test]
    fn hungarian_reports_unmatched_rows() {
        let m = Array2::from_shape_vec((3, 1), vec![0.1, 0.9, 0.4]).unwrap();
        let a = hungarian_match(&m).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched_rows, vec![0, 2]);
        assert!(hungarian_match(&Array2::from_elem((1, 1), f64::NAN)).is_err());
    }
}
