//! Slot Attention: iterative competitive grouping of patch features into slots.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::PatchFeatureMap;
use crate::nn::{LayerNorm, Linear, Mlp, ParamId, ParamStore};

/// Added to the attention weights before normalizing over inputs.
pub const ATTENTION_EPS: f64 = 1e-8;

/// `K × D_slots` slot vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSet {
    pub vectors: Array2<f64>,
}

impl SlotSet {
    pub fn num_slots(&self) -> usize {
        self.vectors.nrows()
    }
}

/// `K × N` attention of the final iteration; every column sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotInitMode {
    /// `mu + exp(log_sigma) ⊙ ε`.
    Sampled,
    /// Every slot equals `mu` (the σ → 0 limit).
    MeanOnly,
}

/// Standard-normal draws for `k` slots, row-major.
pub fn draw_slot_noise<R: Rng + ?Sized>(k: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((k, dim), |_| StandardNormal.sample(rng))
}

/// Samples `k` initial slots from `N(mu, exp(log_sigma)²)`.
pub fn init_slots<R: Rng + ?Sized>(
    mu: &Array2<f64>,
    log_sigma: &Array2<f64>,
    k: usize,
    mode: SlotInitMode,
    rng: &mut R,
) -> Result<SlotSet> {
    if k < 1 {
        return Err(Error::Argument("need at least one slot".into()));
    }
    let dim = mu.ncols();
    let base = mu.broadcast((k, dim)).expect("mu is 1×D").to_owned();
    let vectors = match mode {
        SlotInitMode::MeanOnly => base,
        SlotInitMode::Sampled => {
            let noise = draw_slot_noise(k, dim, rng);
            base + noise * log_sigma.mapv(f64::exp)
        }
    };
    Ok(SlotSet { vectors })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub feature_dim: usize,
    pub slot_dim: usize,
    /// Hidden width of the residual slot MLP (4·D_slots by default).
    pub mlp_hidden: usize,
}

impl GroupingConfig {
    pub fn new(feature_dim: usize, slot_dim: usize) -> Self {
        Self {
            feature_dim,
            slot_dim,
            mlp_hidden: 4 * slot_dim,
        }
    }
}

/// GRU cell in the update-gate / reset-gate / candidate layout.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    dim: usize,
}

impl GruCell {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let w = |store: &mut ParamStore, n: &str, rng: &mut R, shape| {
            store.add(
                format!("{name}.{n}"),
                crate::nn::fan_in_uniform(rng, dim, shape),
            )
        };
        Self {
            w_input: w(store, "w_input", rng, (dim, 3 * dim)),
            w_hidden: w(store, "w_hidden", rng, (dim, 3 * dim)),
            b_input: w(store, "b_input", rng, (1, 3 * dim)),
            b_hidden: w(store, "b_hidden", rng, (1, 3 * dim)),
            dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, input: Var, hidden: Var) -> Var {
        let d = self.dim;
        let gi = t.matmul(input, self.w_input.var());
        let gi = t.add_row(gi, self.b_input.var());
        let gh = t.matmul(hidden, self.w_hidden.var());
        let gh = t.add_row(gh, self.b_hidden.var());
        let (ir, iz, inn) = (
            t.slice_cols(gi, 0, d),
            t.slice_cols(gi, d, 2 * d),
            t.slice_cols(gi, 2 * d, 3 * d),
        );
        let (hr, hz, hn) = (
            t.slice_cols(gh, 0, d),
            t.slice_cols(gh, d, 2 * d),
            t.slice_cols(gh, 2 * d, 3 * d),
        );
        let r = t.add(ir, hr);
        let r = t.sigmoid(r);
        let z = t.add(iz, hz);
        let z = t.sigmoid(z);
        let gated = t.mul(r, hn);
        let n = t.add(inn, gated);
        let n = t.tanh(n);
        // h' = n + z ⊙ (h − n)
        let diff = t.sub(hidden, n);
        let keep = t.mul(z, diff);
        t.add(n, keep)
    }
}

/// Result of [`SlotAttention::forward`]: tape nodes for the final slots and
/// the `N × K` final-iteration attention (softmax over slots per token).
#[derive(Clone, Copy, Debug)]
pub struct GroupingOutput {
    pub slots: Var,
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub config: GroupingConfig,
    pub input_norm: LayerNorm,
    pub input_mlp: Mlp,
    pub input_out_norm: LayerNorm,
    pub mu: ParamId,
    pub log_sigma: ParamId,
    pub slot_norm: LayerNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub gru: GruCell,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
}

impl SlotAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: GroupingConfig,
        rng: &mut R,
    ) -> Self {
        let (df, ds) = (config.feature_dim, config.slot_dim);
        let xavier = (6.0 / (1 + ds) as f64).sqrt();
        let xavier_row =
            |rng: &mut R| Array2::from_shape_fn((1, ds), |_| rng.random_range(-xavier..xavier));
        let input_norm = LayerNorm::new(store, "grouping.input_norm", df);
        let input_mlp = Mlp::new(store, "grouping.input_mlp", &[df, df, ds], rng);
        let input_out_norm = LayerNorm::new(store, "grouping.input_out_norm", ds);
        let mu = store.add("grouping.slot_mu", xavier_row(rng));
        let log_sigma = store.add("grouping.slot_log_sigma", xavier_row(rng));
        let slot_norm = LayerNorm::new(store, "grouping.slot_norm", ds);
        let to_q = Linear::new(store, "grouping.to_q", ds, ds, false, rng);
        let to_k = Linear::new(store, "grouping.to_k", ds, ds, false, rng);
        let to_v = Linear::new(store, "grouping.to_v", ds, ds, false, rng);
        let gru = GruCell::new(store, "grouping.gru", ds, rng);
        let mlp_norm = LayerNorm::new(store, "grouping.mlp_norm", ds);
        let mlp = Mlp::new(store, "grouping.mlp", &[ds, config.mlp_hidden, ds], rng);
        Self {
            config,
            input_norm,
            input_mlp,
            input_out_norm,
            mu,
            log_sigma,
            slot_norm,
            to_q,
            to_k,
            to_v,
            gru,
            mlp_norm,
            mlp,
        }
    }

    /// Layer norm, one-hidden-layer MLP to `D_slots`, layer norm.
    pub fn project_inputs(&self, t: &mut Tape, features: Var) -> Var {
        let x = self.input_norm.forward(t, features);
        let x = self.input_mlp.forward(t, x);
        self.input_out_norm.forward(t, x)
    }

    /// Initial slots on the tape: `mu + exp(log_sigma) ⊙ noise`, or `mu`
    /// repeated when `noise` is `None`.
    pub fn initial_slots(&self, t: &mut Tape, k: usize, noise: Option<&Array2<f64>>) -> Var {
        match noise {
            Some(eps) => {
                assert_eq!(eps.dim(), (k, self.config.slot_dim), "slot noise shape");
                let eps = t.constant(eps.clone());
                let sigma = t.exp(self.log_sigma.var());
                let scaled = t.mul_row(eps, sigma);
                t.add_row(scaled, self.mu.var())
            }
            None => t.repeat_rows(self.mu.var(), k),
        }
    }

    /// One refinement step given precomputed keys and values (`N × D_slots`).
    /// Returns the new slots and the `N × K` attention.
    pub fn iterate(&self, t: &mut Tape, slots: Var, keys: Var, values: Var) -> (Var, Var) {
        let normed = self.slot_norm.forward(t, slots);
        let q = self.to_q.forward(t, normed);
        let logits = t.matmul_nt(keys, q);
        let logits = t.scale(logits, 1.0 / (self.config.slot_dim as f64).sqrt());
        let attn = t.softmax_rows(logits);
        let weights = t.normalize_cols(attn, ATTENTION_EPS);
        let weights_t = t.transpose(weights);
        let updates = t.matmul(weights_t, values);
        let slots = self.gru.forward(t, updates, slots);
        let normed = self.mlp_norm.forward(t, slots);
        let residual = self.mlp.forward(t, normed);
        (t.add(slots, residual), attn)
    }

    /// Full grouping pass on raw features (`N × D_feat`).
    pub fn forward(
        &self,
        t: &mut Tape,
        features: Var,
        k: usize,
        iterations: usize,
        noise: Option<&Array2<f64>>,
    ) -> Result<GroupingOutput> {
        if k < 1 || iterations < 1 {
            return Err(Error::Argument(format!(
                "grouping needs K >= 1 and T >= 1, got K={k}, T={iterations}"
            )));
        }
        if t.shape(features).1 != self.config.feature_dim {
            return Err(Error::Argument(format!(
                "features have dimension {}, grouping expects {}",
                t.shape(features).1,
                self.config.feature_dim
            )));
        }
        let inputs = self.project_inputs(t, features);
        let keys = self.to_k.forward(t, inputs);
        let values = self.to_v.forward(t, inputs);
        let mut slots = self.initial_slots(t, k, noise);
        let mut attention = None;
        for _ in 0..iterations {
            let (next, attn) = self.iterate(t, slots, keys, values);
            slots = next;
            attention = Some(attn);
        }
        Ok(GroupingOutput {
            slots,
            attention: attention.expect("at least one iteration"),
        })
    }

    /// Evaluates one iteration outside of training on plain arrays.
    pub fn slot_attention_iteration(
        &self,
        store: &ParamStore,
        slots: &SlotSet,
        projected_inputs: &Array2<f64>,
    ) -> Result<(SlotSet, AttentionMap)> {
        let ds = self.config.slot_dim;
        if slots.vectors.ncols() != ds || projected_inputs.ncols() != ds {
            return Err(Error::Argument(format!(
                "slots and inputs must have dimension {ds}, got {} and {}",
                slots.vectors.ncols(),
                projected_inputs.ncols()
            )));
        }
        let mut t = Tape::new();
        store.bind(&mut t);
        let s = t.constant(slots.vectors.clone());
        let x = t.constant(projected_inputs.clone());
        let keys = self.to_k.forward(&mut t, x);
        let values = self.to_v.forward(&mut t, x);
        let (next, attn) = self.iterate(&mut t, s, keys, values);
        Ok((
            SlotSet {
                vectors: t.value(next).clone(),
            },
            AttentionMap {
                weights: t.value(attn).t().to_owned(),
            },
        ))
    }

    /// Groups a feature map into `k` slots with `iterations` refinement steps.
    pub fn group<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        features: &PatchFeatureMap,
        k: usize,
        iterations: usize,
        mode: SlotInitMode,
        rng: &mut R,
    ) -> Result<(SlotSet, AttentionMap)> {
        if k < 1 {
            return Err(Error::Argument("need at least one slot".into()));
        }
        let noise = match mode {
            SlotInitMode::Sampled => Some(draw_slot_noise(k, self.config.slot_dim, rng)),
            SlotInitMode::MeanOnly => None,
        };
        let mut t = Tape::new();
        store.bind(&mut t);
        let f = t.constant(features.tokens.clone());
        let out = self.forward(&mut t, f, k, iterations, noise.as_ref())?;
        Ok((
            SlotSet {
                vectors: t.value(out.slots).clone(),
            },
            AttentionMap {
                weights: t.value(out.attention).t().to_owned(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(df: usize, ds: usize) -> (ParamStore, SlotAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let sa = SlotAttention::new(&mut store, GroupingConfig::new(df, ds), &mut rng);
        (store, sa)
    }

    #[test]
    fn mean_only_init_copies_mu() {
        let mu = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let ls = Array2::zeros((1, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = init_slots(&mu, &ls, 4, SlotInitMode::MeanOnly, &mut rng).unwrap();
        for row in s.vectors.rows() {
            assert_eq!(row, mu.row(0));
        }
        assert!(init_slots(&mu, &ls, 0, SlotInitMode::Sampled, &mut rng).is_err());
    }

    #[test]
    fn sampled_init_is_seeded_and_has_the_right_moments() {
        let mu = Array2::zeros((1, 4));
        let ls = Array2::zeros((1, 4));
        let a = init_slots(
            &mu,
            &ls,
            1000,
            SlotInitMode::Sampled,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = init_slots(
            &mu,
            &ls,
            1000,
            SlotInitMode::Sampled,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(a, b);
        for col in a.vectors.columns() {
            let mean = col.sum() / 1000.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
            assert!(mean.abs() < 0.1, "mean {mean}");
            assert!((std - 1.0).abs() < 0.1, "std {std}");
        }
    }

    #[test]
    fn single_slot_takes_all_attention() {
        let (store, sa) = setup(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = PatchFeatureMap::new(
            Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0)),
            (2, 3),
            "t",
        )
        .unwrap();
        let (slots, attn) = sa
            .group(&store, &feats, 1, 3, SlotInitMode::Sampled, &mut rng)
            .unwrap();
        assert_eq!(slots.vectors.dim(), (1, 4));
        assert!(attn.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn duplicated_tokens_share_attention() {
        let (store, sa) = setup(5, 4);
        let row = Array2::from_shape_vec((1, 5), vec![0.3, -0.2, 0.9, 0.1, -0.7]).unwrap();
        let feats =
            PatchFeatureMap::new(row.broadcast((6, 5)).unwrap().to_owned(), (2, 3), "t").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, attn) = sa
            .group(&store, &feats, 3, 3, SlotInitMode::MeanOnly, &mut rng)
            .unwrap();
        for n in 1..6 {
            assert_eq!(attn.weights.column(n), attn.weights.column(0));
        }
    }

    #[test]
    fn attention_columns_are_a_simplex() {
        let (store, sa) = setup(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = PatchFeatureMap::new(
            Array2::from_shape_fn((12, 5), |_| rng.random_range(-2.0..2.0)),
            (3, 4),
            "t",
        )
        .unwrap();
        let (_, attn) = sa
            .group(&store, &feats, 5, 3, SlotInitMode::Sampled, &mut rng)
            .unwrap();
        for col in attn.weights.columns() {
            assert!((col.sum() - 1.0).abs() < 1e-6);
            assert!(col.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let (store, sa) = setup(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = PatchFeatureMap::new(Array2::zeros((4, 5)), (2, 2), "t").unwrap();
        assert!(sa
            .group(&store, &feats, 0, 3, SlotInitMode::Sampled, &mut rng)
            .is_err());
        assert!(sa
            .group(&store, &feats, 2, 0, SlotInitMode::Sampled, &mut rng)
            .is_err());
        let slots = SlotSet {
            vectors: Array2::zeros((2, 3)),
        };
        assert!(sa
            .slot_attention_iteration(&store, &slots, &Array2::zeros((4, 4)))
            .is_err());
    }
}
