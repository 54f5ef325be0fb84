//! Decoders that reconstruct a target from slots and expose per-slot masks.
//!
//! * [`MlpDecoder`]: each slot is broadcast over the patch grid, a learned
//!   positional table is added, and a shared MLP emits a feature vector plus
//!   an alpha logit per position. Alphas are softmaxed over slots and used
//!   to mix the per-slot predictions.
//! * [`TransformerDecoder`]: teacher-forced autoregressive decoder over the
//!   raster-ordered target tokens, cross-attending to the slots.
//! * [`PixelDecoder`]: spatial-broadcast decoder with transposed
//!   convolutions that reconstructs an RGB image.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvTransposeGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{gaussian, LayerNorm, Linear, Mlp, ParamId, ParamStore};

/// `K × rows × cols` soft masks; each position is a distribution over slots.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMaskStack {
    pub masks: Array3<f64>,
}

impl SoftMaskStack {
    /// Builds a stack from an `N × K` matrix of per-position slot weights.
    pub fn from_position_weights(weights: &Array2<f64>, grid: (usize, usize)) -> Result<Self> {
        let (n, k) = weights.dim();
        if n != grid.0 * grid.1 {
            return Err(Error::Argument(format!(
                "{n} positions cannot fill a {}x{} grid",
                grid.0, grid.1
            )));
        }
        let masks = Array3::from_shape_fn((k, grid.0, grid.1), |(s, r, c)| {
            weights[[r * grid.1 + c, s]]
        });
        Ok(Self { masks })
    }

    pub fn num_slots(&self) -> usize {
        self.masks.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, r, c) = self.masks.dim();
        (r, c)
    }

    /// Largest deviation of a per-position slot sum from one, and whether any entry is negative.
    pub fn simplex_error(&self) -> (f64, bool) {
        let (k, r, c) = self.masks.dim();
        let mut worst: f64 = 0.0;
        let mut negative = false;
        for y in 0..r {
            for x in 0..c {
                let mut sum = 0.0;
                for s in 0..k {
                    let v = self.masks[[s, y, x]];
                    negative |= v < 0.0;
                    sum += v;
                }
                worst = worst.max((sum - 1.0).abs());
            }
        }
        (worst, negative)
    }

    /// Slots reordered so that new slot `i` is old slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let (_, r, c) = self.masks.dim();
        Self {
            masks: Array3::from_shape_fn((perm.len(), r, c), |(s, y, x)| {
                self.masks[[perm[s], y, x]]
            }),
        }
    }
}

/// Decoder output: `values` has one row per target position (patch tokens
/// or image pixels in raster order).
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub values: Array2<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// Positions × channels reconstruction.
    pub reconstruction: Var,
    /// Positions × slots mask weights.
    pub masks: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpDecoderConfig {
    pub slot_dim: usize,
    pub feature_dim: usize,
    pub grid: (usize, usize),
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct MlpDecoder {
    pub config: MlpDecoderConfig,
    pub positions: ParamId,
    pub mlp: Mlp,
}

impl MlpDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: MlpDecoderConfig,
        rng: &mut R,
    ) -> Self {
        let n = config.grid.0 * config.grid.1;
        let positions = store.add(
            "decoder.positions",
            gaussian(rng, 0.02, (n, config.slot_dim)),
        );
        let h = config.hidden;
        let mlp = Mlp::new(
            store,
            "decoder.mlp",
            &[config.slot_dim, h, h, h, config.feature_dim + 1],
            rng,
        );
        Self {
            config,
            positions,
            mlp,
        }
    }

    pub fn forward(&self, t: &mut Tape, slots: Var) -> Result<DecoderOutput> {
        let (k, ds) = t.shape(slots);
        if ds != self.config.slot_dim {
            return Err(Error::Argument(format!(
                "slots have dimension {ds}, decoder expects {}",
                self.config.slot_dim
            )));
        }
        let n = self.config.grid.0 * self.config.grid.1;
        let df = self.config.feature_dim;
        let broadcast = t.repeat_rows(slots, n);
        let pos = t.tile_rows(self.positions.var(), k);
        let x = t.add(broadcast, pos);
        let out = self.mlp.forward(t, x);
        let per_slot = t.slice_cols(out, 0, df);
        let alpha = t.slice_cols(out, df, df + 1);
        let alpha = t.reshape(alpha, k, n);
        let alpha = t.transpose(alpha);
        let masks = t.softmax_rows(alpha);
        let reconstruction = t.mix_slots(per_slot, masks);
        Ok(DecoderOutput {
            reconstruction,
            masks,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerDecoderConfig {
    pub slot_dim: usize,
    pub feature_dim: usize,
    pub grid: (usize, usize),
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of each block's MLP (4·D_feat by default).
    pub mlp_hidden: usize,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
        }
    }

    /// Multi-head attention. Returns the projected output and, for
    /// non-causal attention, the head-averaged `queries × keys` weights.
    fn forward(
        &self,
        t: &mut Tape,
        queries: Var,
        keys: Var,
        heads: usize,
        causal: bool,
    ) -> (Var, Option<Var>) {
        let dim = t.shape(queries).1;
        let head_dim = dim / heads;
        let q = self.q.forward(t, queries);
        let k = self.k.forward(t, keys);
        let v = self.v.forward(t, keys);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weight_sum: Option<Var> = None;
        for h in 0..heads {
            let cols = (h * head_dim, (h + 1) * head_dim);
            let qh = t.slice_cols(q, cols.0, cols.1);
            let kh = t.slice_cols(k, cols.0, cols.1);
            let vh = t.slice_cols(v, cols.0, cols.1);
            let scores = t.matmul_nt(qh, kh);
            let scores = t.scale(scores, scale);
            let probs = if causal {
                t.causal_softmax_rows(scores)
            } else {
                t.softmax_rows(scores)
            };
            if !causal {
                weight_sum = Some(match weight_sum {
                    Some(acc) => t.add(acc, probs),
                    None => probs,
                });
            }
            outs.push(t.matmul(probs, vh));
        }
        let joined = if heads == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)
        };
        let out = self.out.forward(t, joined);
        let mean = weight_sum.map(|w| {
            if heads == 1 {
                w
            } else {
                t.scale(w, 1.0 / heads as f64)
            }
        });
        (out, mean)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub cross_norm: LayerNorm,
    pub cross_attn: Attention,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub config: TransformerDecoderConfig,
    pub start_token: ParamId,
    pub input_proj: Linear,
    pub input_norm: LayerNorm,
    pub slot_proj: Linear,
    pub slot_norm: LayerNorm,
    pub blocks: Vec<DecoderBlock>,
}

impl TransformerDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: TransformerDecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.feature_dim;
        if config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "feature dimension {d} is not divisible into {} heads",
                config.heads
            )));
        }
        if config.layers == 0 {
            return Err(Error::Config(
                "transformer decoder needs at least one block".into(),
            ));
        }
        let start_token = store.add("decoder.start_token", gaussian(rng, 0.02, (1, d)));
        let input_proj = Linear::new(store, "decoder.input_proj", d, d, true, rng);
        let input_norm = LayerNorm::new(store, "decoder.input_norm", d);
        let slot_proj = Linear::new(store, "decoder.slot_proj", config.slot_dim, d, true, rng);
        let slot_norm = LayerNorm::new(store, "decoder.slot_norm", d);
        let blocks = (0..config.layers)
            .map(|i| {
                let name = format!("decoder.block{i}");
                DecoderBlock {
                    self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
                    self_attn: Attention::new(store, &format!("{name}.self_attn"), d, rng),
                    cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
                    cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, rng),
                    mlp_norm: LayerNorm::new(store, &format!("{name}.mlp_norm"), d),
                    mlp: Mlp::new(
                        store,
                        &format!("{name}.mlp"),
                        &[d, config.mlp_hidden, d],
                        rng,
                    ),
                }
            })
            .collect();
        Ok(Self {
            config,
            start_token,
            input_proj,
            input_norm,
            slot_proj,
            slot_norm,
            blocks,
        })
    }

    /// Teacher-forced pass: the input sequence is the start token followed
    /// by `targets[..N-1]`.
    pub fn forward(
        &self,
        t: &mut Tape,
        slots: Var,
        targets: &Array2<f64>,
    ) -> Result<DecoderOutput> {
        let n = self.config.grid.0 * self.config.grid.1;
        let d = self.config.feature_dim;
        if targets.dim() != (n, d) {
            return Err(Error::Argument(format!(
                "targets are {:?}, decoder expects {n}x{d}",
                targets.dim()
            )));
        }
        if t.shape(slots).1 != self.config.slot_dim {
            return Err(Error::Argument(format!(
                "slots have dimension {}, decoder expects {}",
                t.shape(slots).1,
                self.config.slot_dim
            )));
        }
        let shifted = if n > 1 {
            let prefix = t.constant(targets.slice(ndarray::s![..n - 1, ..]).to_owned());
            t.concat_rows(&[self.start_token.var(), prefix])
        } else {
            self.start_token.var()
        };
        let x = self.input_proj.forward(t, shifted);
        let mut x = self.input_norm.forward(t, x);
        let s = self.slot_proj.forward(t, slots);
        let s = self.slot_norm.forward(t, s);
        let heads = self.config.heads;
        let mut masks = None;
        for block in &self.blocks {
            let h = block.self_norm.forward(t, x);
            let (a, _) = block.self_attn.forward(t, h, h, heads, true);
            x = t.add(x, a);
            let h = block.cross_norm.forward(t, x);
            let (c, weights) = block.cross_attn.forward(t, h, s, heads, false);
            x = t.add(x, c);
            masks = weights;
            let h = block.mlp_norm.forward(t, x);
            let m = block.mlp.forward(t, h);
            x = t.add(x, m);
        }
        Ok(DecoderOutput {
            reconstruction: x,
            masks: masks.expect("at least one block"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelDecoderConfig {
    pub slot_dim: usize,
    pub channels: usize,
    pub image_channels: usize,
    pub broadcast: (usize, usize),
    pub output: (usize, usize),
    pub kernel: usize,
    /// Total number of transposed convolutions (upsampling ones included).
    pub layers: usize,
}

/// Spatial-broadcast image decoder.
#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub config: PixelDecoderConfig,
    pub position_proj: Linear,
    pub layers: Vec<(ParamId, ParamId, ConvTransposeGeom)>,
}

/// `[y, x, 1-y, 1-x]` coordinates in `[0, 1]` for every cell of `grid`.
fn coordinate_grid(grid: (usize, usize)) -> Array2<f64> {
    let span = |n: usize, i: usize| {
        if n > 1 {
            i as f64 / (n - 1) as f64
        } else {
            0.5
        }
    };
    Array2::from_shape_fn((grid.0 * grid.1, 4), |(p, j)| {
        let (y, x) = (span(grid.0, p / grid.1), span(grid.1, p % grid.1));
        [y, x, 1.0 - y, 1.0 - x][j]
    })
}

impl PixelDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: PixelDecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (bh, bw) = config.broadcast;
        let (oh, ow) = config.output;
        let ratio = |o: usize, b: usize| {
            (b > 0 && o.is_multiple_of(b) && (o / b).is_power_of_two())
                .then(|| (o / b).trailing_zeros() as usize)
        };
        let ups = match (ratio(oh, bh), ratio(ow, bw)) {
            (Some(a), Some(b)) if a == b => a,
            _ => {
                return Err(Error::Config(format!(
                "output {oh}x{ow} is not a power-of-two upsampling of the {bh}x{bw} broadcast grid"
            )))
            }
        };
        if config.layers < ups + 1 {
            return Err(Error::Config(format!(
                "{} layers cannot upsample {ups} times and emit the output layer",
                config.layers
            )));
        }
        if config.kernel.is_multiple_of(2) || config.kernel < 3 {
            return Err(Error::Config(
                "kernel size must be odd and at least 3".into(),
            ));
        }
        let pad = config.kernel / 2;
        let position_proj = Linear::new(
            store,
            "decoder.position_proj",
            4,
            config.slot_dim,
            true,
            rng,
        );
        let mut layers = Vec::with_capacity(config.layers);
        let (mut h, mut w) = (bh, bw);
        let mut cin = config.slot_dim;
        for i in 0..config.layers {
            let last = i + 1 == config.layers;
            let cout = if last {
                config.image_channels + 1
            } else {
                config.channels
            };
            let (stride, out_pad) = if i < ups { (2, 1) } else { (1, 0) };
            let geom =
                ConvTransposeGeom::new((h, w), cin, cout, config.kernel, stride, pad, out_pad)
                    .ok_or_else(|| Error::Config("degenerate transposed convolution".into()))?;
            let fan_in = cin * config.kernel * config.kernel;
            let weight = store.add(
                format!("decoder.deconv{i}.weight"),
                crate::nn::fan_in_uniform(rng, fan_in, geom.weight_shape()),
            );
            let bias = store.add(
                format!("decoder.deconv{i}.bias"),
                crate::nn::fan_in_uniform(rng, fan_in, (1, cout)),
            );
            layers.push((weight, bias, geom));
            h = geom.out_h;
            w = geom.out_w;
            cin = cout;
        }
        debug_assert_eq!((h, w), (oh, ow));
        Ok(Self {
            config,
            position_proj,
            layers,
        })
    }

    pub fn forward(&self, t: &mut Tape, slots: Var) -> Result<DecoderOutput> {
        let (k, ds) = t.shape(slots);
        if ds != self.config.slot_dim {
            return Err(Error::Argument(format!(
                "slots have dimension {ds}, decoder expects {}",
                self.config.slot_dim
            )));
        }
        let cells = self.config.broadcast.0 * self.config.broadcast.1;
        let coords = t.constant(coordinate_grid(self.config.broadcast));
        let pos = self.position_proj.forward(t, coords);
        let c = self.config.image_channels;
        let mut colors = Vec::with_capacity(k);
        let mut alphas = Vec::with_capacity(k);
        let last = self.layers.len() - 1;
        for slot in 0..k {
            let z = t.slice_rows(slots, slot, slot + 1);
            let z = t.repeat_rows(z, cells);
            let mut x = t.add(z, pos);
            for (i, (weight, bias, geom)) in self.layers.iter().enumerate() {
                x = t.conv_transpose(x, weight.var(), *geom);
                x = t.add_row(x, bias.var());
                if i < last {
                    x = t.relu(x);
                }
            }
            colors.push(t.slice_cols(x, 0, c));
            alphas.push(t.slice_cols(x, c, c + 1));
        }
        let logits = if k == 1 {
            alphas[0]
        } else {
            t.concat_cols(&alphas)
        };
        let masks = t.softmax_rows(logits);
        let stacked = if k == 1 {
            colors[0]
        } else {
            t.concat_rows(&colors)
        };
        let reconstruction = t.mix_slots(stacked, masks);
        Ok(DecoderOutput {
            reconstruction,
            masks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn slots(seed: u64, k: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0..1.0))
    }

    fn run_mlp(
        dec: &MlpDecoder,
        store: &ParamStore,
        z: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut t = Tape::new();
        store.bind(&mut t);
        let s = t.constant(z.clone());
        let out = dec.forward(&mut t, s).unwrap();
        (
            t.value(out.reconstruction).clone(),
            t.value(out.masks).clone(),
        )
    }

    fn mlp_decoder() -> (ParamStore, MlpDecoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = MlpDecoderConfig {
            slot_dim: 3,
            feature_dim: 2,
            grid: (2, 3),
            hidden: 8,
        };
        let dec = MlpDecoder::new(&mut store, cfg, &mut rng);
        (store, dec)
    }

    #[test]
    fn mlp_single_slot_has_unit_mask() {
        let (store, dec) = mlp_decoder();
        let (_, masks) = run_mlp(&dec, &store, &slots(1, 1, 3));
        assert!(masks.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn mlp_identical_slots_split_evenly() {
        let (store, dec) = mlp_decoder();
        let z = slots(1, 1, 3);
        let twin = ndarray::concatenate![ndarray::Axis(0), z, z];
        let (_, masks) = run_mlp(&dec, &store, &twin);
        assert!(masks.iter().all(|&m| m == 0.5));
    }

    #[test]
    fn mlp_rejects_wrong_slot_dim() {
        let (store, dec) = mlp_decoder();
        let mut t = Tape::new();
        store.bind(&mut t);
        let s = t.constant(Array2::zeros((2, 4)));
        assert!(dec.forward(&mut t, s).is_err());
    }

    #[test]
    fn transformer_rejects_bad_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TransformerDecoderConfig {
            slot_dim: 3,
            feature_dim: 4,
            grid: (2, 2),
            layers: 1,
            heads: 3,
            mlp_hidden: 8,
        };
        assert!(TransformerDecoder::new(&mut store, cfg.clone(), &mut rng).is_err());
        let dec = TransformerDecoder::new(
            &mut store,
            TransformerDecoderConfig { heads: 2, ..cfg },
            &mut rng,
        )
        .unwrap();
        let mut t = Tape::new();
        store.bind(&mut t);
        let s = t.constant(slots(0, 2, 3));
        assert!(dec.forward(&mut t, s, &Array2::zeros((3, 4))).is_err());
    }

    #[test]
    fn pixel_decoder_checks_reachable_sizes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PixelDecoderConfig {
            slot_dim: 4,
            channels: 3,
            image_channels: 3,
            broadcast: (2, 2),
            output: (6, 6),
            kernel: 5,
            layers: 3,
        };
        assert!(matches!(
            PixelDecoder::new(&mut store, cfg.clone(), &mut rng),
            Err(Error::Config(_))
        ));
        let cfg = PixelDecoderConfig {
            output: (8, 8),
            ..cfg
        };
        let too_shallow = PixelDecoderConfig {
            layers: 2,
            ..cfg.clone()
        };
        assert!(matches!(
            PixelDecoder::new(&mut store, too_shallow, &mut rng),
            Err(Error::Config(_))
        ));
        let ok = PixelDecoder::new(
            &mut store,
            PixelDecoderConfig { layers: 4, ..cfg },
            &mut rng,
        )
        .unwrap();
        assert_eq!(ok.layers.len(), 4);
        assert_eq!((ok.layers[3].2.out_h, ok.layers[3].2.out_w), (8, 8));
    }

    #[test]
    fn pixel_decoder_masks_for_one_and_identical_slots() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PixelDecoderConfig {
            slot_dim: 4,
            channels: 3,
            image_channels: 3,
            broadcast: (2, 2),
            output: (4, 4),
            kernel: 3,
            layers: 2,
        };
        let dec = PixelDecoder::new(&mut store, cfg, &mut rng).unwrap();
        let z = slots(3, 1, 4);
        for (k, expected) in [(1usize, 1.0), (3, 1.0 / 3.0)] {
            let mut t = Tape::new();
            store.bind(&mut t);
            let rows: Vec<_> = (0..k).map(|_| z.clone()).collect();
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            let s = t.constant(ndarray::concatenate(ndarray::Axis(0), &views).unwrap());
            let out = dec.forward(&mut t, s).unwrap();
            assert_eq!(t.shape(out.reconstruction), (16, 3));
            assert!(t
                .value(out.masks)
                .iter()
                .all(|&m| (m - expected).abs() < 1e-15));
        }
    }

    #[test]
    fn position_weights_reshape_to_grid() {
        let w =
            Array2::from_shape_vec((4, 2), vec![0.1, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6]).unwrap();
        let stack = SoftMaskStack::from_position_weights(&w, (2, 2)).unwrap();
        assert_eq!(stack.masks[[1, 1, 0]], 0.7);
        assert_eq!(stack.simplex_error().1, false);
        assert!(SoftMaskStack::from_position_weights(&w, (3, 2)).is_err());
    }
}
