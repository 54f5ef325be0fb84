//! Model assembly, the feature-reconstruction objective, Adam with warmup and
//! exponential decay, gradient clipping and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoding::{
    DecoderOutput, MlpDecoder, MlpDecoderConfig, PixelDecoder, PixelDecoderConfig, Reconstruction,
    SoftMaskStack, TransformerDecoder, TransformerDecoderConfig,
};
use crate::error::{read_json, write_json, Error, Result};
use crate::features::{
    rescale_target_map, ConvEncoder, EncoderConfig, Image, PatchFeatureMap, Provider,
};
use crate::grouping::{draw_slot_noise, GroupingConfig, SlotAttention, SlotInitMode};
use crate::masks::{DecoderKind, ModelMasks};
use crate::nn::{round_to_f32, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Where the grouping module reads its inputs from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSource {
    /// The frozen feature map stored with each sample (also the target).
    Features,
    /// A convolutional encoder trained jointly, fed with the sample image.
    TrainableConv,
}

/// Layer sizes of the grouping module and of every decoder variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub slot_dim: usize,
    pub slot_mlp_hidden: usize,
    pub slot_init: SlotInitMode,
    pub mlp_decoder_hidden: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_mlp_hidden: usize,
    pub pixel_channels: usize,
    pub pixel_kernel: usize,
    pub pixel_layers: usize,
    pub pixel_broadcast: (usize, usize),
    /// Reconstructed image size; the sample image is box-downsampled to it.
    pub pixel_output: (usize, usize),
    pub input: InputSource,
    /// Frozen provider of the reconstruction target (and of the grouping
    /// input unless a trainable encoder is used).
    #[serde(default = "default_target_provider")]
    pub target: Provider,
    pub encoder_hidden: usize,
    pub patch_size: usize,
}

fn default_target_provider() -> Provider {
    Provider::Precomputed
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            slot_dim: 128,
            slot_mlp_hidden: 512,
            slot_init: SlotInitMode::Sampled,
            mlp_decoder_hidden: 1024,
            transformer_layers: 4,
            transformer_heads: 8,
            transformer_mlp_hidden: 3072,
            pixel_channels: 64,
            pixel_kernel: 5,
            pixel_layers: 6,
            pixel_broadcast: (8, 8),
            pixel_output: (64, 64),
            input: InputSource::Features,
            target: Provider::Precomputed,
            encoder_hidden: 64,
            patch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub decay_half_life: f64,
    pub grad_clip_norm: f64,
    pub num_slots: usize,
    pub iterations: usize,
    pub decoder: DecoderKind,
    pub target_scale: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500_000,
            batch_size: 64,
            peak_lr: 4e-4,
            warmup_steps: 10_000,
            decay_half_life: 100_000.0,
            grad_clip_norm: 1.0,
            num_slots: 11,
            iterations: 3,
            decoder: DecoderKind::Mlp,
            target_scale: 1.0,
            seed: 0,
            checkpoint_every: 0,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    /// Small model and short schedule sized for the synthetic dataset on a CPU.
    pub fn desk() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 500,
            decay_half_life: 5000.0,
            num_slots: 6,
            architecture: Architecture {
                slot_dim: 32,
                slot_mlp_hidden: 64,
                mlp_decoder_hidden: 32,
                transformer_layers: 2,
                transformer_heads: 4,
                transformer_mlp_hidden: 64,
                pixel_channels: 8,
                pixel_kernel: 3,
                pixel_layers: 3,
                pixel_broadcast: (8, 8),
                pixel_output: (32, 32),
                encoder_hidden: 16,
                ..Architecture::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("steps", self.steps.max(1)),
            ("batch_size", self.batch_size),
            ("warmup_steps", self.warmup_steps),
            ("num_slots", self.num_slots),
            ("iterations", self.iterations),
            ("slot_dim", self.architecture.slot_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            )));
        }
        if !(self.decay_half_life > 0.0) {
            return Err(Error::Config("decay_half_life must be positive".into()));
        }
        if !(self.target_scale > 0.0 && self.target_scale <= 1.0) {
            return Err(Error::Config(format!(
                "target_scale {} outside (0, 1]",
                self.target_scale
            )));
        }
        if self.architecture.target == Provider::TrainableConv {
            return Err(Error::Config(
                "the trainable encoder cannot provide its own reconstruction target".into(),
            ));
        }
        if self.decoder == DecoderKind::Pixel && self.target_scale != 1.0 {
            return Err(Error::Config(
                "target_scale applies to feature targets only".into(),
            ));
        }
        Ok(())
    }
}

/// `peak · min(1, step / warmup) · 2^(−step / half_life)`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let s = step as f64;
    let warm = (s / cfg.warmup_steps as f64).min(1.0);
    cfg.peak_lr * warm * (-s / cfg.decay_half_life).exp2()
}

/// Mean squared error over all entries.
pub fn reconstruction_loss(y: &Reconstruction, h: &PatchFeatureMap) -> Result<f64> {
    if y.values.dim() != h.tokens.dim() {
        return Err(Error::Argument(format!(
            "reconstruction {:?} and target {:?} differ in shape",
            y.values.dim(),
            h.tokens.dim()
        )));
    }
    let sq: f64 = y
        .values
        .iter()
        .zip(&h.tokens)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / y.values.len() as f64)
}

/// One training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub features: PatchFeatureMap,
    pub image: Option<Image>,
}

/// Shapes a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub feature_dim: usize,
    pub grid: (usize, usize),
    /// `(height, width, channels)` when samples carry images.
    pub image: Option<(usize, usize, usize)>,
}

impl DataDims {
    pub fn of(samples: &[TrainSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("no training samples".into()))?;
        let dims = Self {
            feature_dim: first.features.dim(),
            grid: first.features.grid,
            image: first
                .image
                .as_ref()
                .map(|i| (i.height, i.width, i.channels())),
        };
        for (i, s) in samples.iter().enumerate() {
            let other = Self {
                feature_dim: s.features.dim(),
                grid: s.features.grid,
                image: s.image.as_ref().map(|i| (i.height, i.width, i.channels())),
            };
            if other != dims {
                return Err(Error::Data(format!(
                    "sample {i} has shapes {other:?}, expected {dims:?}"
                )));
            }
        }
        Ok(dims)
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Mlp(MlpDecoder),
    Transformer(TransformerDecoder),
    Pixel(PixelDecoder),
}

/// Encoder (optional) + Slot Attention + decoder with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Option<ConvEncoder>,
    pub grouping: SlotAttention,
    pub decoder: Decoder,
    pub dims: DataDims,
    pub num_slots: usize,
    pub iterations: usize,
    pub target_scale: f64,
    pub slot_init: SlotInitMode,
    /// Grid of the (possibly rescaled) feature target.
    pub target_grid: (usize, usize),
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub slots: Array2<f64>,
    /// `N × K` final Slot Attention weights.
    pub attention: Array2<f64>,
    pub reconstruction: Array2<f64>,
    /// Positions × K decoder masks.
    pub decoder_masks: Array2<f64>,
    pub loss: f64,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub slots: Var,
    pub attention: Var,
    pub output: DecoderOutput,
    pub loss: Var,
}

impl Model {
    pub fn new(cfg: &TrainConfig, dims: DataDims) -> Result<Self> {
        cfg.validate()?;
        let a = &cfg.architecture;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = match a.input {
            InputSource::Features => None,
            InputSource::TrainableConv => {
                let (h, w, c) = dims.image.ok_or_else(|| {
                    Error::Config("the trainable encoder needs sample images".into())
                })?;
                let enc_cfg = EncoderConfig {
                    provider: Provider::TrainableConv,
                    patch_size: a.patch_size,
                    feature_dim: dims.feature_dim,
                    seed: cfg.seed,
                };
                if enc_cfg.grid_for(h, w)? != dims.grid {
                    return Err(Error::Config(format!(
                        "encoder grid {:?} differs from target grid {:?}",
                        enc_cfg.grid_for(h, w)?,
                        dims.grid
                    )));
                }
                Some(ConvEncoder::new(
                    &mut store,
                    enc_cfg,
                    c,
                    a.encoder_hidden,
                    &mut rng,
                )?)
            }
        };
        let grouping = SlotAttention::new(
            &mut store,
            GroupingConfig {
                feature_dim: dims.feature_dim,
                slot_dim: a.slot_dim,
                mlp_hidden: a.slot_mlp_hidden,
            },
            &mut rng,
        );
        let scaled = |n: usize| ((n as f64 * cfg.target_scale).round() as usize).max(1);
        let target_grid = (scaled(dims.grid.0), scaled(dims.grid.1));
        let decoder = match cfg.decoder {
            DecoderKind::Mlp => Decoder::Mlp(MlpDecoder::new(
                &mut store,
                MlpDecoderConfig {
                    slot_dim: a.slot_dim,
                    feature_dim: dims.feature_dim,
                    grid: target_grid,
                    hidden: a.mlp_decoder_hidden,
                },
                &mut rng,
            )),
            DecoderKind::Transformer => Decoder::Transformer(TransformerDecoder::new(
                &mut store,
                TransformerDecoderConfig {
                    slot_dim: a.slot_dim,
                    feature_dim: dims.feature_dim,
                    grid: target_grid,
                    layers: a.transformer_layers,
                    heads: a.transformer_heads,
                    mlp_hidden: a.transformer_mlp_hidden,
                },
                &mut rng,
            )?),
            DecoderKind::Pixel => {
                let (h, w, c) = dims
                    .image
                    .ok_or_else(|| Error::Config("the pixel decoder needs sample images".into()))?;
                let (oh, ow) = a.pixel_output;
                if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 || h / oh != w / ow {
                    return Err(Error::Config(format!(
                        "pixel output {oh}x{ow} is not an integer downsampling of {h}x{w} images"
                    )));
                }
                Decoder::Pixel(PixelDecoder::new(
                    &mut store,
                    PixelDecoderConfig {
                        slot_dim: a.slot_dim,
                        channels: a.pixel_channels,
                        image_channels: c,
                        broadcast: a.pixel_broadcast,
                        output: a.pixel_output,
                        kernel: a.pixel_kernel,
                        layers: a.pixel_layers,
                    },
                    &mut rng,
                )?)
            }
        };
        Ok(Self {
            store,
            encoder,
            grouping,
            decoder,
            dims,
            num_slots: cfg.num_slots,
            iterations: cfg.iterations,
            target_scale: cfg.target_scale,
            slot_init: a.slot_init,
            target_grid,
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self.decoder {
            Decoder::Mlp(_) => DecoderKind::Mlp,
            Decoder::Transformer(_) => DecoderKind::Transformer,
            Decoder::Pixel(_) => DecoderKind::Pixel,
        }
    }

    /// Grid on which decoder masks live.
    pub fn mask_grid(&self) -> (usize, usize) {
        match &self.decoder {
            Decoder::Pixel(p) => p.config.output,
            _ => self.target_grid,
        }
    }

    /// The regression target of a sample.
    pub fn target(&self, sample: &TrainSample) -> Result<Array2<f64>> {
        match &self.decoder {
            Decoder::Pixel(p) => {
                let image = sample
                    .image
                    .as_ref()
                    .ok_or_else(|| Error::Data("pixel reconstruction needs an image".into()))?;
                Ok(image.downsample(image.height / p.config.output.0)?.pixels)
            }
            _ => Ok(rescale_target_map(&sample.features, self.target_scale)?.tokens),
        }
    }

    /// Draws slot initialization noise (none in mean-only mode).
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Array2<f64>> {
        match self.slot_init {
            SlotInitMode::Sampled => Some(draw_slot_noise(
                self.num_slots,
                self.grouping.config.slot_dim,
                rng,
            )),
            SlotInitMode::MeanOnly => None,
        }
    }

    /// Records the full forward pass on a tape whose first entries are the
    /// bound parameters.
    pub fn forward(
        &self,
        t: &mut Tape,
        sample: &TrainSample,
        target: &Array2<f64>,
        noise: Option<&Array2<f64>>,
    ) -> Result<ForwardVars> {
        let inputs = match &self.encoder {
            Some(enc) => {
                let image = sample
                    .image
                    .as_ref()
                    .ok_or_else(|| Error::Data("the trainable encoder needs an image".into()))?;
                enc.forward(t, image)?.0
            }
            None => t.constant(sample.features.tokens.clone()),
        };
        let grouped = self
            .grouping
            .forward(t, inputs, self.num_slots, self.iterations, noise)?;
        let output = match &self.decoder {
            Decoder::Mlp(d) => d.forward(t, grouped.slots)?,
            Decoder::Transformer(d) => d.forward(t, grouped.slots, target)?,
            Decoder::Pixel(d) => d.forward(t, grouped.slots)?,
        };
        if t.shape(output.reconstruction) != target.dim() {
            return Err(Error::Data(format!(
                "reconstruction {:?} does not match target {:?}",
                t.shape(output.reconstruction),
                target.dim()
            )));
        }
        let loss = t.mse(output.reconstruction, target);
        Ok(ForwardVars {
            slots: grouped.slots,
            attention: grouped.attention,
            output,
            loss,
        })
    }

    pub fn infer(&self, sample: &TrainSample, noise: Option<&Array2<f64>>) -> Result<Inference> {
        let target = self.target(sample)?;
        let mut t = Tape::new();
        self.store.bind(&mut t);
        let v = self.forward(&mut t, sample, &target, noise)?;
        Ok(Inference {
            slots: t.value(v.slots).clone(),
            attention: t.value(v.attention).clone(),
            reconstruction: t.value(v.output.reconstruction).clone(),
            decoder_masks: t.value(v.output.masks).clone(),
            loss: t.scalar(v.loss),
        })
    }

    /// Both mask stacks of an inference result, on their native grids.
    pub fn masks(&self, inference: &Inference) -> Result<ModelMasks> {
        Ok(ModelMasks {
            decoder: self.kind(),
            decoder_masks: SoftMaskStack::from_position_weights(
                &inference.decoder_masks,
                self.mask_grid(),
            )?,
            slot_attention: SoftMaskStack::from_position_weights(
                &inference.attention,
                self.dims.grid,
            )?,
        })
    }

    /// Loss of one sample and its gradient for every parameter, in store order.
    pub fn loss_and_gradients(
        &self,
        sample: &TrainSample,
        noise: Option<&Array2<f64>>,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let target = self.target(sample)?;
        let mut t = Tape::new();
        self.store.bind(&mut t);
        let v = self.forward(&mut t, sample, &target, noise)?;
        let mut grads = t.backward(v.loss);
        let per_param = self
            .store
            .ids()
            .map(|id| {
                grads
                    .take(id.var())
                    .unwrap_or_else(|| Array2::zeros(self.store.get(id).dim()))
            })
            .collect();
        Ok((t.scalar(v.loss), per_param))
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let z: Vec<_> = store
            .values()
            .iter()
            .map(|p| Array2::zeros(p.dim()))
            .collect();
        Self { m: z.clone(), v: z }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// One Adam update with bias correction at 1-based time `t`. Parameters are
/// rounded to `f32` afterwards.
pub fn adam_update(
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut AdamState,
    lr: f64,
    t: usize,
) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        ndarray::Zip::from(&mut *p)
            .and(g)
            .and(&mut *m)
            .and(&mut *v)
            .for_each(|p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *p -= lr * update;
            });
        round_to_f32(p);
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Index of the step just taken (0-based).
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

impl TrainState {
    pub fn new(config: TrainConfig, dims: DataDims) -> Result<Self> {
        let model = Model::new(&config, dims)?;
        let adam = AdamState::zeros_like(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            rng,
        })
    }
}

/// Forward, backward, clipping and one Adam step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[&TrainSample]) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let noise: Vec<Option<Array2<f64>>> = batch
        .iter()
        .map(|_| state.model.draw_noise(&mut state.rng))
        .collect();
    let model = &state.model;
    let results: Vec<Result<(f64, Vec<Array2<f64>>)>> = batch
        .par_iter()
        .zip(noise.par_iter())
        .map(|(s, n)| model.loss_and_gradients(s, n.as_ref()))
        .collect();
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Option<Vec<Array2<f64>>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "loss is {loss} at step {}",
            state.step
        )));
    }
    let mut grads = grads.expect("nonempty batch");
    for g in &mut grads {
        g.mapv_inplace(|x| x * inv);
    }
    let grad_norm = clip_global_norm(&mut grads, state.config.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Numerical(format!(
            "gradient norm is {grad_norm} at step {}",
            state.step
        )));
    }
    let lr = lr_schedule(state.step, &state.config);
    adam_update(
        state.model.store.values_mut(),
        &grads,
        &mut state.adam,
        lr,
        state.step + 1,
    );
    let stats = StepStats {
        step: state.step,
        lr,
        loss,
        grad_norm,
    };
    state.step += 1;
    Ok(stats)
}

/// Picks the sample indices of the next batch.
pub fn draw_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, batch_size: usize) -> Vec<usize> {
    if batch_size <= n {
        sample(rng, n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Runs steps until `state.step == state.config.steps`, calling `on_step`
/// after each and checkpointing into `checkpoint_dir` when given.
pub fn train_until_done(
    state: &mut TrainState,
    samples: &[TrainSample],
    checkpoint_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepStats) -> Result<()>,
) -> Result<()> {
    let dims = DataDims::of(samples)?;
    if dims.feature_dim != state.model.dims.feature_dim || dims.grid != state.model.dims.grid {
        return Err(Error::Config(format!(
            "dataset has feature dim {} on grid {:?}, model expects {} on {:?}",
            dims.feature_dim, dims.grid, state.model.dims.feature_dim, state.model.dims.grid
        )));
    }
    while state.step < state.config.steps {
        let idx = draw_batch(&mut state.rng, samples.len(), state.config.batch_size);
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let stats = train_step(state, &batch)?;
        on_step(&stats)?;
        let every = state.config.checkpoint_every;
        if let Some(dir) = checkpoint_dir {
            if every > 0 && state.step.is_multiple_of(every) && state.step < state.config.steps {
                save_checkpoint(state, dir)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(state, dir)?;
    }
    Ok(())
}

/// Builds a fresh state from `cfg` and trains it to completion.
pub fn train(
    cfg: TrainConfig,
    samples: &[TrainSample],
    checkpoint_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepStats) -> Result<()>,
) -> Result<TrainState> {
    let dims = DataDims::of(samples)?;
    let mut state = TrainState::new(cfg, dims)?;
    train_until_done(&mut state, samples, checkpoint_dir, on_step)?;
    Ok(state)
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const OPTIM_MAGIC: &[u8; 4] = b"DNSO";

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    version: u32,
    train: TrainConfig,
    dims: DataDims,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub version: u32,
    pub dtype: String,
    pub total_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `config.json`, `params.bin`, `params.json`, `optim.bin` and `rng.json`.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("config.json"),
        &CheckpointConfig {
            version: CHECKPOINT_VERSION,
            train: state.config.clone(),
            dims: state.model.dims,
        },
    )?;
    let store = &state.model.store;
    let mut bin = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::new();
    for (name, value) in store.names().iter().zip(store.values()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [value.nrows(), value.ncols()],
            offset: bin.len(),
        });
        for &x in value {
            bin.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    write_bytes(&dir.join("params.bin"), &bin)?;
    write_json(
        &dir.join("params.json"),
        &ParamsManifest {
            version: CHECKPOINT_VERSION,
            dtype: "f32-le".into(),
            total_bytes: bin.len(),
            tensors,
        },
    )?;
    let mut optim = Vec::new();
    optim.extend_from_slice(OPTIM_MAGIC);
    optim.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    optim.extend_from_slice(&(state.step as u64).to_le_bytes());
    optim.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
        for &x in m.iter().chain(v.iter()) {
            optim.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_bytes(&dir.join("optim.bin"), &optim)?;
    write_json(
        &dir.join("rng.json"),
        &RngState {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
    )
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, field: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::format(field, "file ends early"));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn u64_at(bytes: &mut &[u8], field: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(
        take(bytes, 8, field)?.try_into().expect("8 bytes"),
    ))
}

/// Restores a state written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let cfg: CheckpointConfig = read_json(&dir.join("config.json"))?;
    if cfg.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "config.json version",
            format!("expected {CHECKPOINT_VERSION}, found {}", cfg.version),
        ));
    }
    let mut state = TrainState::new(cfg.train, cfg.dims)?;

    let manifest: ParamsManifest = read_json(&dir.join("params.json"))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "params.json version",
            format!("expected {CHECKPOINT_VERSION}, found {}", manifest.version),
        ));
    }
    let bin = read_bytes(&dir.join("params.bin"))?;
    if bin.len() != manifest.total_bytes {
        return Err(Error::format(
            "params.bin",
            format!(
                "{} bytes, manifest declares {}",
                bin.len(),
                manifest.total_bytes
            ),
        ));
    }
    let store = &mut state.model.store;
    if manifest.tensors.len() != store.len() {
        return Err(Error::format(
            "params.json tensors",
            format!(
                "{} tensors, model has {}",
                manifest.tensors.len(),
                store.len()
            ),
        ));
    }
    for entry in &manifest.tensors {
        let id = store.id(&entry.name).ok_or_else(|| {
            Error::format(
                "params.json tensors",
                format!("unknown tensor {}", entry.name),
            )
        })?;
        let value = store.get_mut(id);
        if [value.nrows(), value.ncols()] != entry.shape {
            return Err(Error::format(
                format!("params.json {}", entry.name),
                format!("shape {:?}, model expects {:?}", entry.shape, value.dim()),
            ));
        }
        let end = entry.offset + value.len() * 4;
        let raw = bin.get(entry.offset..end).ok_or_else(|| {
            Error::format(
                format!("params.bin {}", entry.name),
                "tensor extends past the end",
            )
        })?;
        for (x, chunk) in value.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }

    let optim = read_bytes(&dir.join("optim.bin"))?;
    let mut cur = optim.as_slice();
    if take(&mut cur, 4, "optim.bin magic")? != OPTIM_MAGIC {
        return Err(Error::format(
            "optim.bin magic",
            "not an optimizer state file",
        ));
    }
    let version = u32::from_le_bytes(
        take(&mut cur, 4, "optim.bin version")?
            .try_into()
            .expect("4 bytes"),
    );
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "optim.bin version",
            format!("expected {CHECKPOINT_VERSION}, found {version}"),
        ));
    }
    state.step = u64_at(&mut cur, "optim.bin step")? as usize;
    let count = u64_at(&mut cur, "optim.bin tensor count")? as usize;
    if count != state.adam.m.len() {
        return Err(Error::format(
            "optim.bin tensor count",
            format!("{count}, model has {}", state.adam.m.len()),
        ));
    }
    for (m, v) in state.adam.m.iter_mut().zip(state.adam.v.iter_mut()) {
        for x in m.iter_mut().chain(v.iter_mut()) {
            *x = f64::from_le_bytes(
                take(&mut cur, 8, "optim.bin moments")?
                    .try_into()
                    .expect("8 bytes"),
            );
        }
    }
    if !cur.is_empty() {
        return Err(Error::format("optim.bin", "trailing bytes"));
    }

    let rng: RngState = read_json(&dir.join("rng.json"))?;
    let seed: [u8; 32] = rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::format("rng.json seed", "expected 32 bytes"))?;
    let word_pos: u128 = rng
        .word_pos
        .parse()
        .map_err(|_| Error::format("rng.json word_pos", "not an unsigned integer"))?;
    state.rng = ChaCha8Rng::from_seed(seed);
    state.rng.set_stream(rng.stream);
    state.rng.set_word_pos(word_pos);
    Ok(state)
}
