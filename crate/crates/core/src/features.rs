//! Patch-feature maps: the grouping input and the reconstruction target.
//!
//! Three providers produce them: features extracted elsewhere and stored in
//! the `DNSR` binary format, a frozen toy encoder (fixed random patch
//! projection plus a sinusoidal grid code) and a small trainable strided
//! convolution stack.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

pub const FEATURE_MAGIC: &[u8; 4] = b"DNSR";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// `N` patch tokens of dimension `D_feat` on a `rows × cols` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureMap {
    pub tokens: Array2<f64>,
    pub grid: (usize, usize),
    pub source_tag: String,
}

impl PatchFeatureMap {
    pub fn new(
        tokens: Array2<f64>,
        grid: (usize, usize),
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if grid.0 * grid.1 != tokens.nrows() {
            return Err(Error::Argument(format!(
                "grid {}x{} does not hold {} tokens",
                grid.0,
                grid.1,
                tokens.nrows()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature map contains non-finite values".into()));
        }
        Ok(Self {
            tokens,
            grid,
            source_tag: source_tag.into(),
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Serializes a map in the `DNSR` layout: magic, then `u32` version, rows,
/// cols and feature dimension, then token-major little-endian `f32` values.
pub fn encode_features(map: &PatchFeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.tokens.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        map.grid.0 as u32,
        map.grid.1 as u32,
        map.dim() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in map.tokens.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], source_tag: &str) -> Result<PatchFeatureMap> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("{} bytes, need {HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected DNSR, found {:?}", &bytes[..4]),
        ));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != FEATURE_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let (rows, cols, dim) = (word(1) as usize, word(2) as usize, word(3) as usize);
    for (name, v) in [("rows", rows), ("cols", cols), ("feature_dim", dim)] {
        if v == 0 {
            return Err(Error::format(name, "must be positive"));
        }
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| Error::format("header", "shape overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::format(
            "payload",
            format!("expected {} bytes, found {}", count * 4, payload.len()),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let tokens = Array2::from_shape_vec((rows * cols, dim), values).expect("checked length");
    PatchFeatureMap::new(tokens, (rows, cols), source_tag)
}

pub fn write_features(path: &Path, map: &PatchFeatureMap) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_features(map))
        .map_err(|e| Error::io(path, e))
}

/// Reads a feature file written by [`write_features`] or an external extractor.
pub fn load_precomputed_features(path: &Path) -> Result<PatchFeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, "precomputed")
}

/// An image stored as `(height·width) × channels`, raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Array2<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Array2<f64>) -> Result<Self> {
        if pixels.nrows() != height * width {
            return Err(Error::Argument(format!(
                "{}x{} image needs {} pixel rows, got {}",
                height,
                width,
                height * width,
                pixels.nrows()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            pixels: Array2::zeros((height * width, channels)),
        }
    }

    pub fn channels(&self) -> usize {
        self.pixels.ncols()
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor)
        {
            return Err(Error::Config(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Array2::zeros((h * w, self.channels()));
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let mut dst = out.row_mut((y / factor) * w + x / factor);
                dst.scaled_add(norm, &self.pixels.row(y * self.width + x));
            }
        }
        Image::new(h, w, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    Precomputed,
    ToyFrozen,
    TrainableConv,
}

impl std::fmt::Display for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provider::Precomputed => "precomputed",
            Provider::ToyFrozen => "toy-frozen",
            Provider::TrainableConv => "trainable-conv",
        })
    }
}

impl std::str::FromStr for Provider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precomputed" => Ok(Provider::Precomputed),
            "toy-frozen" => Ok(Provider::ToyFrozen),
            "trainable-conv" => Ok(Provider::TrainableConv),
            other => Err(Error::Argument(format!(
                "unknown provider {other}; expected precomputed, toy-frozen or trainable-conv"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub provider: Provider,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible by patch size {p}"
            )));
        }
        Ok((height / p, width / p))
    }
}

/// 2-D sinusoidal code: the first half of the channels encode the row, the
/// second half the column, alternating sine and cosine over geometric frequencies.
pub fn sinusoidal_grid_code(grid: (usize, usize), dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((grid.0 * grid.1, dim), |(n, d)| {
        let (pos, j, span) = if d < half {
            ((n / grid.1) as f64, d, half)
        } else {
            ((n % grid.1) as f64, d - half, dim - half)
        };
        let freq = 1.0 / 10_000f64.powf((j / 2 * 2) as f64 / span.max(1) as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Frozen stand-in for a pre-trained encoder: a seeded Gaussian projection
/// of flattened patches plus a fixed grid code. Its parameters never enter a
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyFrozenEncoder {
    config: EncoderConfig,
    channels: usize,
    projection: Array2<f64>,
    grid_code_scale: f64,
}

impl ToyFrozenEncoder {
    pub fn new(config: EncoderConfig, channels: usize) -> Result<Self> {
        if config.patch_size == 0 || config.feature_dim == 0 || channels == 0 {
            return Err(Error::Config(
                "toy encoder needs positive patch size, dims and channels".into(),
            ));
        }
        let fan_in = config.patch_size * config.patch_size * channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let projection = crate::nn::gaussian(
            &mut rng,
            1.0 / (fan_in as f64).sqrt(),
            (fan_in, config.feature_dim),
        );
        Ok(Self {
            config,
            channels,
            projection,
            grid_code_scale: 1.0,
        })
    }

    /// Scales the additive grid code; 0 disables it.
    pub fn with_grid_code_scale(mut self, scale: f64) -> Self {
        self.grid_code_scale = scale;
        self
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encode(&self, image: &Image) -> Result<PatchFeatureMap> {
        let grid = self.config.grid_for(image.height, image.width)?;
        if image.channels() != self.channels {
            return Err(Error::Config(format!(
                "encoder expects {} channels, image has {}",
                self.channels,
                image.channels()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(image.pixels.clone());
        let patches = tape.patchify(x, (image.height, image.width), self.config.patch_size);
        let mut tokens = tape.value(patches).dot(&self.projection);
        if self.grid_code_scale != 0.0 {
            tokens.scaled_add(
                self.grid_code_scale,
                &sinusoidal_grid_code(grid, self.config.feature_dim),
            );
        }
        PatchFeatureMap::new(tokens, grid, "toy-frozen")
    }

    /// Byte image of everything the encoder computes with.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in self
            .projection
            .iter()
            .chain(std::iter::once(&self.grid_code_scale))
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Strided convolution stack with one output token per `patch_size` cell.
///
/// With an even patch size the first layer has kernel and stride `p/2` and
/// the second kernel and stride 2; odd patch sizes use a single layer.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    config: EncoderConfig,
    stages: Vec<(usize, Linear)>,
}

impl ConvEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: EncoderConfig,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p = config.patch_size;
        if p == 0 || channels == 0 || config.feature_dim == 0 {
            return Err(Error::Config(
                "conv encoder needs positive patch size and dims".into(),
            ));
        }
        let stages = if p.is_multiple_of(2) && p >= 2 {
            let k1 = p / 2;
            vec![
                (
                    k1,
                    Linear::new(
                        store,
                        "encoder.conv0",
                        k1 * k1 * channels,
                        hidden,
                        true,
                        rng,
                    ),
                ),
                (
                    2,
                    Linear::new(
                        store,
                        "encoder.conv1",
                        4 * hidden,
                        config.feature_dim,
                        true,
                        rng,
                    ),
                ),
            ]
        } else {
            vec![(
                p,
                Linear::new(
                    store,
                    "encoder.conv0",
                    p * p * channels,
                    config.feature_dim,
                    true,
                    rng,
                ),
            )]
        };
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Records the forward pass on `tape` (parameters must already be bound).
    pub fn forward(&self, tape: &mut Tape, image: &Image) -> Result<(Var, (usize, usize))> {
        let grid = self.config.grid_for(image.height, image.width)?;
        let mut x = tape.constant(image.pixels.clone());
        let (mut h, mut w) = (image.height, image.width);
        let last = self.stages.len() - 1;
        for (i, (k, layer)) in self.stages.iter().enumerate() {
            let patches = tape.patchify(x, (h, w), *k);
            x = layer.forward(tape, patches);
            if i < last {
                x = tape.relu(x);
            }
            h /= k;
            w /= k;
        }
        Ok((x, grid))
    }

    pub fn encode(&self, store: &ParamStore, image: &Image) -> Result<PatchFeatureMap> {
        let mut tape = Tape::new();
        store.bind(&mut tape);
        let (out, grid) = self.forward(&mut tape, image)?;
        PatchFeatureMap::new(tape.value(out).clone(), grid, "trainable-conv")
    }
}

/// Catmull-Rom cubic weights (`a = -0.5`) for fractional offset `t`.
fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.5;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Per-axis sampling taps: for each output index, four clamped source
/// indices and their weights (half-pixel centers).
fn cubic_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = (i as f64 + 0.5) * scale - 0.5;
            let base = x.floor();
            let w = cubic_weights(x - base);
            let idx = std::array::from_fn(|j| {
                (base as isize - 1 + j as isize).clamp(0, src as isize - 1) as usize
            });
            (idx, w)
        })
        .collect()
}

/// Bicubic resampling of the token grid by `factor ∈ (0, 1]`, channel by channel.
pub fn rescale_target_map(features: &PatchFeatureMap, factor: f64) -> Result<PatchFeatureMap> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Argument(format!(
            "scale factor {factor} outside (0, 1]"
        )));
    }
    if factor == 1.0 {
        return Ok(features.clone());
    }
    let (rows, cols) = features.grid;
    let (new_rows, new_cols) = (
        (rows as f64 * factor).round() as usize,
        (cols as f64 * factor).round() as usize,
    );
    if new_rows == 0 || new_cols == 0 {
        return Err(Error::Argument(format!(
            "factor {factor} shrinks the {rows}x{cols} grid to nothing"
        )));
    }
    let row_taps = cubic_taps(rows, new_rows);
    let col_taps = cubic_taps(cols, new_cols);
    let d = features.dim();
    // Separable: columns first, then rows.
    let mut partial = Array2::zeros((rows * new_cols, d));
    for r in 0..rows {
        for (c, (idx, w)) in col_taps.iter().enumerate() {
            let mut dst = partial.row_mut(r * new_cols + c);
            for j in 0..4 {
                dst.scaled_add(w[j], &features.tokens.row(r * cols + idx[j]));
            }
        }
    }
    let mut out = Array2::zeros((new_rows * new_cols, d));
    for (r, (idx, w)) in row_taps.iter().enumerate() {
        for c in 0..new_cols {
            let mut dst = out.row_mut(r * new_cols + c);
            for j in 0..4 {
                dst.scaled_add(w[j], &partial.row(idx[j] * new_cols + c));
            }
        }
    }
    PatchFeatureMap::new(out, (new_rows, new_cols), features.source_tag.clone())
}

/// Flattened patch of `image` at grid cell `(py, px)`, in `(dy, dx, channel)` order.
pub fn flatten_patch(image: &Image, patch: usize, py: usize, px: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(patch * patch * image.channels());
    for dy in 0..patch {
        for dx in 0..patch {
            let row = (py * patch + dy) * image.width + px * patch + dx;
            out.extend(image.pixels.slice(s![row, ..]).iter().copied());
        }
    }
    out
}
