//! Turning soft slot masks into evaluation-ready label maps, boxes and baselines.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::decoding::SoftMaskStack;
use crate::error::{Error, Result};

/// Integer segmentation map, `height × width`.
///
/// Ground truth uses 0 for background and positive instance ids; predictions
/// use slot or cluster indices with no background meaning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Array2<u32>,
}

impl LabelMap {
    pub fn new(labels: Array2<u32>) -> Self {
        Self { labels }
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Distinct labels in ascending order.
    pub fn distinct(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.labels.iter().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn binary_mask(&self, label: u32) -> Array2<bool> {
        self.labels.mapv(|l| l == label)
    }
}

/// Half-open pixel box `[xmin, xmax) × [ymin, ymax)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub xmin: usize,
    pub ymin: usize,
    pub xmax: usize,
    pub ymax: usize,
}

impl BoundingBox {
    pub fn new(xmin: usize, ymin: usize, xmax: usize, ymax: usize) -> Result<Self> {
        if xmax <= xmin || ymax <= ymin {
            return Err(Error::Argument(format!(
                "empty box ({xmin}, {ymin}, {xmax}, {ymax})"
            )));
        }
        Ok(Self {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    pub fn area(&self) -> usize {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    /// Alpha masks of the MLP or pixel decoder.
    MlpAlpha,
    /// Cross-attention over slots in the last Transformer decoder block.
    DecoderAttention,
    /// Final-iteration Slot Attention weights.
    SlotAttention,
}

impl std::fmt::Display for MaskSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskSource::MlpAlpha => "mlp-alpha",
            MaskSource::DecoderAttention => "decoder-attention",
            MaskSource::SlotAttention => "slot-attention",
        })
    }
}

impl std::str::FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-alpha" => Ok(MaskSource::MlpAlpha),
            "decoder-attention" => Ok(MaskSource::DecoderAttention),
            "slot-attention" => Ok(MaskSource::SlotAttention),
            other => Err(Error::Argument(format!(
                "unknown mask source {other}; expected mlp-alpha, decoder-attention or slot-attention"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Mlp,
    Transformer,
    Pixel,
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderKind::Mlp => "mlp",
            DecoderKind::Transformer => "transformer",
            DecoderKind::Pixel => "pixel",
        })
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(DecoderKind::Mlp),
            "transformer" => Ok(DecoderKind::Transformer),
            "pixel" => Ok(DecoderKind::Pixel),
            other => Err(Error::Argument(format!(
                "unknown decoder {other}; expected mlp, transformer or pixel"
            ))),
        }
    }
}

impl DecoderKind {
    pub fn valid_sources(self) -> &'static [MaskSource] {
        match self {
            DecoderKind::Mlp | DecoderKind::Pixel => {
                &[MaskSource::MlpAlpha, MaskSource::SlotAttention]
            }
            DecoderKind::Transformer => &[MaskSource::DecoderAttention, MaskSource::SlotAttention],
        }
    }

    pub fn default_source(self) -> MaskSource {
        self.valid_sources()[0]
    }
}

/// Masks produced by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMasks {
    pub decoder: DecoderKind,
    /// Alpha masks (MLP/pixel) or last-block cross-attention (Transformer).
    pub decoder_masks: SoftMaskStack,
    /// Slot Attention weights reshaped to the feature grid.
    pub slot_attention: SoftMaskStack,
}

pub fn extract_masks(output: &ModelMasks, source: MaskSource) -> Result<SoftMaskStack> {
    let valid = output.decoder.valid_sources();
    if !valid.contains(&source) {
        let names: Vec<String> = valid.iter().map(ToString::to_string).collect();
        return Err(Error::Config(format!(
            "mask source {source} is unavailable for the {} decoder; valid sources: {}",
            output.decoder,
            names.join(", ")
        )));
    }
    Ok(match source {
        MaskSource::SlotAttention => output.slot_attention.clone(),
        MaskSource::MlpAlpha | MaskSource::DecoderAttention => output.decoder_masks.clone(),
    })
}

/// Source index pairs and weights for half-pixel-centered linear sampling.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect()
}

/// Bilinear resize of every slot mask to `height × width`.
pub fn resize_masks(masks: &SoftMaskStack, height: usize, width: usize) -> Result<SoftMaskStack> {
    if height < 1 || width < 1 {
        return Err(Error::Argument(format!(
            "cannot resize to {height}x{width}"
        )));
    }
    let (k, rows, cols) = masks.masks.dim();
    if (rows, cols) == (height, width) {
        return Ok(masks.clone());
    }
    let ty = linear_taps(rows, height);
    let tx = linear_taps(cols, width);
    let m = &masks.masks;
    let out = Array3::from_shape_fn((k, height, width), |(s, y, x)| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let top = m[[s, y0, x0]] * (1.0 - fx) + m[[s, y0, x1]] * fx;
        let bottom = m[[s, y1, x0]] * (1.0 - fx) + m[[s, y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    });
    Ok(SoftMaskStack { masks: out })
}

/// Per-pixel argmax over slots; ties go to the lowest slot index.
pub fn hard_masks(masks: &SoftMaskStack) -> LabelMap {
    let (k, rows, cols) = masks.masks.dim();
    let labels = Array2::from_shape_fn((rows, cols), |(y, x)| {
        let mut best = 0;
        for s in 1..k {
            if masks.masks[[s, y, x]] > masks.masks[[best, y, x]] {
                best = s;
            }
        }
        best as u32
    });
    LabelMap { labels }
}

/// Tightest box around every label present in `labels`, ordered by label.
pub fn boxes_from_masks(labels: &LabelMap) -> Vec<(u32, BoundingBox)> {
    let mut extents: std::collections::BTreeMap<u32, (usize, usize, usize, usize)> =
        Default::default();
    for ((y, x), &l) in labels.labels.indexed_iter() {
        let e = extents.entry(l).or_insert((x, y, x + 1, y + 1));
        e.0 = e.0.min(x);
        e.1 = e.1.min(y);
        e.2 = e.2.max(x + 1);
        e.3 = e.3.max(y + 1);
    }
    extents
        .into_iter()
        .map(|(l, (x0, y0, x1, y1))| {
            (
                l,
                BoundingBox {
                    xmin: x0,
                    ymin: y0,
                    xmax: x1,
                    ymax: y1,
                },
            )
        })
        .collect()
}

/// Column count of the block-pattern baseline for `num_masks` masks.
pub fn block_columns(num_masks: usize) -> usize {
    match num_masks {
        0..=8 => 2,
        9..=15 => 3,
        _ => 4,
    }
}

/// Splits `total` into `parts` contiguous spans whose lengths differ by at
/// most one, longer spans first.
fn even_spans(total: usize, parts: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (total / parts, total % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let span = (start, start + len);
            start += len;
            span
        })
        .collect()
}

/// Geometric partition of an image into `num_masks` rectangles: columns
/// first, then blocks stacked within each column. Leftmost columns take the
/// extra blocks. Labels run column by column, top to bottom.
pub fn block_pattern(num_masks: usize, height: usize, width: usize) -> Result<LabelMap> {
    if num_masks < 1 {
        return Err(Error::Argument(
            "block pattern needs at least one mask".into(),
        ));
    }
    let columns = block_columns(num_masks).min(num_masks);
    let per_column = even_spans(num_masks, columns);
    if width < columns || per_column.iter().any(|&(a, b)| b - a > height) {
        return Err(Error::Argument(format!(
            "{height}x{width} image is too small for {num_masks} blocks"
        )));
    }
    let mut labels = Array2::zeros((height, width));
    let mut next = 0u32;
    for (&(x0, x1), &(b0, b1)) in even_spans(width, columns).iter().zip(&per_column) {
        for (y0, y1) in even_spans(height, b1 - b0) {
            labels.slice_mut(ndarray::s![y0..y1, x0..x1]).fill(next);
            next += 1;
        }
    }
    Ok(LabelMap { labels })
}

/// Writes labels as a 16-bit single-channel PNG.
pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let max = labels.max_label();
    if max > u16::MAX as u32 {
        return Err(Error::Data(format!("label {max} does not fit in 16 bits")));
    }
    let (h, w) = labels.labels.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([labels.labels[[y as usize, x as usize]] as u16])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.into_luma16();
    let (w, h) = gray.dimensions();
    let labels = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] as u32
    });
    Ok(LabelMap { labels })
}

/// Color used for label `l` in overlay exports.
pub fn label_color(l: u32) -> [u8; 3] {
    const TABLE: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [170, 110, 40],
    ];
    TABLE[l as usize % TABLE.len()]
}

/// Color-coded rendering of a label map.
pub fn write_overlay_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.labels.dim();
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(label_color(labels.labels[[y as usize, x as usize]]))
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
