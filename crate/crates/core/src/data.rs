//! Dataset layout on disk and a synthetic generator of rectangle scenes whose
//! patch features are noisy class prototypes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::features::{load_precomputed_features, write_features, Image, PatchFeatureMap};
use crate::masks::{read_label_png, write_label_png, LabelMap};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n_samples: usize,
    pub feature_dim: usize,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub classes: BTreeMap<u32, String>,
    pub samples: Vec<SampleEntry>,
    /// Generator settings when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthConfig>,
}

/// One scene: features, ground truth and (optionally) the rendered image.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub id: String,
    pub split: Split,
    pub image: Option<Image>,
    pub features: PatchFeatureMap,
    /// Instance ids at image resolution, 0 = background.
    pub instances: LabelMap,
    /// Instance id → class id.
    pub classes: BTreeMap<u32, u32>,
}

impl SceneSample {
    /// Class ids at image resolution (background stays 0).
    pub fn class_map(&self) -> LabelMap {
        LabelMap::new(
            self.instances
                .labels
                .mapv(|i| if i == 0 { 0 } else { self.classes[&i] }),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub feature_dim: usize,
    /// Foreground classes; class 0 is the background.
    pub n_classes: usize,
    pub objects: (usize, usize),
    /// Side length range of the rectangles, in pixels.
    pub object_size: (usize, usize),
    pub noise_std: f64,
    pub n_samples: usize,
    /// Trailing samples tagged as the evaluation split.
    pub n_eval: usize,
    pub seed: u64,
    pub write_images: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            patch_size: 8,
            feature_dim: 32,
            n_classes: 5,
            objects: (2, 5),
            object_size: (12, 28),
            noise_std: 0.05,
            n_samples: 2200,
            n_eval: 200,
            seed: 0,
            write_images: true,
        }
    }
}

impl SynthConfig {
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch_size,
            self.image_size.1 / self.patch_size,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.patch_size == 0
            || h == 0
            || w == 0
            || h % self.patch_size != 0
            || w % self.patch_size != 0
        {
            return Err(Error::Config(format!(
                "image size {h}x{w} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if self.objects.1 < self.objects.0 {
            return Err(Error::Config(format!(
                "object count range {:?} is empty",
                self.objects
            )));
        }
        if self.objects.1 > self.n_classes {
            return Err(Error::Config(format!(
                "up to {} objects need as many classes, got {}",
                self.objects.1, self.n_classes
            )));
        }
        let (lo, hi) = self.object_size;
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!(
                "object size range {:?} is invalid",
                self.object_size
            )));
        }
        if hi > h.min(w) {
            return Err(Error::Config(format!(
                "objects up to {hi} px do not fit a {h}x{w} image"
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if self.n_eval > self.n_samples {
            return Err(Error::Config("more eval samples than samples".into()));
        }
        Ok(())
    }
}

/// Patch-level label by majority occupancy; ties prefer foreground over
/// background, then the lower instance id.
pub fn patch_labels(instances: &LabelMap, patch: usize) -> Result<LabelMap> {
    let (h, w) = instances.labels.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "{h}x{w} labels are not divisible by patch {patch}"
        )));
    }
    let labels = Array2::from_shape_fn((h / patch, w / patch), |(py, px)| {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in instances.labels.slice(s![
            py * patch..(py + 1) * patch,
            px * patch..(px + 1) * patch
        ]) {
            *counts.entry(l).or_default() += 1;
        }
        let best = *counts.values().max().expect("nonempty patch");
        let mut tied = counts
            .into_iter()
            .filter(|&(_, c)| c == best)
            .map(|(l, _)| l);
        let first = tied.next().expect("a maximum exists");
        if first == 0 {
            tied.next().unwrap_or(0)
        } else {
            first
        }
    });
    Ok(LabelMap::new(labels))
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit-norm prototype feature per class, background (class 0) included.
pub fn class_prototypes(cfg: &SynthConfig) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut out = Array2::zeros((cfg.n_classes + 1, cfg.feature_dim));
    for c in 0..=cfg.n_classes {
        out.row_mut(c).assign(&ndarray::Array1::from(unit_vector(
            &mut rng,
            cfg.feature_dim,
        )));
    }
    out
}

/// Zero-mean oriented grating per class, with a class color direction.
struct Texture {
    dir: (f64, f64),
    period: f64,
    color: [f64; 3],
}

fn class_textures(cfg: &SynthConfig) -> Vec<Texture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    (0..=cfg.n_classes)
        .map(|c| {
            let angle = std::f64::consts::PI * c as f64 / (cfg.n_classes + 1) as f64;
            let period = 4.0 + (c % 3) as f64;
            let color = unit_vector(&mut rng, 3);
            Texture {
                dir: (angle.cos(), angle.sin()),
                period,
                color: [color[0], color[1], color[2]],
            }
        })
        .collect()
}

/// Renders a scene; every class has the same mean color (zero), so classes
/// differ only in texture.
fn render(
    cfg: &SynthConfig,
    textures: &[Texture],
    instances: &LabelMap,
    classes: &BTreeMap<u32, u32>,
) -> Image {
    let (h, w) = cfg.image_size;
    let mut pixels = Array2::zeros((h * w, 3));
    for y in 0..h {
        for x in 0..w {
            let l = instances.labels[[y, x]];
            let t = &textures[if l == 0 { 0 } else { classes[&l] as usize }];
            let phase = (x as f64 * t.dir.0 + y as f64 * t.dir.1) / t.period;
            let a = 0.8 * (2.0 * std::f64::consts::PI * phase).sin();
            for ch in 0..3 {
                pixels[[y * w + x, ch]] = a * t.color[ch];
            }
        }
    }
    Image::new(h, w, pixels).expect("pixel count matches")
}

/// Values in `[-1, 1]` quantized to 8 bits per channel.
fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn write_image_png(path: &Path, image: &Image) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Data(format!(
            "expected an RGB image, got {} channels",
            image.channels()
        )));
    }
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(image.width as u32, image.height as u32, |x, y| {
            let row = image.pixels.row(y as usize * image.width + x as usize);
            Rgb([quantize(row[0]), quantize(row[1]), quantize(row[2])])
        });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = Array2::from_shape_fn((h * w, 3), |(p, c)| {
        dequantize(img.get_pixel((p % w) as u32, (p / w) as u32)[c])
    });
    Image::new(h, w, pixels)
}

/// Generates one scene from the generator rng.
pub fn generate_scene<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    prototypes: &Array2<f64>,
    rng: &mut R,
) -> Result<(LabelMap, BTreeMap<u32, u32>, PatchFeatureMap)> {
    let (h, w) = cfg.image_size;
    let count = rng.random_range(cfg.objects.0..=cfg.objects.1);
    let picked = sample(rng, cfg.n_classes, count);
    let mut painted = Array2::<u32>::zeros((h, w));
    for i in 0..count {
        let oh = rng.random_range(cfg.object_size.0..=cfg.object_size.1);
        let ow = rng.random_range(cfg.object_size.0..=cfg.object_size.1);
        let y = rng.random_range(0..=h - oh);
        let x = rng.random_range(0..=w - ow);
        painted
            .slice_mut(s![y..y + oh, x..x + ow])
            .fill(i as u32 + 1);
    }
    // Renumber visible instances consecutively in painting order.
    let mut visible: Vec<u32> = painted.iter().copied().filter(|&l| l > 0).collect();
    visible.sort_unstable();
    visible.dedup();
    let remap: BTreeMap<u32, u32> = visible
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i as u32 + 1))
        .collect();
    let instances = LabelMap::new(painted.mapv(|l| if l == 0 { 0 } else { remap[&l] }));
    let classes: BTreeMap<u32, u32> = remap
        .iter()
        .map(|(&orig, &new)| (new, picked.index(orig as usize - 1) as u32 + 1))
        .collect();

    let patches = patch_labels(&instances, cfg.patch_size)?;
    let grid = patches.labels.dim();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut tokens = Array2::zeros((grid.0 * grid.1, cfg.feature_dim));
    for (n, &l) in patches.labels.iter().enumerate() {
        let class = if l == 0 { 0 } else { classes[&l] as usize };
        for (d, v) in tokens.row_mut(n).iter_mut().enumerate() {
            let eps = if cfg.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            *v = prototypes[[class, d]] + eps;
        }
    }
    let features = PatchFeatureMap::new(tokens, grid, "synthetic")?;
    Ok((instances, classes, features))
}

pub fn sample_id(i: usize) -> String {
    format!("{i:06}")
}

/// Writes a complete synthetic dataset into `out` (created if missing).
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let prototypes = class_prototypes(cfg);
    let textures = class_textures(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples_dir = out.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut entries = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let (instances, classes, features) = generate_scene(cfg, &prototypes, &mut rng)?;
        let id = sample_id(i);
        let dir = samples_dir.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_features(&dir.join("features.bin"), &features)?;
        write_label_png(&dir.join("instances.png"), &instances)?;
        let class_json: BTreeMap<String, u32> =
            classes.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        write_json(&dir.join("classes.json"), &class_json)?;
        if cfg.write_images {
            write_image_png(
                &dir.join("image.png"),
                &render(cfg, &textures, &instances, &classes),
            )?;
        }
        let split = if i >= cfg.n_samples - cfg.n_eval {
            Split::Eval
        } else {
            Split::Train
        };
        entries.push(SampleEntry { id, split });
    }
    let mut class_names = BTreeMap::from([(0, "background".to_string())]);
    for c in 1..=cfg.n_classes as u32 {
        class_names.insert(c, format!("class-{c}"));
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        n_samples: cfg.n_samples,
        feature_dim: cfg.feature_dim,
        grid: cfg.grid(),
        image_size: cfg.image_size,
        patch_size: cfg.patch_size,
        classes: class_names,
        samples: entries,
        generator: Some(cfg.clone()),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A dataset directory; samples are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

fn sample_error(id: &str, field: &str, reason: impl std::fmt::Display) -> Error {
    Error::Data(format!("sample {id}: {field}: {reason}"))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    /// Loads and validates the sample at manifest position `index`.
    pub fn sample(&self, index: usize) -> Result<SceneSample> {
        let entry = &self.manifest.samples[index];
        let id = entry.id.as_str();
        let dir = self.root.join("samples").join(id);
        let m = &self.manifest;

        let features = load_precomputed_features(&dir.join("features.bin"))
            .map_err(|e| sample_error(id, "features", e))?;
        if features.grid != m.grid || features.dim() != m.feature_dim {
            return Err(sample_error(
                id,
                "features",
                format!(
                    "grid {:?} × {} does not match manifest {:?} × {}",
                    features.grid,
                    features.dim(),
                    m.grid,
                    m.feature_dim
                ),
            ));
        }
        let instances = read_label_png(&dir.join("instances.png"))
            .map_err(|e| sample_error(id, "instances", e))?;
        if instances.labels.dim() != m.image_size {
            return Err(sample_error(
                id,
                "instances",
                format!(
                    "size {:?} does not match manifest {:?}",
                    instances.labels.dim(),
                    m.image_size
                ),
            ));
        }
        let raw: BTreeMap<String, u32> =
            read_json(&dir.join("classes.json")).map_err(|e| sample_error(id, "classes", e))?;
        let mut classes = BTreeMap::new();
        for (k, v) in raw {
            let key: u32 = k.parse().map_err(|_| {
                sample_error(id, "classes", format!("key {k} is not an instance id"))
            })?;
            if key == 0 || !m.classes.contains_key(&v) {
                return Err(sample_error(
                    id,
                    "classes",
                    format!("invalid entry {k} -> {v}"),
                ));
            }
            classes.insert(key, v);
        }
        let present: Vec<u32> = instances
            .distinct()
            .into_iter()
            .filter(|&l| l != 0)
            .collect();
        if present != classes.keys().copied().collect::<Vec<_>>() {
            return Err(sample_error(
                id,
                "classes",
                format!("instance ids {present:?} differ from class table keys"),
            ));
        }
        let image_path = dir.join("image.png");
        let image = if image_path.exists() {
            let img = read_image_png(&image_path).map_err(|e| sample_error(id, "image", e))?;
            if (img.height, img.width) != m.image_size {
                return Err(sample_error(
                    id,
                    "image",
                    format!(
                        "size {}x{} does not match manifest {:?}",
                        img.height, img.width, m.image_size
                    ),
                ));
            }
            Some(img)
        } else {
            None
        };
        Ok(SceneSample {
            id: id.to_string(),
            split: entry.split,
            image,
            features,
            instances,
            classes,
        })
    }

    /// Samples in manifest order.
    pub fn iter(&self) -> impl Iterator<Item = Result<SceneSample>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    /// All samples of one split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<SceneSample>> {
        (0..self.len())
            .filter(|&i| self.manifest.samples[i].split == split)
            .map(|i| self.sample(i))
            .collect()
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&path.join("manifest.json"))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            "manifest version",
            format!("expected {MANIFEST_VERSION}, found {}", manifest.version),
        ));
    }
    if manifest.n_samples != manifest.samples.len() {
        return Err(Error::format(
            "manifest n_samples",
            format!(
                "declares {} but lists {} samples",
                manifest.n_samples,
                manifest.samples.len()
            ),
        ));
    }
    Ok(Dataset {
        root: path.to_path_buf(),
        manifest,
    })
}
