//! Episodic N-way k-shot task construction.
//!
//! Every source owns two disjoint class pools. Class ids are global: the
//! train pool is `0..n_train`, the test pool `n_train..n_train + n_test`.
//! Each sampled example carries its split and source class so split hygiene
//! can be checked after the fact.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Batch, Targets};

/// Side length of loaded and generated images.
pub const IMAGE_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f32),
}

/// Provenance of one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Origin {
    pub split: Split,
    pub class: usize,
    pub instance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f32>,
    pub target: Target,
    pub origin: Origin,
}

/// One episode. Support holds `way * shot` examples and query
/// `way * query_per_class`, grouped by episode label.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub input_shape: Vec<usize>,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    /// `classes[label]` is the source class behind episode label `label`.
    pub classes: Vec<usize>,
}

impl Task {
    pub fn support_batch(&self) -> Batch {
        to_batch(&self.support, &self.input_shape)
    }

    pub fn query_batch(&self) -> Batch {
        to_batch(&self.query, &self.input_shape)
    }

    /// Hex digest of every input value, support then query.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for ex in self.support.iter().chain(&self.query) {
            for v in &ex.input {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

fn to_batch(examples: &[Example], input_shape: &[usize]) -> Batch {
    let mut shape = vec![examples.len()];
    shape.extend_from_slice(input_shape);
    let inputs: Vec<f32> = examples.iter().flat_map(|e| e.input.iter().copied()).collect();
    let targets = match examples.first().map(|e| e.target) {
        Some(Target::Value(_)) => Targets::Values(
            examples
                .iter()
                .map(|e| match e.target {
                    Target::Value(v) => v,
                    Target::Class(c) => c as f32,
                })
                .collect(),
        ),
        _ => Targets::Classes(
            examples
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => c,
                    Target::Value(v) => v as usize,
                })
                .collect(),
        ),
    };
    Batch {
        inputs: Tensor::new(shape, inputs).expect("examples share the task input shape"),
        targets,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeneratorKind {
    Blobs,
    Glyphs,
    Sinusoid,
    ImageDir,
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorKind::Blobs => "blobs",
            GeneratorKind::Glyphs => "glyphs",
            GeneratorKind::Sinusoid => "sinusoid",
            GeneratorKind::ImageDir => "image-dir",
        })
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "blobs" => GeneratorKind::Blobs,
            "glyphs" => GeneratorKind::Glyphs,
            "sinusoid" => GeneratorKind::Sinusoid,
            "image-dir" => GeneratorKind::ImageDir,
            other => return Err(Error::Config(format!("unknown task generator `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
struct ImageClass {
    name: String,
    images: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
enum Pool {
    Blobs {
        noise: f32,
        prototypes: Vec<Vec<f32>>,
    },
    Glyphs {
        max_shift: usize,
        flip: f32,
        stencils: Vec<[bool; 25]>,
    },
    Sinusoid,
    Images {
        classes: Vec<ImageClass>,
    },
}

/// Immutable task generator with a disjoint train/test class split.
#[derive(Debug, Clone)]
pub struct TaskSource {
    pool: Pool,
    input_shape: Vec<usize>,
    train_classes: usize,
    test_classes: usize,
    warnings: Vec<String>,
}

impl TaskSource {
    /// Gaussian blobs around per-class `N(0, I)` prototypes in `dim` dimensions.
    pub fn blobs(dim: usize, noise: f32, train_classes: usize, test_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = (0..train_classes + test_classes)
            .map(|_| (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
            .collect();
        Self {
            pool: Pool::Blobs { noise, prototypes },
            input_shape: vec![dim],
            train_classes,
            test_classes,
            warnings: Vec::new(),
        }
    }

    /// Random 5x5 binary stencils drawn at 2x scale into a 20x20 canvas,
    /// shifted by up to `max_shift` pixels and corrupted by pixel flips.
    pub fn glyphs(max_shift: usize, flip: f32, train_classes: usize, test_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stencils = (0..train_classes + test_classes)
            .map(|_| {
                let mut s = [false; 25];
                s.iter_mut().for_each(|b| *b = rng.random_bool(0.5));
                s
            })
            .collect();
        Self {
            pool: Pool::Glyphs {
                max_shift,
                flip,
                stencils,
            },
            input_shape: vec![1, IMAGE_SIZE, IMAGE_SIZE],
            train_classes,
            test_classes,
            warnings: Vec::new(),
        }
    }

    /// Sine regression, `y = A sin(x + phase)` with `A ~ U[0.1, 5]`,
    /// `phase ~ U[0, pi]`, `x ~ U[-5, 5]`. Both splits share the distribution.
    pub fn sinusoid() -> Self {
        Self {
            pool: Pool::Sinusoid,
            input_shape: vec![1],
            train_classes: 1,
            test_classes: 1,
            warnings: Vec::new(),
        }
    }

    pub fn kind(&self) -> GeneratorKind {
        match self.pool {
            Pool::Blobs { .. } => GeneratorKind::Blobs,
            Pool::Glyphs { .. } => GeneratorKind::Glyphs,
            Pool::Sinusoid => GeneratorKind::Sinusoid,
            Pool::Images { .. } => GeneratorKind::ImageDir,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.pool, Pool::Sinusoid)
    }

    /// Network outputs needed for `way`-way episodes.
    pub fn outputs(&self, way: usize) -> usize {
        if self.is_regression() {
            1
        } else {
            way
        }
    }

    /// Global class ids of a split's pool.
    pub fn pool(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_classes,
            Split::Test => self.train_classes..self.train_classes + self.test_classes,
        }
    }

    pub fn class_name(&self, class: usize) -> String {
        match &self.pool {
            Pool::Images { classes } => classes[class].name.clone(),
            _ => format!("class{class}"),
        }
    }

    /// Warnings raised while building the source (skipped image classes).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn sample_task<R: Rng + ?Sized>(
        &self,
        split: Split,
        way: usize,
        shot: usize,
        query: usize,
        rng: &mut R,
    ) -> Result<Task> {
        if way == 0 || shot == 0 || query == 0 {
            return Err(Error::Config(format!(
                "way, shot and query must be positive (got {way}, {shot}, {query})"
            )));
        }
        if self.is_regression() {
            if way != 1 {
                return Err(Error::Config(format!("sinusoid tasks are 1-way, got {way}")));
            }
            return Ok(self.sample_sinusoid(split, shot, query, rng));
        }
        let pool = self.pool(split);
        if way > pool.len() {
            return Err(Error::Config(format!(
                "{way}-way task needs {way} classes but the {split} pool has {}",
                pool.len()
            )));
        }
        // index::sample yields distinct indices in random order, which doubles
        // as the class -> episode-label permutation.
        let classes: Vec<usize> = index::sample(rng, pool.len(), way)
            .into_iter()
            .map(|i| pool.start + i)
            .collect();
        let mut support = Vec::with_capacity(way * shot);
        let mut queries = Vec::with_capacity(way * query);
        for (label, &class) in classes.iter().enumerate() {
            let mut drawn = self.draw(class, shot + query, rng)?;
            let rest = drawn.split_off(shot);
            let tag = |(instance, input): (usize, Vec<f32>)| Example {
                input,
                target: Target::Class(label),
                origin: Origin { split, class, instance },
            };
            support.extend(drawn.into_iter().map(tag));
            queries.extend(rest.into_iter().map(tag));
        }
        Ok(Task {
            way,
            shot,
            query_per_class: query,
            input_shape: self.input_shape.clone(),
            support,
            query: queries,
            classes,
        })
    }

    /// `count` distinct instances of one class as (instance id, input).
    fn draw<R: Rng + ?Sized>(&self, class: usize, count: usize, rng: &mut R) -> Result<Vec<(usize, Vec<f32>)>> {
        match &self.pool {
            Pool::Blobs { noise, prototypes } => Ok((0..count)
                .map(|i| {
                    let x = prototypes[class]
                        .iter()
                        .map(|&m| m + noise * rng.sample::<f32, _>(StandardNormal))
                        .collect();
                    (i, x)
                })
                .collect()),
            Pool::Glyphs {
                max_shift,
                flip,
                stencils,
            } => Ok((0..count)
                .map(|i| (i, render_glyph(&stencils[class], *max_shift, *flip, rng)))
                .collect()),
            Pool::Images { classes } => {
                let images = &classes[class].images;
                if images.len() < count {
                    return Err(Error::Config(format!(
                        "class `{}` has {} images, {count} needed",
                        classes[class].name,
                        images.len()
                    )));
                }
                Ok(index::sample(rng, images.len(), count)
                    .into_iter()
                    .map(|i| (i, images[i].clone()))
                    .collect())
            }
            Pool::Sinusoid => unreachable!("regression sources do not have classes"),
        }
    }

    fn sample_sinusoid<R: Rng + ?Sized>(&self, split: Split, shot: usize, query: usize, rng: &mut R) -> Task {
        let amplitude: f32 = rng.random_range(0.1..=5.0);
        let phase: f32 = rng.random_range(0.0..=std::f32::consts::PI);
        let mut points: Vec<Example> = (0..shot + query)
            .map(|instance| {
                let x: f32 = rng.random_range(-5.0..=5.0);
                Example {
                    input: vec![x],
                    target: Target::Value(amplitude * (x + phase).sin()),
                    origin: Origin {
                        split,
                        class: self.pool(split).start,
                        instance,
                    },
                }
            })
            .collect();
        let query_points = points.split_off(shot);
        Task {
            way: 1,
            shot,
            query_per_class: query,
            input_shape: self.input_shape.clone(),
            support: points,
            query: query_points,
            classes: vec![self.pool(split).start],
        }
    }
}

fn render_glyph<R: Rng + ?Sized>(stencil: &[bool; 25], max_shift: usize, flip: f32, rng: &mut R) -> Vec<f32> {
    let n = IMAGE_SIZE;
    let scale = n / 10;
    let base = (n - 5 * scale) as isize / 2;
    let shift = max_shift as i64;
    let dy = if shift > 0 {
        rng.random_range(-shift..=shift) as isize
    } else {
        0
    };
    let dx = if shift > 0 {
        rng.random_range(-shift..=shift) as isize
    } else {
        0
    };
    let mut img = vec![0.0f32; n * n];
    for (cell, _) in stencil.iter().enumerate().filter(|(_, &on)| on) {
        let (r, c) = ((cell / 5) as isize, (cell % 5) as isize);
        for sy in 0..scale as isize {
            for sx in 0..scale as isize {
                let y = base + dy + r * scale as isize + sy;
                let x = base + dx + c * scale as isize + sx;
                if (0..n as isize).contains(&y) && (0..n as isize).contains(&x) {
                    img[y as usize * n + x as usize] = 1.0;
                }
            }
        }
    }
    if flip > 0.0 {
        for v in img.iter_mut() {
            if rng.random_bool(flip as f64) {
                *v = 1.0 - *v;
            }
        }
    }
    img
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "pgm" | "pbm" | "ppm" | "pnm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn load_image(path: &Path) -> Result<image::GrayImage> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?
        .to_luma8();
    let size = IMAGE_SIZE as u32;
    Ok(imageops::resize(&img, size, size, FilterType::Nearest))
}

fn to_unit(img: &image::GrayImage) -> Vec<f32> {
    img.pixels().map(|p| p.0[0] as f32 / 255.0).collect()
}

fn load_split(
    root: &Path,
    split: Split,
    min_images: usize,
    rotations: bool,
    warnings: &mut Vec<String>,
) -> Result<Vec<ImageClass>> {
    let dir = root.join(split.to_string());
    let mut classes = Vec::new();
    for class_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<PathBuf> = sorted_entries(&class_dir)?
            .into_iter()
            .filter(|p| is_image_file(p))
            .collect();
        if files.len() < min_images {
            let msg = format!(
                "skipping class `{name}` in {split}: {} images, {min_images} required",
                files.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let images = files.iter().map(|f| load_image(f)).collect::<Result<Vec<_>>>()?;
        classes.push(ImageClass {
            name: name.clone(),
            images: images.iter().map(to_unit).collect(),
        });
        if rotations {
            for (deg, rotate) in [
                (90, imageops::rotate90 as fn(&image::GrayImage) -> image::GrayImage),
                (180, imageops::rotate180),
                (270, imageops::rotate270),
            ] {
                classes.push(ImageClass {
                    name: format!("{name}@rot{deg}"),
                    images: images.iter().map(|i| to_unit(&rotate(i))).collect(),
                });
            }
        }
    }
    if classes.is_empty() {
        return Err(Error::Config(format!("no usable classes under {}", dir.display())));
    }
    classes.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(classes)
}

/// Loads `root/{train,test}/<class>/<image>` (PNG or PNM), resizing to 20x20
/// by nearest neighbour and scaling to `[0, 1]`. Classes with fewer than
/// `min_images` images are skipped with a warning. With `rotations`, each
/// class also yields 90/180/270 degree rotated copies as new classes.
pub fn load_image_dir(root: impl AsRef<Path>, min_images: usize, rotations: bool) -> Result<TaskSource> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image directory not found"),
        ));
    }
    let mut warnings = Vec::new();
    let train = load_split(root, Split::Train, min_images, rotations, &mut warnings)?;
    let test = load_split(root, Split::Test, min_images, rotations, &mut warnings)?;
    let (train_classes, test_classes) = (train.len(), test.len());
    let mut classes = train;
    classes.extend(test);
    Ok(TaskSource {
        pool: Pool::Images { classes },
        input_shape: vec![1, IMAGE_SIZE, IMAGE_SIZE],
        train_classes,
        test_classes,
        warnings,
    })
}
