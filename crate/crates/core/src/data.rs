//! Dataset layout, loading, scale pyramids and the synthetic RGB-D generator.
//!
//! Layout: `<root>/RGB/<stem>.{jpg,png}`, `<root>/depth/<stem>.png`,
//! `<root>/GT/<stem>.png`, matched by stem. Synthetic sets also carry a
//! `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seffsal_autograd::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msnet::{scale_inputs, NetConfig, ScaleInput};

pub const RGB_DIR: &str = "RGB";
pub const DEPTH_DIR: &str = "depth";
pub const GT_DIR: &str = "GT";
pub const MANIFEST: &str = "manifest.json";
pub const MIN_CANVAS: usize = 64;
pub const WORKERS_ENV: &str = "SEFFSAL_NUM_WORKERS";

/// One aligned RGB-D pair with its mask. Tensors carry a batch axis of 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[1, 1, H, W]` in `[0, 1]`.
    pub depth: Tensor,
    /// `[1, 1, H, W]` in `{0, 1}`.
    pub gt: Tensor,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        self.rgb.shape().spatial()
    }

    pub fn flipped(&self) -> Self {
        Self {
            id: self.id.clone(),
            rgb: self.rgb.flip_horizontal(),
            depth: self.depth.flip_horizontal(),
            gt: self.gt.flip_horizontal(),
        }
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| image_err(path, e))
}

/// Per-image min-max scaling; a constant map becomes zeros.
pub fn normalize_min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in values.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        values.fill(0.0);
    }
}

pub fn load_sample(rgb_path: &Path, depth_path: &Path, gt_path: &Path) -> Result<Sample> {
    let rgb = open(rgb_path)?.to_rgb8();
    let depth = open(depth_path)?.to_luma16();
    let gt = open(gt_path)?.to_luma8();
    let dims = rgb.dimensions();
    for (path, d) in [(depth_path, depth.dimensions()), (gt_path, gt.dimensions())] {
        if d != dims {
            return Err(Error::Load(format!(
                "{} is {}×{} but {} is {}×{}",
                path.display(),
                d.0,
                d.1,
                rgb_path.display(),
                dims.0,
                dims.1
            )));
        }
    }
    let (w, h) = (dims.0 as usize, dims.1 as usize);
    let rgb_t = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    });
    let mut depth_v: Vec<f64> = depth.as_raw().iter().map(|&v| f64::from(v)).collect();
    normalize_min_max(&mut depth_v);
    let depth_t = Tensor::from_vec(Shape::new(1, 1, h, w), depth_v)?;
    let gt_v = gt.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    let gt_t = Tensor::from_vec(Shape::new(1, 1, h, w), gt_v)?;
    let id = rgb_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_owned();
    Ok(Sample {
        id,
        rgb: rgb_t,
        depth: depth_t,
        gt: gt_t,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn gray_image(t: &Tensor) -> GrayImage {
    let (h, w) = t.shape().spatial();
    let plane = t.plane(0, 0);
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(plane[y as usize * w + x as usize])]))
}

/// Writes a `[1, 1, H, W]` map in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, map: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    gray_image(map).save(path).map_err(|e| image_err(path, e))
}

/// Writes the three PNGs of `sample` under `root` in the dataset layout.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    let (h, w) = sample.size();
    for dir in [RGB_DIR, DEPTH_DIR, GT_DIR] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| to_u8(sample.rgb.get(0, c, y as usize, x as usize))))
    });
    let name = format!("{}.png", sample.id);
    let p = root.join(RGB_DIR).join(&name);
    rgb.save(&p).map_err(|e| image_err(&p, e))?;
    save_gray_png(&root.join(DEPTH_DIR).join(&name), &sample.depth)?;
    save_gray_png(&root.join(GT_DIR).join(&name), &sample.gt)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: PathBuf,
}

/// The stem-matched files of one dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
    /// Stems missing from at least one of the three folders.
    pub unmatched: Vec<String>,
}

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let rgb = stems(&root.join(RGB_DIR), &["jpg", "jpeg", "png"])?;
        let depth = stems(&root.join(DEPTH_DIR), &["png"])?;
        let gt = stems(&root.join(GT_DIR), &["png"])?;
        let mut entries = Vec::new();
        let mut unmatched = Vec::new();
        let all: std::collections::BTreeSet<&String> = rgb.keys().chain(depth.keys()).chain(gt.keys()).collect();
        for id in all {
            match (rgb.get(id), depth.get(id), gt.get(id)) {
                (Some(r), Some(d), Some(g)) => entries.push(Entry {
                    id: id.clone(),
                    rgb: r.clone(),
                    depth: d.clone(),
                    gt: g.clone(),
                }),
                _ => {
                    log::warn!("{}: `{id}` is missing from one of RGB/depth/GT, skipped", root.display());
                    unmatched.push(id.clone());
                }
            }
        }
        Ok(Self {
            root: root.to_owned(),
            entries,
            unmatched,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every entry, reading files on up to `workers` threads. The
    /// result is in entry order regardless of the worker count.
    pub fn load_all(&self, workers: usize) -> Result<Vec<Sample>> {
        let workers = workers.clamp(1, self.entries.len().max(1));
        let chunk = self.entries.len().div_ceil(workers).max(1);
        let results: Vec<Result<Vec<Sample>>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .entries
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|e| load_sample(&e.rgb, &e.depth, &e.gt))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(self.entries.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Loader concurrency: `SEFFSAL_NUM_WORKERS` if set, else the available
/// parallelism.
pub fn loader_workers() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(available.max(1)).max(1),
        _ => available,
    }
}

/// Per-scale network inputs of one sample plus its full-resolution mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid {
    pub id: String,
    pub inputs: Vec<ScaleInput>,
    pub gt: Tensor,
}

impl ScalePyramid {
    /// Concatenates pyramids along the batch axis.
    pub fn batch(parts: &[&ScalePyramid]) -> Result<ScalePyramid> {
        let first = parts.first().ok_or_else(|| Error::contract("empty batch"))?;
        let inputs = first
            .inputs
            .iter()
            .enumerate()
            .map(|(k, inp)| {
                let rgb: Vec<&Tensor> = parts.iter().map(|p| &p.inputs[k].rgb).collect();
                let depth: Vec<&Tensor> = parts.iter().map(|p| &p.inputs[k].depth).collect();
                Ok(ScaleInput {
                    scale: inp.scale,
                    rgb: Tensor::stack(&rgb)?,
                    depth: Tensor::stack(&depth)?,
                })
            })
            .collect::<Result<_>>()?;
        let gts: Vec<&Tensor> = parts.iter().map(|p| &p.gt).collect();
        Ok(ScalePyramid {
            id: first.id.clone(),
            inputs,
            gt: Tensor::stack(&gts)?,
        })
    }
}

/// Bilinear resize of RGB and depth to every scale the variant uses.
pub fn make_pyramid(sample: &Sample, config: &NetConfig) -> Result<ScalePyramid> {
    Ok(ScalePyramid {
        id: sample.id.clone(),
        inputs: scale_inputs(config, &sample.rgb, &sample.depth)?,
        gt: sample.gt.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub seed: u64,
    pub n: usize,
    pub canvas: [usize; 2],
    pub object_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthSet {
    pub seed: u64,
    pub canvas: (usize, usize),
    pub samples: Vec<Sample>,
    pub object_counts: Vec<usize>,
}

impl SynthSet {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            generator: "seffsal-synth".to_owned(),
            seed: self.seed,
            n: self.samples.len(),
            canvas: [self.canvas.0, self.canvas.1],
            object_counts: self.object_counts.clone(),
        }
    }

    /// Writes the dataset layout plus `manifest.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for s in &self.samples {
            save_sample(root, s)?;
        }
        let path = root.join(MANIFEST);
        let json = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Ellipse,
    Rect,
}

#[derive(Clone, Copy, Debug)]
struct Object {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    color: [f64; 3],
    disparity: f64,
}

impl Object {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
        }
    }

    /// Fraction of the pixel at `(x, y)` covered, from a 4×4 supersample.
    fn coverage(&self, x: usize, y: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..4 {
            for sx in 0..4 {
                let px = x as f64 + (sx as f64 + 0.5) / 4.0;
                let py = y as f64 + (sy as f64 + 0.5) / 4.0;
                hits += usize::from(self.contains(px, py));
            }
        }
        hits as f64 / 16.0
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(0.0..1.0))
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn synth_one(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<Object>, Tensor, Tensor, Tensor) {
    let side = h.min(w) as f64;
    loop {
        let bg = random_color(rng);
        let count = rng.gen_range(1..=3);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let mut color = random_color(rng);
            while color_distance(color, bg) < 0.5 {
                color = random_color(rng);
            }
            objects.push(Object {
                kind: if rng.gen_bool(0.5) { ShapeKind::Ellipse } else { ShapeKind::Rect },
                cx: rng.gen_range(0.2..0.8) * w as f64,
                cy: rng.gen_range(0.2..0.8) * h as f64,
                rx: rng.gen_range(0.08..0.3) * side,
                ry: rng.gen_range(0.08..0.3) * side,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                color,
                disparity: rng.gen_range(0.6..1.0),
            });
        }
        // Nearer objects are drawn last so they occlude farther ones.
        objects.sort_by(|a, b| a.disparity.total_cmp(&b.disparity));

        let mut gt = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if objects.iter().any(|o| o.contains(px, py)) {
                    gt[y * w + x] = 1.0;
                }
            }
        }
        let frac = gt.iter().sum::<f64>() / (h * w) as f64;
        if !(0.02..=0.6).contains(&frac) {
            continue;
        }

        let freq = [rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)];
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let grad_dir = rng.gen_range(0.0..std::f64::consts::TAU);
        let (gs, gc) = grad_dir.sin_cos();
        let mut rgb = Tensor::zeros(Shape::new(1, 3, h, w));
        let mut depth = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let texture = 0.08 * ((x as f64 * freq[0] + phase).sin() * (y as f64 * freq[1]).cos());
                let mut color: [f64; 3] = std::array::from_fn(|c| bg[c] + texture + rng.gen_range(-0.03..0.03));
                let u = (x as f64 / w as f64 - 0.5) * gc + (y as f64 / h as f64 - 0.5) * gs;
                let mut d = 0.25 + 0.3 * u;
                for o in &objects {
                    let cov = o.coverage(x, y);
                    if cov > 0.0 {
                        for c in 0..3 {
                            color[c] = cov * o.color[c] + (1.0 - cov) * color[c];
                        }
                        d = cov * o.disparity + (1.0 - cov) * d;
                    }
                }
                for (c, v) in color.iter().enumerate() {
                    rgb.set(0, c, y, x, v.clamp(0.0, 1.0));
                }
                depth[y * w + x] = d + rng.gen_range(-0.02..0.02);
            }
        }
        normalize_min_max(&mut depth);
        let depth = Tensor::from_vec(Shape::new(1, 1, h, w), depth).expect("sized");
        let gt = Tensor::from_vec(Shape::new(1, 1, h, w), gt).expect("sized");
        return (objects, rgb, depth, gt);
    }
}

/// `n` deterministic samples of 1–3 antialiased ellipses or rectangles on a
/// textured background, with depth brighter for nearer objects.
pub fn synth_generate(seed: u64, n: usize, canvas: (usize, usize)) -> Result<SynthSet> {
    let (h, w) = canvas;
    if h < MIN_CANVAS || w < MIN_CANVAS {
        return Err(Error::config(
            "synth_canvas",
            format!("canvas {h}×{w} is smaller than {MIN_CANVAS}×{MIN_CANVAS}"),
        ));
    }
    if n == 0 {
        return Err(Error::config("synth_n", "at least one sample is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut object_counts = Vec::with_capacity(n);
    for i in 0..n {
        let (objects, rgb, depth, gt) = synth_one(&mut rng, h, w);
        object_counts.push(objects.len());
        samples.push(Sample {
            id: format!("synth_{i:05}"),
            rgb,
            depth,
            gt,
        });
    }
    Ok(SynthSet {
        seed,
        canvas,
        samples,
        object_counts,
    })
}
