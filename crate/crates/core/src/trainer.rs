//! Adam training loop with a step learning-rate schedule, per-head loss
//! logging, checkpointing and single-image inference.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seffsal_autograd::{Graph, ParamStore, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, ScalePyramid};
use crate::error::{Error, Result};
use crate::losses::{total_loss, ApiWeights};
use crate::metrics::{mae, GrayMap};
use crate::msnet::{map_name, MsNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Samples per forward graph; gradients are accumulated across chunks.
    pub micro_batch: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epoch interval between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub hflip: bool,
    pub loss: ApiWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            micro_batch: 1,
            lr0: 5e-5,
            decay_factor: 5.0,
            decay_every: 40,
            epochs: 100,
            seed: 0,
            checkpoint_every: 10,
            hflip: false,
            loss: ApiWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("micro_batch", self.micro_batch),
            ("decay_every", self.decay_every),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::config("lr0", format!("{} is not a non-negative number", self.lr0)));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::config("decay_factor", "must be positive"));
        }
        self.loss.validate()
    }
}

/// `lr0 / decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every) as i32;
    cfg.lr0 / cfg.decay_factor.powi(k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads[i]` belongs to the `i`-th parameter of the store.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Batch-mean losses of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub total: f64,
    /// `(head name, loss)` in ascending `(scale, layer)` order.
    pub heads: Vec<(String, f64)>,
}

/// Loss and gradients of `batch`, averaged over its samples.
pub fn batch_gradients(
    net: &MsNet,
    batch: &[&ScalePyramid],
    micro_batch: usize,
    weights: &ApiWeights,
) -> Result<(StepStats, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let b = batch.len() as f64;
    let mut grads: Vec<Tensor> = net.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    let mut stats = StepStats {
        total: 0.0,
        heads: Vec::new(),
    };
    for chunk in batch.chunks(micro_batch.max(1)) {
        let merged = ScalePyramid::batch(chunk)?;
        let share = chunk.len() as f64 / b;
        let mut g = Graph::new();
        let out = net.forward(&mut g, &merged.inputs)?;
        let loss = total_loss(&mut g, &out.bundle, &merged.gt, weights)?;
        if stats.heads.is_empty() {
            stats.heads = loss.heads.iter().map(|h| (h.name(), 0.0)).collect();
        }
        for (slot, h) in stats.heads.iter_mut().zip(&loss.heads) {
            if !h.value.is_finite() {
                return Err(Error::Numeric(h.name()));
            }
            slot.1 += share * h.value;
        }
        stats.total += share * g.value(loss.total).data()[0];
        for (id, grad) in g.backward(loss.total)?.into_param_grads() {
            let acc = &mut grads[id.index()];
            for (a, v) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += share * v;
            }
        }
    }
    if let Some(bad) = grads.iter().position(|t| !t.all_finite()) {
        let id = net.params.ids().nth(bad).expect("gradient per parameter");
        return Err(Error::Numeric(format!("gradient of {}", net.params.name(id))));
    }
    Ok((stats, grads))
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub total: f64,
    pub heads: Vec<(String, f64)>,
    pub lr: f64,
}

impl LossRecord {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["epoch".to_owned(), "iter".to_owned(), "total".to_owned()];
        cols.extend(self.heads.iter().map(|(n, _)| n.clone()));
        cols.push("lr".to_owned());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.epoch.to_string(), self.iteration.to_string(), format!("{:.10e}", self.total)];
        cols.extend(self.heads.iter().map(|(_, v)| format!("{v:.10e}")));
        cols.push(format!("{:.6e}", self.lr));
        cols.join(",")
    }
}

pub struct Trainer {
    pub net: MsNet,
    pub adam: Adam,
    pub cfg: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(net: MsNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(&net.params);
        Ok(Self {
            net,
            adam,
            cfg,
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn step(&mut self, batch: &[&ScalePyramid], lr: f64) -> Result<StepStats> {
        let (stats, grads) = match batch_gradients(&self.net, batch, self.cfg.micro_batch, &self.cfg.loss) {
            Err(Error::Numeric(head)) => {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    iteration: self.iteration,
                    head,
                })
            }
            other => other?,
        };
        self.adam.update(&mut self.net.params, &grads, lr);
        self.iteration += 1;
        Ok(stats)
    }

    /// One pass over `data` in a seeded order; returns a record per step.
    pub fn run_epoch(&mut self, data: &[ScalePyramid]) -> Result<Vec<LossRecord>> {
        if data.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let lr = lr_schedule(self.epoch, &self.cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| self.cfg.hflip && rand::Rng::gen_bool(&mut rng, 0.5)).collect();
        let mut records = Vec::new();
        for (chunk, fl) in order.chunks(self.cfg.batch_size).zip(flips.chunks(self.cfg.batch_size)) {
            let flipped: Vec<ScalePyramid> = chunk
                .iter()
                .zip(fl)
                .filter(|(_, &f)| f)
                .map(|(&i, _)| flip_pyramid(&data[i]))
                .collect();
            let mut fi = flipped.iter();
            let batch: Vec<&ScalePyramid> = chunk
                .iter()
                .zip(fl)
                .map(|(&i, &f)| if f { fi.next().expect("flipped copy") } else { &data[i] })
                .collect();
            let stats = self.step(&batch, lr)?;
            records.push(LossRecord {
                epoch: self.epoch,
                iteration: self.iteration,
                total: stats.total,
                heads: stats.heads,
                lr,
            });
        }
        self.epoch += 1;
        Ok(records)
    }
}

fn flip_pyramid(p: &ScalePyramid) -> ScalePyramid {
    ScalePyramid {
        id: p.id.clone(),
        inputs: p
            .inputs
            .iter()
            .map(|i| crate::msnet::ScaleInput {
                scale: i.scale,
                rgb: i.rgb.flip_horizontal(),
                depth: i.depth.flip_horizontal(),
            })
            .collect(),
        gt: p.gt.flip_horizontal(),
    }
}

/// Where [`train`] writes its artifacts.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    /// Stored verbatim in every checkpoint header.
    pub run_config: serde_json::Value,
}

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `cfg.epochs` epochs. With an output directory, the loss log is
/// appended after every step and checkpoints are written every
/// `checkpoint_every` epochs and at the end.
pub fn train(net: MsNet, dataset: &[ScalePyramid], cfg: &TrainConfig, out: Option<&RunOutput<'_>>) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut csv = match out {
        Some(o) => {
            fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
            let path = o.dir.join(LOSS_LOG);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut header_written = false;
    for _ in 0..cfg.epochs {
        let records = trainer.run_epoch(dataset)?;
        if let Some((file, path)) = csv.as_mut() {
            for r in &records {
                if !header_written {
                    writeln!(file, "{}", r.csv_header()).map_err(|e| Error::io(&*path, e))?;
                    header_written = true;
                }
                writeln!(file, "{}", r.csv_row()).map_err(|e| Error::io(&*path, e))?;
            }
            file.flush().map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(r) = records.last() {
            log::info!("epoch {} iter {} loss {:.5} lr {:.3e}", r.epoch, r.iteration, r.total, r.lr);
        }
        log.extend(records);
        if let Some(o) = out {
            let e = trainer.epoch;
            if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 && e < cfg.epochs {
                let path = o.dir.join(checkpoint_name(e));
                checkpoint::save(&path, &trainer.net, Some(&trainer.adam), e, trainer.iteration, &o.run_config)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(o) = out {
        let path = o.dir.join(FINAL_CHECKPOINT);
        checkpoint::save(&path, &trainer.net, Some(&trainer.adam), trainer.epoch, trainer.iteration, &o.run_config)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        trainer,
        log,
        checkpoints,
    })
}

/// Mean MAE of the network's predictions over `samples`.
pub fn dataset_mae(net: &MsNet, samples: &[data::Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let pred = net.predict(&s.rgb, &s.depth)?;
        sum += mae(&GrayMap::from_tensor(&pred), &GrayMap::from_tensor(&s.gt))?;
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// RGB and min-max normalized depth, as `[1, 3, H, W]` and `[1, 1, H, W]`.
pub fn load_rgbd(rgb_path: &Path, depth_path: &Path) -> Result<(Tensor, Tensor)> {
    let open = |p: &Path| {
        image::open(p).map_err(|e| Error::Image {
            path: p.to_owned(),
            message: e.to_string(),
        })
    };
    let rgb = open(rgb_path)?.to_rgb8();
    let depth = open(depth_path)?.to_luma16();
    if rgb.dimensions() != depth.dimensions() {
        return Err(Error::Load(format!(
            "{} and {} differ in size",
            rgb_path.display(),
            depth_path.display()
        )));
    }
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let rgb_t = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    });
    let mut d: Vec<f64> = depth.as_raw().iter().map(|&v| f64::from(v)).collect();
    data::normalize_min_max(&mut d);
    Ok((rgb_t, Tensor::from_vec(Shape::new(1, 1, h, w), d)?))
}

/// Predicts a saliency map for one RGB-D pair and writes it as an 8-bit PNG
/// at the input resolution.
pub fn infer(net: &MsNet, rgb_path: &Path, depth_path: &Path, out_path: &Path) -> Result<Tensor> {
    let (rgb, depth) = load_rgbd(rgb_path, depth_path)?;
    let pred = net.predict(&rgb, &depth)?;
    data::save_gray_png(out_path, &pred)?;
    Ok(pred)
}

/// Names of the heads in loss-log order.
pub fn head_names(net: &MsNet) -> Vec<String> {
    let mut out = Vec::new();
    for &s in net.config().variant.active_scales().iter().rev() {
        for j in 1..=4 {
            out.push(map_name(s, j));
        }
    }
    out
}
