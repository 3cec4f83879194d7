//! Flat `key = value` run configuration.
//!
//! One setting per line. Blank lines and lines whose first non-blank
//! character is `#` are ignored. Keys and values are trimmed; lists are
//! comma-separated. A key may appear at most once per file, and overrides
//! applied afterwards replace file values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::msnet::{NetConfig, NetVariant};
use crate::trainer::TrainConfig;

/// `(key, description)` of every accepted setting.
pub const KEYS: &[(&str, &str)] = &[
    ("stage_channels", "backbone widths c1,c2,c3,c4 (non-decreasing)"),
    ("blocks_per_stage", "residual blocks after each backbone downsampling block"),
    ("decoder_channels", "decoder widths for layers 1..4"),
    ("reduction", "bottleneck reduction ratio of the fusion gates; divides every fused width"),
    ("input_sizes", "square input side of scales 1,2,3"),
    ("variant", "active scales: full | scale2 | scale1"),
    ("fusion", "fusion block: seff | cbr (parameter-matched CBR stack)"),
    ("batch_size", "samples per optimizer step"),
    ("micro_batch", "samples per forward graph; gradients are accumulated"),
    ("lr0", "initial learning rate"),
    ("decay_factor", "learning-rate divisor per decay step"),
    ("decay_every", "epochs between learning-rate decays"),
    ("epochs", "training epochs"),
    ("seed", "seed for initialization, shuffling and synthetic data"),
    ("checkpoint_every", "epochs between checkpoints (0: final only)"),
    ("hflip", "random horizontal flips during training: true | false"),
    ("lambda_bce", "weight of the adaptive BCE term"),
    ("lambda_iou", "weight of the adaptive IoU term"),
    ("lambda_l1", "weight of the adaptive L1 term"),
    ("omega_mu", "boundary emphasis of the adaptive pixel weight"),
    ("loss_kernels", "odd pooling kernels of the adaptive pixel weight"),
    ("dataset", "training dataset root (RGB/, depth/, GT/)"),
    ("test_dataset", "evaluation dataset root for ablate"),
    ("synth_n", "synthetic training samples (synth, ablate)"),
    ("synth_test_n", "synthetic test samples (ablate)"),
    ("synth_canvas", "synthetic canvas height,width"),
    ("ablate_train", "train and evaluate every ablation variant: true | false"),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub synth_n: usize,
    pub synth_test_n: usize,
    pub synth_canvas: (usize, usize),
    pub ablate_train: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            dataset: None,
            test_dataset: None,
            synth_n: 100,
            synth_test_n: 30,
            synth_canvas: (128, 128),
            ablate_train: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("`{v}` is not a valid number")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let list = parse_list(key, v)?;
    list.try_into()
        .map_err(|l: Vec<usize>| Error::config(key, format!("expected {N} values, got {}", l.len())))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("`{v}` is not true or false"))),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Splits a document into `(key, value)` pairs, rejecting malformed lines
/// and repeated keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("`{t}` is not `key = value`")))?;
        let k = k.trim().to_owned();
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::config(k, format!("set twice (line {})", n + 1)));
        }
        out.push((k, v.trim().to_owned()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (net, tr) = (&mut self.net, &mut self.train);
        match key {
            "stage_channels" => net.backbone.stage_channels = parse_array(key, v)?,
            "blocks_per_stage" => net.backbone.blocks_per_stage = parse_num(key, v)?,
            "decoder_channels" => net.decoder_channels = parse_array(key, v)?,
            "reduction" => net.reduction = parse_num(key, v)?,
            "input_sizes" => net.input_sizes = parse_array(key, v)?,
            "variant" => net.variant = v.parse::<NetVariant>().map_err(|m| Error::config(key, m))?,
            "fusion" => net.fusion = v.parse::<FusionKind>().map_err(|m| Error::config(key, m))?,
            "batch_size" => tr.batch_size = parse_num(key, v)?,
            "micro_batch" => tr.micro_batch = parse_num(key, v)?,
            "lr0" => tr.lr0 = parse_num(key, v)?,
            "decay_factor" => tr.decay_factor = parse_num(key, v)?,
            "decay_every" => tr.decay_every = parse_num(key, v)?,
            "epochs" => tr.epochs = parse_num(key, v)?,
            "seed" => tr.seed = parse_num(key, v)?,
            "checkpoint_every" => tr.checkpoint_every = parse_num(key, v)?,
            "hflip" => tr.hflip = parse_bool(key, v)?,
            "lambda_bce" => tr.loss.lambda_bce = parse_num(key, v)?,
            "lambda_iou" => tr.loss.lambda_iou = parse_num(key, v)?,
            "lambda_l1" => tr.loss.lambda_l1 = parse_num(key, v)?,
            "omega_mu" => tr.loss.omega_mu = parse_num(key, v)?,
            "loss_kernels" => tr.loss.kernels = parse_list(key, v)?,
            "dataset" => self.dataset = parse_path(v),
            "test_dataset" => self.test_dataset = parse_path(v),
            "synth_n" => self.synth_n = parse_num(key, v)?,
            "synth_test_n" => self.synth_test_n = parse_num(key, v)?,
            "synth_canvas" => {
                let [h, w] = parse_array(key, v)?;
                self.synth_canvas = (h, w);
            }
            "ablate_train" => self.ablate_train = parse_bool(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// File values (if any), then `KEY=VALUE` overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override is not KEY=VALUE"))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()
    }

    /// The value of `key` in file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let (net, tr) = (&self.net, &self.train);
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        Some(match key {
            "stage_channels" => join(&net.backbone.stage_channels),
            "blocks_per_stage" => net.backbone.blocks_per_stage.to_string(),
            "decoder_channels" => join(&net.decoder_channels),
            "reduction" => net.reduction.to_string(),
            "input_sizes" => join(&net.input_sizes),
            "variant" => net.variant.to_string(),
            "fusion" => net.fusion.as_str().to_owned(),
            "batch_size" => tr.batch_size.to_string(),
            "micro_batch" => tr.micro_batch.to_string(),
            "lr0" => format!("{:e}", tr.lr0),
            "decay_factor" => tr.decay_factor.to_string(),
            "decay_every" => tr.decay_every.to_string(),
            "epochs" => tr.epochs.to_string(),
            "seed" => tr.seed.to_string(),
            "checkpoint_every" => tr.checkpoint_every.to_string(),
            "hflip" => tr.hflip.to_string(),
            "lambda_bce" => tr.loss.lambda_bce.to_string(),
            "lambda_iou" => tr.loss.lambda_iou.to_string(),
            "lambda_l1" => tr.loss.lambda_l1.to_string(),
            "omega_mu" => tr.loss.omega_mu.to_string(),
            "loss_kernels" => join(&tr.loss.kernels),
            "dataset" => path(&self.dataset),
            "test_dataset" => path(&self.test_dataset),
            "synth_n" => self.synth_n.to_string(),
            "synth_test_n" => self.synth_test_n.to_string(),
            "synth_canvas" => format!("{},{}", self.synth_canvas.0, self.synth_canvas.1),
            "ablate_train" => self.ablate_train.to_string(),
            _ => return None,
        })
    }

    /// Every key in file syntax; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
