//! Adaptive pixel intensity loss: boundary-weighted BCE, IoU and L1.
//!
//! Every term is computed per sample and averaged over the batch. The pixel
//! weight `ω = 1 + μ Σ_k |avgpool_k(gt) − gt|` grows near mask boundaries and
//! equals 1 wherever the mask is constant over the largest kernel.

use std::collections::BTreeMap;

use seffsal_autograd::{resize_area, CustomOp, Graph, Shape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msnet::{map_name, SaliencyBundle};

/// Clamp for log arguments.
pub const BCE_EPS: f64 = 1e-7;
/// Added to the IoU denominator.
pub const IOU_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiWeights {
    pub lambda_bce: f64,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub kernels: Vec<usize>,
    pub omega_mu: f64,
}

impl Default for ApiWeights {
    fn default() -> Self {
        Self {
            lambda_bce: 1.0,
            lambda_iou: 0.5,
            lambda_l1: 0.3,
            kernels: vec![3, 15, 31],
            omega_mu: 0.5,
        }
    }
}

impl ApiWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_bce", self.lambda_bce),
            ("lambda_iou", self.lambda_iou),
            ("lambda_l1", self.lambda_l1),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("{v} is not a non-negative number")));
            }
        }
        if !(self.omega_mu.is_finite() && self.omega_mu > 0.0) {
            return Err(Error::config("omega_mu", format!("{} is not positive", self.omega_mu)));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::config("kernels", format!("{:?} must be non-empty and odd", self.kernels)));
        }
        Ok(())
    }

    /// `λ1·bce + λ2·iou + λ3·l1`.
    pub fn combine(&self, terms: &LossTerms) -> f64 {
        self.lambda_bce * terms.bce + self.lambda_iou * terms.iou + self.lambda_l1 * terms.l1
    }
}

/// Batch-mean values of the three sub-losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub bce: f64,
    pub iou: f64,
    pub l1: f64,
}

fn check_gt(gt: &Tensor) -> Result<()> {
    if gt.shape().c != 1 {
        return Err(Error::contract(format!("ground truth must have one channel, got {}", gt.shape())));
    }
    if let Some(v) = gt.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract(format!("ground truth value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Same-size box mean of one line with replicated edges.
fn box_mean_line(src: &[f64], k: usize, out: &mut [f64]) {
    let r = k / 2;
    let n = src.len();
    let mut prefix = Vec::with_capacity(n + 2 * r + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for i in 0..n + 2 * r {
        acc += src[i.saturating_sub(r).min(n - 1)];
        prefix.push(acc);
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = (prefix[i + k] - prefix[i]) / k as f64;
    }
}

/// `k × k` mean filter with edge replication, same output size.
pub fn avg_pool_same(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let mut out = x.clone();
    let mut row = vec![0.0; w];
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = out.plane_mut(n, c);
            for y in 0..h {
                box_mean_line(&plane[y * w..(y + 1) * w], k, &mut row);
                plane[y * w..(y + 1) * w].copy_from_slice(&row);
            }
            for xx in 0..w {
                for y in 0..h {
                    col[y] = plane[y * w + xx];
                }
                box_mean_line(&col, k, &mut col_out);
                for y in 0..h {
                    plane[y * w + xx] = col_out[y];
                }
            }
        }
    }
    out
}

pub fn adaptive_weight(gt: &Tensor, kernels: &[usize], mu: f64) -> Result<Tensor> {
    check_gt(gt)?;
    let mut omega = Tensor::full(gt.shape(), 1.0);
    for &k in kernels {
        if k % 2 == 0 {
            return Err(Error::contract(format!("pooling kernel {k} is even")));
        }
        let pooled = avg_pool_same(gt, k);
        for ((o, p), g) in omega.data_mut().iter_mut().zip(pooled.data()).zip(gt.data()) {
            *o += mu * (p - g).abs();
        }
    }
    Ok(omega)
}

fn check_triplet(pred: &Tensor, gt: &Tensor, omega: &Tensor) -> Result<()> {
    check_gt(gt)?;
    if pred.shape() != gt.shape() || omega.shape() != gt.shape() {
        return Err(Error::contract(format!(
            "loss operands differ: pred {}, gt {}, ω {}",
            pred.shape(),
            gt.shape(),
            omega.shape()
        )));
    }
    Ok(())
}

/// Per-sample sums shared by the three sub-losses and their gradients.
struct SampleSums {
    weight: f64,
    bce: f64,
    inter: f64,
    union: f64,
    l1: f64,
    gt_mass: f64,
}

fn sample_sums(p: &[f64], g: &[f64], w: &[f64]) -> SampleSums {
    let mut s = SampleSums {
        weight: 0.0,
        bce: 0.0,
        inter: 0.0,
        union: 0.0,
        l1: 0.0,
        gt_mass: 0.0,
    };
    for ((&p, &g), &w) in p.iter().zip(g).zip(w) {
        let lp = p.max(BCE_EPS).ln();
        let lq = (1.0 - p).max(BCE_EPS).ln();
        s.weight += w;
        s.bce -= w * (g * lp + (1.0 - g) * lq);
        s.inter += w * p * g;
        s.union += w * (p + g - p * g);
        s.l1 += w * (p - g).abs();
        s.gt_mass += w * g;
    }
    s
}

impl SampleSums {
    fn terms(&self) -> LossTerms {
        LossTerms {
            bce: self.bce / self.weight,
            // An empty mask has no overlap to score; BCE and L1 still drive
            // the prediction towards zero.
            iou: if self.gt_mass == 0.0 {
                0.0
            } else {
                1.0 - self.inter / (self.union + IOU_EPS)
            },
            l1: self.l1 / self.weight,
        }
    }
}

fn batch_terms(pred: &Tensor, gt: &Tensor, omega: &Tensor) -> Result<LossTerms> {
    check_triplet(pred, gt, omega)?;
    let n = pred.shape().n;
    let mut acc = LossTerms::default();
    for i in 0..n {
        let t = sample_sums(pred.sample(i), gt.sample(i), omega.sample(i)).terms();
        acc.bce += t.bce;
        acc.iou += t.iou;
        acc.l1 += t.l1;
    }
    let k = n as f64;
    Ok(LossTerms {
        bce: acc.bce / k,
        iou: acc.iou / k,
        l1: acc.l1 / k,
    })
}

pub fn loss_terms(pred: &Tensor, gt: &Tensor, omega: &Tensor) -> Result<LossTerms> {
    batch_terms(pred, gt, omega)
}

pub fn a_bce(pred: &Tensor, gt: &Tensor, omega: &Tensor) -> Result<f64> {
    Ok(batch_terms(pred, gt, omega)?.bce)
}

pub fn a_iou(pred: &Tensor, gt: &Tensor, omega: &Tensor) -> Result<f64> {
    Ok(batch_terms(pred, gt, omega)?.iou)
}

pub fn a_l1(pred: &Tensor, gt: &Tensor, omega: &Tensor) -> Result<f64> {
    Ok(batch_terms(pred, gt, omega)?.l1)
}

/// API loss of a prediction against a same-size ground truth.
pub fn api_loss(pred: &Tensor, gt: &Tensor, weights: &ApiWeights) -> Result<f64> {
    let omega = adaptive_weight(gt, &weights.kernels, weights.omega_mu)?;
    Ok(weights.combine(&batch_terms(pred, gt, &omega)?))
}

/// Area-average to `h × w`, then re-binarize at 0.5.
pub fn resize_gt(gt: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw) = gt.shape().spatial();
    if (gh, gw) == (h, w) {
        return Ok(gt.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
    }
    Ok(resize_area(gt, h, w)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Backward of the combined API loss w.r.t. the prediction.
struct ApiLossOp {
    gt: Tensor,
    omega: Tensor,
    lambdas: [f64; 3],
}

impl CustomOp for ApiLossOp {
    fn name(&self) -> &str {
        "api_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let pred = inputs[0];
        let upstream = grad.data()[0];
        let n = pred.shape().n;
        let [l_bce, l_iou, l_l1] = self.lambdas;
        let mut out = Tensor::zeros(pred.shape());
        for i in 0..n {
            let (p, g, w) = (pred.sample(i), self.gt.sample(i), self.omega.sample(i));
            let s = sample_sums(p, g, w);
            let denom = s.union + IOU_EPS;
            let iou_active = s.gt_mass != 0.0;
            let scale = upstream / n as f64;
            for (k, d) in out.sample_mut(i).iter_mut().enumerate() {
                let (p, g, w) = (p[k], g[k], w[k]);
                let mut dp = 0.0;
                if p > BCE_EPS {
                    dp -= l_bce * w * g / p / s.weight;
                }
                if 1.0 - p > BCE_EPS {
                    dp += l_bce * w * (1.0 - g) / (1.0 - p) / s.weight;
                }
                if iou_active {
                    dp -= l_iou * (w * g * denom - s.inter * w * (1.0 - g)) / (denom * denom);
                }
                let sign = if p > g {
                    1.0
                } else if p < g {
                    -1.0
                } else {
                    0.0
                };
                dp += l_l1 * w * sign / s.weight;
                *d = dp * scale;
            }
        }
        vec![Some(out)]
    }
}

/// Records the API loss of `pred` against `gt` (already at `pred`'s size) as
/// a scalar node.
pub fn api_loss_var(g: &mut Graph, pred: Var, gt: &Tensor, weights: &ApiWeights) -> Result<(Var, LossTerms)> {
    let omega = adaptive_weight(gt, &weights.kernels, weights.omega_mu)?;
    let terms = batch_terms(g.value(pred), gt, &omega)?;
    let value = Tensor::scalar(weights.combine(&terms));
    let op = ApiLossOp {
        gt: gt.clone(),
        omega,
        lambdas: [weights.lambda_bce, weights.lambda_iou, weights.lambda_l1],
    };
    Ok((g.custom(&[pred], value, Box::new(op)), terms))
}

#[derive(Clone, Debug)]
pub struct HeadLoss {
    pub scale: usize,
    pub layer: usize,
    pub value: f64,
    pub terms: LossTerms,
}

impl HeadLoss {
    pub fn name(&self) -> String {
        map_name(self.scale, self.layer)
    }
}

pub struct TotalLoss {
    pub total: Var,
    pub heads: Vec<HeadLoss>,
}

impl TotalLoss {
    pub fn value(&self) -> f64 {
        self.heads.iter().map(|h| h.value).sum()
    }
}

fn check_batch(map: Shape, gt: Shape) -> Result<()> {
    if map.n != gt.n || gt.c != 1 {
        return Err(Error::contract(format!("saliency map {map} and ground truth {gt} do not pair up")));
    }
    Ok(())
}

/// Sum of the API loss over every map in the bundle, each supervised by the
/// full-resolution `gt` resized to the map's size.
pub fn total_loss(g: &mut Graph, bundle: &SaliencyBundle, gt: &Tensor, weights: &ApiWeights) -> Result<TotalLoss> {
    if bundle.is_empty() {
        return Err(Error::contract("empty saliency bundle"));
    }
    let mut cache: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
    let mut heads = Vec::with_capacity(bundle.len());
    let mut parts = Vec::with_capacity(bundle.len());
    for ((scale, layer), map) in bundle.iter() {
        let shape = g.shape(map);
        check_batch(shape, gt.shape())?;
        let (h, w) = shape.spatial();
        if !cache.contains_key(&(h, w)) {
            cache.insert((h, w), resize_gt(gt, h, w)?);
        }
        let (var, terms) = api_loss_var(g, map, &cache[&(h, w)], weights)?;
        heads.push(HeadLoss {
            scale,
            layer,
            value: g.value(var).data()[0],
            terms,
        });
        parts.push(var);
    }
    let stacked = g.concat_channels(&parts)?;
    let total = g.sum_all(stacked);
    Ok(TotalLoss { total, heads })
}

/// Value-only counterpart of [`total_loss`].
pub fn total_loss_value(maps: &BTreeMap<(usize, usize), Tensor>, gt: &Tensor, weights: &ApiWeights) -> Result<f64> {
    let mut total = 0.0;
    for map in maps.values() {
        check_batch(map.shape(), gt.shape())?;
        let (h, w) = map.shape().spatial();
        total += api_loss(map, &resize_gt(gt, h, w)?, weights)?;
    }
    Ok(total)
}
