//! Salient object detection metrics: MAE, max F-measure, max E-measure and
//! S-measure, per image and averaged over a dataset.
//!
//! The degenerate-mask conventions of E- and S-measure follow the reference
//! MATLAB toolkits, with `EPS` standing in for MATLAB's `eps`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use seffsal_autograd::Tensor;
use serde::Serialize;

use crate::error::{Error, Result};

pub const BETA_SQ: f64 = 0.3;
pub const ALPHA: f64 = 0.5;
pub const NUM_THRESHOLDS: usize = 256;
const EPS: f64 = f64::EPSILON;

/// A single-channel map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::contract(format!(
                "{} values for a {height}×{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    /// First sample, first channel.
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            height: s.h,
            width: s.w,
            data: t.plane(0, 0).to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

fn check_pair(pred: &GrayMap, gt: &GrayMap) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::contract(format!(
            "prediction {}×{} and ground truth {}×{} differ",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    if let Some(v) = gt.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("ground truth value {v} is not binary")));
    }
    Ok(())
}

pub fn mae(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::contract("mae: shape mismatch"));
    }
    let sum: f64 = pred.data.iter().zip(&gt.data).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// `k / 255` for `k = 0..=255`.
pub fn thresholds() -> Vec<f64> {
    (0..NUM_THRESHOLDS).map(|k| k as f64 / 255.0).collect()
}

/// Number of thresholds `k / 255` that `p` reaches, minus one: the largest `k`
/// with `p ≥ k / 255`, or `None` below every threshold.
fn threshold_bin(p: f64) -> Option<usize> {
    if p.is_nan() || p < 0.0 {
        return None;
    }
    let mut k = (p * 255.0).floor().min(255.0) as usize;
    while k < 255 && p >= (k + 1) as f64 / 255.0 {
        k += 1;
    }
    while p < k as f64 / 255.0 {
        if k == 0 {
            return None;
        }
        k -= 1;
    }
    Some(k)
}

/// Confusion counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts for every threshold `k / 255`, positives being `pred ≥ t`.
pub fn confusion_sweep(pred: &GrayMap, gt: &GrayMap) -> Result<Vec<Confusion>> {
    check_pair(pred, gt)?;
    let mut fg = [0usize; NUM_THRESHOLDS];
    let mut bg = [0usize; NUM_THRESHOLDS];
    let mut fg_total = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let is_fg = g == 1.0;
        fg_total += usize::from(is_fg);
        if let Some(k) = threshold_bin(p) {
            if is_fg {
                fg[k] += 1;
            } else {
                bg[k] += 1;
            }
        }
    }
    let bg_total = pred.len() - fg_total;
    let mut out = vec![Confusion::default(); NUM_THRESHOLDS];
    let (mut tp, mut fp) = (0, 0);
    for k in (0..NUM_THRESHOLDS).rev() {
        tp += fg[k];
        fp += bg[k];
        out[k] = Confusion {
            tp,
            fp,
            fn_: fg_total - tp,
            tn: bg_total - fp,
        };
    }
    Ok(out)
}

/// Counts at an arbitrary threshold.
pub fn confusion_at(pred: &GrayMap, gt: &GrayMap, t: f64) -> Result<Confusion> {
    check_pair(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p >= t, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(precision, recall, F_β)` with `β² = 0.3` and `0/0 → 0`.
pub fn f_from_confusion(c: &Confusion) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let denom = BETA_SQ * p + r;
    let f = if denom == 0.0 { 0.0 } else { (1.0 + BETA_SQ) * p * r / denom };
    (p, r, f)
}

fn require_foreground(gt: &GrayMap) -> Result<()> {
    if gt.data.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(())
}

pub fn f_measure_max(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_pair(pred, gt)?;
    require_foreground(gt)?;
    Ok(confusion_sweep(pred, gt)?
        .iter()
        .map(|c| f_from_confusion(c).2)
        .fold(0.0, f64::max))
}

/// Max F-measure over a caller-chosen threshold set.
pub fn f_measure_max_over(pred: &GrayMap, gt: &GrayMap, ts: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    require_foreground(gt)?;
    let mut best = 0.0f64;
    for &t in ts {
        best = best.max(f_from_confusion(&confusion_at(pred, gt, t)?).2);
    }
    Ok(best)
}

/// Enhanced-alignment score of a binarized prediction described by its
/// confusion counts.
pub fn e_from_confusion(c: &Confusion) -> f64 {
    let n = c.total() as f64;
    let gt_fg = c.tp + c.fn_;
    let pred_fg = (c.tp + c.fp) as f64;
    if gt_fg == 0 {
        return 1.0 - pred_fg / n;
    }
    if gt_fg == c.total() {
        return pred_fg / n;
    }
    let mu_p = pred_fg / n;
    let mu_g = gt_fg as f64 / n;
    let cell = |fm: f64, g: f64| {
        let a = fm - mu_p;
        let b = g - mu_g;
        let align = 2.0 * a * b / (a * a + b * b + EPS);
        (align + 1.0).powi(2) / 4.0
    };
    let sum = c.tp as f64 * cell(1.0, 1.0)
        + c.fp as f64 * cell(1.0, 0.0)
        + c.fn_ as f64 * cell(0.0, 1.0)
        + c.tn as f64 * cell(0.0, 0.0);
    sum / n
}

pub fn e_measure_max(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    Ok(confusion_sweep(pred, gt)?
        .iter()
        .map(e_from_confusion)
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn e_measure_max_over(pred: &GrayMap, gt: &GrayMap, ts: &[f64]) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for &t in ts {
        best = best.max(e_from_confusion(&confusion_at(pred, gt, t)?));
    }
    Ok(best)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation, zero for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std_dev(values) + EPS)
}

fn s_object(pred: &GrayMap, gt: &GrayMap) -> f64 {
    let fg: Vec<f64> = pred.data.iter().zip(&gt.data).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(_, &g)| g != 1.0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let u = fg.len() as f64 / pred.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Foreground centroid as 1-based `(column, row)`, rounded half away from
/// zero.
fn centroid(gt: &GrayMap) -> (usize, usize) {
    let total: f64 = gt.data.iter().sum();
    if total == 0.0 {
        return (
            (gt.width as f64 / 2.0).round() as usize,
            (gt.height as f64 / 2.0).round() as usize,
        );
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..gt.height {
        for x in 0..gt.width {
            let v = gt.get(y, x);
            sx += v * (x + 1) as f64;
            sy += v * (y + 1) as f64;
        }
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn region(m: &GrayMap, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    rows.flat_map(|y| cols.clone().map(move |x| (y, x)))
        .map(|(y, x)| m.get(y, x))
        .collect()
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let x = mean(p);
    let y = mean(g);
    let d = n - 1.0 + EPS;
    let sx2 = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d;
    let sy2 = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &GrayMap, gt: &GrayMap) -> f64 {
    let (cx, cy) = centroid(gt);
    let (h, w) = (gt.height, gt.width);
    let area = (h * w) as f64;
    let quads = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let weights = [w1, w2, w3, 1.0 - w1 - w2 - w3];
    quads
        .into_iter()
        .zip(weights)
        .map(|((rows, cols), wt)| {
            let p = region(pred, rows.clone(), cols.clone());
            let g = region(gt, rows, cols);
            wt * region_ssim(&p, &g)
        })
        .sum()
}

pub fn s_measure(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let y = mean(&gt.data);
    let q = if y == 0.0 {
        1.0 - mean(&pred.data)
    } else if y == 1.0 {
        mean(&pred.data)
    } else {
        ALPHA * s_object(pred, gt) + (1.0 - ALPHA) * s_region(pred, gt)
    };
    Ok(q.clamp(0.0, 1.0))
}

/// All metrics of one image, with the threshold curves behind the maxima.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub s_measure: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_curve: Vec<f64>,
    pub e_curve: Vec<f64>,
}

/// Full report for an image with a non-empty mask.
pub fn evaluate(pred: &GrayMap, gt: &GrayMap) -> Result<MetricReport> {
    require_foreground(gt)?;
    let sweep = confusion_sweep(pred, gt)?;
    let (mut precision, mut recall, mut f_curve) = (Vec::new(), Vec::new(), Vec::new());
    for c in &sweep {
        let (p, r, f) = f_from_confusion(c);
        precision.push(p);
        recall.push(r);
        f_curve.push(f);
    }
    let e_curve: Vec<f64> = sweep.iter().map(e_from_confusion).collect();
    Ok(MetricReport {
        mae: mae(pred, gt)?,
        f_max: f_curve.iter().copied().fold(0.0, f64::max),
        e_max: e_curve.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        s_measure: s_measure(pred, gt)?,
        precision,
        recall,
        f_curve,
        e_curve,
    })
}

/// Metrics of one image; F/E/S are absent when its mask is empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mae: f64,
    pub f_max: Option<f64>,
    pub e_max: Option<f64>,
    pub s_measure: Option<f64>,
}

pub fn image_metrics(name: &str, pred: &GrayMap, gt: &GrayMap) -> Result<ImageMetrics> {
    let m = mae(pred, gt)?;
    match evaluate(pred, gt) {
        Ok(r) => Ok(ImageMetrics {
            name: name.to_owned(),
            mae: m,
            f_max: Some(r.f_max),
            e_max: Some(r.e_max),
            s_measure: Some(r.s_measure),
        }),
        Err(Error::EmptyGroundTruth) => Ok(ImageMetrics {
            name: name.to_owned(),
            mae: m,
            f_max: None,
            e_max: None,
            s_measure: None,
        }),
        Err(e) => Err(e),
    }
}

/// Dataset means: MAE over every image, F/E/S over images with a non-empty
/// mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mae: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub s_measure: f64,
    pub images: usize,
    pub skipped_empty: usize,
}

pub fn summarize(rows: &[ImageMetrics]) -> Summary {
    let n = rows.len();
    let scored: Vec<&ImageMetrics> = rows.iter().filter(|r| r.f_max.is_some()).collect();
    let k = scored.len();
    let avg = |f: &dyn Fn(&ImageMetrics) -> f64, items: &[&ImageMetrics]| {
        if items.is_empty() {
            0.0
        } else {
            items.iter().map(|r| f(r)).sum::<f64>() / items.len() as f64
        }
    };
    let all: Vec<&ImageMetrics> = rows.iter().collect();
    Summary {
        mae: avg(&|r| r.mae, &all),
        f_max: avg(&|r| r.f_max.unwrap_or(0.0), &scored),
        e_max: avg(&|r| r.e_max.unwrap_or(0.0), &scored),
        s_measure: avg(&|r| r.s_measure.unwrap_or(0.0), &scored),
        images: n,
        skipped_empty: n - k,
    }
}

#[derive(Clone, Debug)]
pub struct DatasetReport {
    pub rows: Vec<ImageMetrics>,
    pub summary: Summary,
    /// Stems present in only one directory, or pairs whose sizes differ.
    pub unmatched: Vec<String>,
}

fn image_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

/// Grayscale image scaled to `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<GrayMap> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    GrayMap::new(h as usize, w as usize, data)
}

/// Ground-truth mask, foreground where the 8-bit value is at least 128.
pub fn load_mask(path: &Path) -> Result<GrayMap> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    GrayMap::new(h as usize, w as usize, data)
}

/// Scores every prediction in `pred_dir` against the same-stem mask in
/// `gt_dir`.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<DatasetReport> {
    let preds = image_stems(pred_dir)?;
    let gts = image_stems(gt_dir)?;
    let mut unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    let mut rows = Vec::new();
    for (stem, pred_path) in &preds {
        let Some(gt_path) = gts.get(stem) else { continue };
        let pred = load_gray(pred_path)?;
        let gt = load_mask(gt_path)?;
        if (pred.height, pred.width) != (gt.height, gt.width) {
            log::warn!(
                "{}: {}×{} prediction for {}×{} mask, skipped",
                stem,
                pred.height,
                pred.width,
                gt.height,
                gt.width
            );
            unmatched.push(stem.clone());
            continue;
        }
        rows.push(image_metrics(stem, &pred, &gt)?);
    }
    for stem in &unmatched {
        log::warn!("{stem}: no counterpart, skipped");
    }
    unmatched.sort();
    Ok(DatasetReport {
        summary: summarize(&rows),
        rows,
        unmatched,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// Per-image rows followed by a `mean` summary row.
pub fn write_metrics_csv(path: &Path, report: &DatasetReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut put = |rec: [String; 5]| w.write_record(&rec).map_err(|e| Error::Load(format!("{}: {e}", path.display())));
    put(["name", "mae", "f_max", "e_max", "s_measure"].map(String::from))?;
    for r in &report.rows {
        put([
            r.name.clone(),
            format!("{:.6}", r.mae),
            fmt_opt(r.f_max),
            fmt_opt(r.e_max),
            fmt_opt(r.s_measure),
        ])?;
    }
    let s = &report.summary;
    put([
        "mean".to_owned(),
        format!("{:.6}", s.mae),
        format!("{:.6}", s.f_max),
        format!("{:.6}", s.e_max),
        format!("{:.6}", s.s_measure),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f64]]) -> GrayMap {
        let h = rows.len();
        let w = rows[0].len();
        GrayMap::new(h, w, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn mae_hand_example() {
        let p = grid(&[&[0.2, 0.4], &[0.6, 0.8]]);
        let g = grid(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!((mae(&p, &g).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn f_measure_half_precision_example() {
        let g = grid(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let p = grid(&[&[1.0, 1.0], &[0.0, 0.0]]);
        let c = confusion_at(&p, &g, 0.5).unwrap();
        let (pr, re, f) = f_from_confusion(&c);
        assert_eq!((pr, re), (0.5, 1.0));
        assert!((f - 1.3 * 0.5 / 1.15).abs() < 1e-12);
    }

    #[test]
    fn threshold_bins_are_exact() {
        for k in 0..256usize {
            let t = k as f64 / 255.0;
            assert_eq!(threshold_bin(t), Some(k));
            if k > 0 {
                assert_eq!(threshold_bin(t - 1e-12), Some(k - 1));
            }
        }
        assert_eq!(threshold_bin(-0.1), None);
        assert_eq!(threshold_bin(1.5), Some(255));
    }

    #[test]
    fn empty_mask_is_reported() {
        let g = GrayMap::from_fn(3, 3, |_, _| 0.0);
        let p = GrayMap::from_fn(3, 3, |_, _| 0.3);
        assert!(matches!(f_measure_max(&p, &g), Err(Error::EmptyGroundTruth)));
        let m = image_metrics("x", &p, &g).unwrap();
        assert!(m.f_max.is_none());
        assert!((m.mae - 0.3).abs() < 1e-12);
    }

    #[test]
    fn all_ones_alignment_is_perfect() {
        let g = GrayMap::from_fn(4, 4, |_, _| 1.0);
        assert_eq!(e_measure_max(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn perfect_prediction_is_fixed_point() {
        let g = GrayMap::from_fn(8, 8, |y, x| if (2..6).contains(&y) && x < 5 { 1.0 } else { 0.0 });
        let r = evaluate(&g, &g).unwrap();
        assert_eq!((r.mae, r.f_max), (0.0, 1.0));
        assert!((r.e_max - 1.0).abs() < 1e-12);
        assert!((r.s_measure - 1.0).abs() < 1e-12);
    }

    #[test]
    fn summary_skips_empty_masks_for_fes() {
        let rows = vec![
            ImageMetrics {
                name: "a".into(),
                mae: 0.1,
                f_max: Some(0.8),
                e_max: Some(0.9),
                s_measure: Some(0.7),
            },
            ImageMetrics {
                name: "b".into(),
                mae: 0.3,
                f_max: None,
                e_max: None,
                s_measure: None,
            },
        ];
        let s = summarize(&rows);
        assert!((s.mae - 0.2).abs() < 1e-12);
        assert_eq!((s.f_max, s.e_max, s.s_measure, s.skipped_empty), (0.8, 0.9, 0.7, 1));
    }
}
