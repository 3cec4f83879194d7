#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seffsal_core::autograd::testing::{relative_error, spread_indices, FD_STEP};
use seffsal_core::autograd::{Graph, ParamStore, Shape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Replaces every parameter with random values so that biases and
/// normalization affines are exercised too.
pub fn randomize(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_owned();
        for v in store.get_mut(id).data_mut() {
            let r: f64 = rng.gen_range(-1.0..1.0);
            *v = if name.ends_with("gamma") { 1.0 + 0.3 * r } else { *v + scale * r };
        }
    }
}

/// `Σ x ⊙ probe`.
pub fn probe_sum(g: &mut Graph, x: Var, probe: &Tensor) -> Var {
    let p = g.constant(probe.clone());
    let m = g.mul(x, p).expect("probe shape");
    g.sum_all(m)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    /// Entries whose difference quotients at `h` and `h / 10` disagree,
    /// i.e. where the step straddles a ReLU or L1 kink.
    pub kinks: usize,
}

/// Compares tape gradients of the scalar `build` against central
/// differences, for up to `per_tensor` entries of every input and every
/// parameter tensor. Each entry is differenced at `FD_STEP` and
/// `FD_STEP / 10` and scored by the closer quotient.
pub fn gradcheck(
    store: &ParamStore,
    inputs: &[Tensor],
    per_tensor: usize,
    build: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
) -> GradReport {
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, store, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, store, &vars);
    let grads = g.backward(out).expect("backward");

    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
        kinks: 0,
    };
    let note = |what: String, a: f64, coarse: f64, fine: f64, report: &mut GradReport| {
        if relative_error(coarse, fine) > 1e-4 {
            report.kinks += 1;
        }
        let (e, n) = [(relative_error(a, coarse), coarse), (relative_error(a, fine), fine)]
            .into_iter()
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .expect("two quotients");
        report.checked += 1;
        if e > report.max_rel || !e.is_finite() {
            report.max_rel = if e.is_finite() { e } else { f64::INFINITY };
            report.worst = format!("{what}: analytic {a:e} numeric {n:e}");
        }
    };

    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in spread_indices(x.len(), per_tensor) {
            let quotient = |h: f64| {
                let mut probe = inputs.to_vec();
                probe[k].data_mut()[i] += h;
                let plus = eval(store, &probe);
                probe[k].data_mut()[i] -= 2.0 * h;
                let minus = eval(store, &probe);
                (plus - minus) / (2.0 * h)
            };
            let (coarse, fine) = (quotient(FD_STEP), quotient(FD_STEP / 10.0));
            note(format!("input {k}[{i}]"), analytic.data()[i], coarse, fine, &mut report);
        }
    }
    for id in store.ids() {
        let t = store.get(id);
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut perturbed = store.clone();
        for i in spread_indices(t.len(), per_tensor) {
            let orig = t.data()[i];
            let mut quotient = |h: f64| {
                perturbed.get_mut(id).data_mut()[i] = orig + h;
                let plus = eval(&perturbed, inputs);
                perturbed.get_mut(id).data_mut()[i] = orig - h;
                let minus = eval(&perturbed, inputs);
                perturbed.get_mut(id).data_mut()[i] = orig;
                (plus - minus) / (2.0 * h)
            };
            let (coarse, fine) = (quotient(FD_STEP), quotient(FD_STEP / 10.0));
            note(format!("{}[{i}]", store.name(id)), analytic.data()[i], coarse, fine, &mut report);
        }
    }
    report
}

// Reference metric implementations, written directly from the textbook
// definitions over pixel grids (no confusion-count shortcuts).

pub const BETA_SQ: f64 = 0.3;

fn binarize(pred: &[f64], t: f64) -> Vec<f64> {
    pred.iter().map(|&p| if p >= t { 1.0 } else { 0.0 }).collect()
}

pub fn oracle_f_max(pred: &[f64], gt: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for k in 0..256 {
        let b = binarize(pred, k as f64 / 255.0);
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, g) in b.iter().zip(gt) {
            match (*p == 1.0, *g == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rec = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        let d = BETA_SQ * prec + rec;
        let f = if d == 0.0 { 0.0 } else { (1.0 + BETA_SQ) * prec * rec / d };
        best = best.max(f);
    }
    best
}

/// Enhanced alignment of one binary map against the mask, pixel by pixel.
pub fn oracle_e_binary(fm: &[f64], gt: &[f64]) -> f64 {
    let n = gt.len() as f64;
    let gt_sum: f64 = gt.iter().sum();
    if gt_sum == 0.0 {
        return fm.iter().map(|v| 1.0 - v).sum::<f64>() / n;
    }
    if gt_sum == n {
        return fm.iter().sum::<f64>() / n;
    }
    let mf = fm.iter().sum::<f64>() / n;
    let mg = gt_sum / n;
    let mut total = 0.0;
    for (f, g) in fm.iter().zip(gt) {
        let a = f - mf;
        let b = g - mg;
        let xi = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
        total += (xi + 1.0) * (xi + 1.0) / 4.0;
    }
    total / n
}

pub fn oracle_e_max(pred: &[f64], gt: &[f64]) -> f64 {
    (0..256)
        .map(|k| oracle_e_binary(&binarize(pred, k as f64 / 255.0), gt))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Structure measure on an `h × w` row-major grid.
pub fn oracle_s(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let n = (h * w) as f64;
    let y = gt.iter().sum::<f64>() / n;
    let q = if y == 0.0 {
        1.0 - pred.iter().sum::<f64>() / n
    } else if y == 1.0 {
        pred.iter().sum::<f64>() / n
    } else {
        0.5 * oracle_s_object(pred, gt) + 0.5 * oracle_s_region(pred, gt, h, w)
    };
    q.max(0.0).min(1.0)
}

fn stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn oracle_s_object(pred: &[f64], gt: &[f64]) -> f64 {
    let eps = f64::EPSILON;
    let score = |vals: Vec<f64>| {
        if vals.is_empty() {
            return 0.0;
        }
        let (m, sd) = stats(&vals);
        2.0 * m / (m * m + 1.0 + sd + eps)
    };
    let fg: Vec<f64> = (0..gt.len()).filter(|&i| gt[i] == 1.0).map(|i| pred[i]).collect();
    let bg: Vec<f64> = (0..gt.len()).filter(|&i| gt[i] != 1.0).map(|i| 1.0 - pred[i]).collect();
    let u = fg.len() as f64 / gt.len() as f64;
    u * score(fg) + (1.0 - u) * score(bg)
}

fn oracle_ssim(p: &[f64], g: &[f64]) -> f64 {
    let eps = f64::EPSILON;
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in p.iter().zip(g) {
        sx += (a - x) * (a - x);
        sy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let d = n - 1.0 + eps;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + eps)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn oracle_s_region(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    // 1-based rounded centroid of the mask.
    let total: f64 = gt.iter().sum();
    let mut cx = 0.0;
    let mut cy = 0.0;
    for r in 0..h {
        for c in 0..w {
            cx += gt[r * w + c] * (c + 1) as f64;
            cy += gt[r * w + c] * (r + 1) as f64;
        }
    }
    let x = (cx / total).round() as usize;
    let y = (cy / total).round() as usize;
    let area = (h * w) as f64;
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| -> (Vec<f64>, Vec<f64>) {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                p.push(pred[r * w + c]);
                g.push(gt[r * w + c]);
            }
        }
        (p, g)
    };
    let parts = [
        (block(0, y, 0, x), (x * y) as f64 / area),
        (block(0, y, x, w), ((w - x) * y) as f64 / area),
        (block(y, h, 0, x), (x * (h - y)) as f64 / area),
    ];
    let w4 = 1.0 - parts.iter().map(|(_, wt)| wt).sum::<f64>();
    let mut s = 0.0;
    for ((p, g), wt) in parts.into_iter().chain(std::iter::once((block(y, h, x, w), w4))) {
        if !p.is_empty() {
            s += wt * oracle_ssim(&p, &g);
        }
    }
    s
}
