//! Scale and fusion ablations: the full network, the two reduced-scale
//! variants and the full network with CBR stacks in place of SEFF blocks.

use std::path::Path;

use crate::data::{make_pyramid, synth_generate, Sample};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::metrics::{image_metrics, summarize, GrayMap, ImageMetrics, Summary};
use crate::msnet::{MsNet, NetConfig, NetVariant};
use crate::trainer::{train, TrainConfig};

pub const WITHOUT_SEFF: &str = "w/o-SEFF";

/// `(row name, architecture)` for every ablation row, in table order.
pub fn ablation_configs(base: &NetConfig) -> Vec<(&'static str, NetConfig)> {
    let with = |variant, fusion| NetConfig {
        variant,
        fusion,
        ..base.clone()
    };
    vec![
        ("full", with(NetVariant::Full, FusionKind::Seff)),
        ("scale2", with(NetVariant::Scale2, FusionKind::Seff)),
        ("scale1", with(NetVariant::Scale1, FusionKind::Seff)),
        (WITHOUT_SEFF, with(NetVariant::Full, FusionKind::Cbr)),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub metrics: Option<Summary>,
}

/// Synthetic train and test sets drawn from disjoint generator seeds.
pub fn synthetic_split(
    seed: u64,
    train_n: usize,
    test_n: usize,
    canvas: (usize, usize),
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = synth_generate(seed, train_n, canvas)?.samples;
    let test = synth_generate(seed.wrapping_add(1000), test_n, canvas)?.samples;
    Ok((train, test))
}

/// Scores `net` on `samples` with predictions kept in floating point.
pub fn evaluate_samples(net: &MsNet, samples: &[Sample]) -> Result<(Vec<ImageMetrics>, Summary)> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = net.predict(&s.rgb, &s.depth)?;
        rows.push(image_metrics(&s.id, &GrayMap::from_tensor(&pred), &GrayMap::from_tensor(&s.gt))?);
    }
    let summary = summarize(&rows);
    Ok((rows, summary))
}

/// Builds every variant from the same seed; with data, trains each on
/// `train_set` and scores it on `test_set`.
pub fn run_ablation(
    base: &NetConfig,
    cfg: &TrainConfig,
    data: Option<(&[Sample], &[Sample])>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, net_cfg) in ablation_configs(base) {
        let net = MsNet::new(&net_cfg, cfg.seed)?;
        let params = net.num_params();
        let metrics = match data {
            None => None,
            Some((train_set, test_set)) => {
                if train_set.is_empty() || test_set.is_empty() {
                    return Err(Error::contract("ablation needs non-empty train and test sets"));
                }
                let pyramids = train_set
                    .iter()
                    .map(|s| make_pyramid(s, &net_cfg))
                    .collect::<Result<Vec<_>>>()?;
                log::info!("ablation: training {name} ({params} parameters)");
                let trained = train(net, &pyramids, cfg, None)?.trainer.net;
                Some(evaluate_samples(&trained, test_set)?.1)
            }
        };
        rows.push(AblationRow {
            variant: name.to_owned(),
            params,
            metrics,
        });
    }
    Ok(rows)
}

/// One row per variant: name, parameter count and the four metrics (empty
/// when untrained).
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let err = |e: csv::Error| Error::Load(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["variant", "params", "mae", "f_max", "e_max", "s_measure"]).map_err(err)?;
    for r in rows {
        let m = |f: fn(&Summary) -> f64| r.metrics.as_ref().map_or_else(String::new, |s| format!("{:.6}", f(s)));
        w.write_record([
            r.variant.clone(),
            r.params.to_string(),
            m(|s| s.mae),
            m(|s| s.f_max),
            m(|s| s.e_max),
            m(|s| s.s_measure),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fixed-width parameter table.
pub fn param_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<10} {:>12}\n", "variant", "params");
    for r in rows {
        s.push_str(&format!("{:<10} {:>12}\n", r.variant, r.params));
    }
    s
}
