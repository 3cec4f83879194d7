//! Three-scale RGB-D saliency network.
//!
//! Scales are numbered 1 (finest input) to 3 (coarsest) and evaluated in the
//! order 3 → 2 → 1. Each scale owns independent RGB and depth backbones, a
//! layer-4 RGB-D fusion block, a decoder and four saliency heads. Scales 1
//! and 2 additionally fuse every decoder feature with the matching feature of
//! the next coarser scale. Fusion blocks are guided by saliency maps that are
//! already available when they run:
//!
//! | scale | guidance                                        |
//! |-------|-------------------------------------------------|
//! | 3     | zeros                                           |
//! | 2     | `S_3 = cat(S_31 … S_34)`                        |
//! | 1     | `Conv1x1(cat(S_21 … S_24, S_31 … S_34)) → 4 ch` |

use std::collections::BTreeMap;
use std::fmt;

use seffsal_autograd::{resize_bilinear, Graph, ParamStore, Shape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Modality};
use crate::decoder::CprDecoder;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind};
use crate::nn::{Conv, Init};
use crate::seff::{DEFAULT_REDUCTION, GUIDANCE_CHANNELS};

pub const NUM_SCALES: usize = 3;
pub const NUM_LAYERS: usize = 4;

/// Which scales are instantiated. Scale 3 seeds all guidance and is always
/// present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NetVariant {
    #[default]
    Full,
    Scale2,
    Scale1,
}

impl NetVariant {
    pub const ALL: [NetVariant; 3] = [Self::Full, Self::Scale2, Self::Scale1];

    /// Active scales in evaluation order (coarsest first).
    pub fn active_scales(self) -> &'static [usize] {
        match self {
            Self::Full => &[3, 2, 1],
            Self::Scale2 => &[3, 2],
            Self::Scale1 => &[3],
        }
    }

    pub fn is_active(self, scale: usize) -> bool {
        self.active_scales().contains(&scale)
    }

    /// Finest active scale; its layer-1 map is the prediction.
    pub fn output_scale(self) -> usize {
        *self.active_scales().last().expect("non-empty")
    }

    pub fn from_scales(scales: &[usize]) -> Result<Self> {
        let mut s = scales.to_vec();
        s.sort_unstable();
        s.dedup();
        match s.as_slice() {
            [3] => Ok(Self::Scale1),
            [2, 3] => Ok(Self::Scale2),
            [1, 2, 3] => Ok(Self::Full),
            other if !other.contains(&3) => Err(Error::config(
                "variant",
                format!("scales {other:?} omit scale 3, which seeds the guidance maps"),
            )),
            other => Err(Error::config(
                "variant",
                format!("scales {other:?} are not a coarse-to-fine chain ending at 3"),
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Scale2 => "scale2",
            Self::Scale1 => "scale1",
        }
    }
}

impl std::str::FromStr for NetVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "scale2" => Ok(Self::Scale2),
            "scale1" => Ok(Self::Scale1),
            other => Err(format!("unknown variant `{other}` (expected full, scale2 or scale1)")),
        }
    }
}

impl fmt::Display for NetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub backbone: BackboneConfig,
    pub decoder_channels: [usize; NUM_LAYERS],
    pub reduction: usize,
    /// Square input side for scales 1, 2, 3.
    pub input_sizes: [usize; NUM_SCALES],
    pub variant: NetVariant,
    pub fusion: FusionKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder_channels: [16, 32, 32, 64],
            reduction: DEFAULT_REDUCTION,
            input_sizes: [352, 176, 88],
            variant: NetVariant::Full,
            fusion: FusionKind::Seff,
        }
    }
}

impl NetConfig {
    pub fn input_size(&self, scale: usize) -> usize {
        self.input_sizes[scale - 1]
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.decoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("decoder_channels", "widths must be positive"));
        }
        let widths = self.decoder_channels.iter().chain(std::iter::once(&self.backbone.stage_channels[3]));
        for &c in widths {
            if self.reduction == 0 || c % self.reduction != 0 {
                return Err(Error::config(
                    "reduction",
                    format!("reduction {} must divide every fused width (got {c})", self.reduction),
                ));
            }
        }
        if self.input_sizes.iter().any(|&s| s < crate::backbone::MIN_INPUT) {
            return Err(Error::config(
                "input_sizes",
                format!("every input side must be at least {}", crate::backbone::MIN_INPUT),
            ));
        }
        Ok(())
    }
}

/// Where a guidance map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceSource {
    Zeros,
    Scale3,
    Scales2And3,
}

#[derive(Clone, Copy, Debug)]
pub struct GuidanceMap {
    pub var: Var,
    pub source: GuidanceSource,
}

/// The saliency maps `S_ij` produced by one forward pass.
#[derive(Clone, Debug, Default)]
pub struct SaliencyBundle {
    maps: BTreeMap<(usize, usize), Var>,
}

impl SaliencyBundle {
    pub fn get(&self, scale: usize, layer: usize) -> Option<Var> {
        self.maps.get(&(scale, layer)).copied()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// `((scale, layer), map)` in ascending `(scale, layer)` order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), Var)> + '_ {
        self.maps.iter().map(|(&k, &v)| (k, v))
    }

    pub fn insert(&mut self, scale: usize, layer: usize, v: Var) {
        self.maps.insert((scale, layer), v);
    }

    pub fn values(&self, g: &Graph) -> BTreeMap<(usize, usize), Tensor> {
        self.iter().map(|(k, v)| (k, g.value(v).clone())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WiringEvent {
    Write(String),
    Read(String),
}

/// Ordered log of named intermediate features and maps produced and consumed
/// during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct WiringTrace {
    pub events: Vec<WiringEvent>,
}

impl WiringTrace {
    fn write(&mut self, item: String) {
        self.events.push(WiringEvent::Write(item));
    }

    fn read(&mut self, item: String) {
        self.events.push(WiringEvent::Read(item));
    }

    /// Every read is preceded by a write of the same item, and nothing is
    /// written twice.
    pub fn check_acyclic(&self) -> Result<()> {
        let mut written = std::collections::HashSet::new();
        for e in &self.events {
            match e {
                WiringEvent::Write(item) => {
                    if !written.insert(item.as_str()) {
                        return Err(Error::Sequencing(format!("{item} written twice")));
                    }
                }
                WiringEvent::Read(item) => {
                    if !written.contains(item.as_str()) {
                        return Err(Error::Sequencing(format!("{item} read before it was written")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Items read between the write of `before` and the write of `target`.
    pub fn inputs_of(&self, target: &str) -> Vec<String> {
        let end = self
            .events
            .iter()
            .position(|e| *e == WiringEvent::Write(target.to_owned()));
        let Some(end) = end else { return Vec::new() };
        let start = self.events[..end]
            .iter()
            .rposition(|e| matches!(e, WiringEvent::Write(_)))
            .map_or(0, |i| i + 1);
        self.events[start..end]
            .iter()
            .filter_map(|e| match e {
                WiringEvent::Read(s) => Some(s.clone()),
                WiringEvent::Write(_) => None,
            })
            .collect()
    }
}

pub fn cpr_name(scale: usize, layer: usize) -> String {
    format!("F{scale}{layer}^CPR")
}

pub fn csf_name(scale: usize, layer: usize) -> String {
    format!("F{scale}{layer}^CSF")
}

pub fn map_name(scale: usize, layer: usize) -> String {
    format!("S{scale}{layer}")
}

/// Intermediate features of a forward pass, keyed by `(scale, layer)`.
#[derive(Clone, Debug, Default)]
pub struct FeatureLog {
    pub fused_top: BTreeMap<usize, Var>,
    pub cpr: BTreeMap<(usize, usize), Var>,
    pub csf: BTreeMap<(usize, usize), Var>,
    /// Guidance fed to the RGB-D fusion of each scale.
    pub rgbd_guidance: BTreeMap<usize, GuidanceMap>,
    /// Guidance fed to each cross-scale fusion.
    pub csf_guidance: BTreeMap<(usize, usize), GuidanceMap>,
}

pub struct ForwardOutput {
    pub bundle: SaliencyBundle,
    pub trace: WiringTrace,
    pub features: FeatureLog,
}

/// RGB `[N, 3, s, s]` and depth `[N, 1, s, s]` for one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleInput {
    pub scale: usize,
    pub rgb: Tensor,
    pub depth: Tensor,
}

/// Guidance projection `cat(S_2, S_3)` (8 channels) → 4 channels.
#[derive(Clone, Debug)]
pub struct GuidanceProjectors {
    pub rgbd: Conv,
    pub csf: Vec<Conv>,
}

#[derive(Clone, Debug)]
pub struct ScaleNet {
    pub scale: usize,
    pub rgb: Backbone,
    pub depth: Backbone,
    pub rgbd_fusion: Fusion,
    pub decoder: CprDecoder,
    /// Cross-scale fusion per layer; empty for scale 3.
    pub csf: Vec<Fusion>,
    pub heads: Vec<Conv>,
    pub projectors: Option<GuidanceProjectors>,
}

impl ScaleNet {
    fn new(init: &mut Init<'_>, scale: usize, config: &NetConfig) -> Result<Self> {
        let mut s = init.scope(&format!("s{scale}"));
        let enc = config.backbone.stage_channels;
        let dec = config.decoder_channels;
        let rgb = Backbone::new(&mut s.scope("rgb"), &config.backbone)?;
        let depth = Backbone::new(&mut s.scope("depth"), &config.backbone)?;
        let rgbd_fusion = Fusion::new(&mut s.scope("rgbd_fusion"), config.fusion, enc[3], config.reduction)?;
        let decoder = CprDecoder::new(&mut s.scope("decoder"), &enc, &dec, enc[3])?;
        let csf = if scale == 3 {
            Vec::new()
        } else {
            (0..NUM_LAYERS)
                .map(|j| Fusion::new(&mut s.scope(&format!("csf{}", j + 1)), config.fusion, dec[j], config.reduction))
                .collect::<Result<_>>()?
        };
        let heads = (0..NUM_LAYERS)
            .map(|j| Conv::pointwise(&mut s.scope(&format!("head{}", j + 1)), dec[j], 1))
            .collect();
        let projectors = (scale == 1).then(|| {
            let guide = 2 * GUIDANCE_CHANNELS;
            GuidanceProjectors {
                rgbd: Conv::pointwise(&mut s.scope("guide_rgbd"), guide, GUIDANCE_CHANNELS),
                csf: (0..NUM_LAYERS)
                    .map(|j| Conv::pointwise(&mut s.scope(&format!("guide_csf{}", j + 1)), guide, GUIDANCE_CHANNELS))
                    .collect(),
            }
        });
        Ok(Self {
            scale,
            rgb,
            depth,
            rgbd_fusion,
            decoder,
            csf,
            heads,
            projectors,
        })
    }

    fn fusion_sites(&self) -> impl Iterator<Item = &Fusion> {
        std::iter::once(&self.rgbd_fusion).chain(&self.csf)
    }
}

/// Builds the guidance map consumed by fusion blocks of `for_scale`, resized
/// to `target`.
#[allow(clippy::too_many_arguments)]
pub fn build_guidance(
    g: &mut Graph,
    p: &ParamStore,
    bundle: &SaliencyBundle,
    for_scale: usize,
    batch: usize,
    target: (usize, usize),
    projector: Option<&Conv>,
    trace: &mut WiringTrace,
) -> Result<GuidanceMap> {
    let (h, w) = target;
    let gather = |g: &mut Graph, scale: usize, trace: &mut WiringTrace| -> Result<Vec<Var>> {
        (1..=NUM_LAYERS)
            .map(|j| {
                let m = bundle.get(scale, j).ok_or_else(|| {
                    Error::Sequencing(format!(
                        "guidance for scale {for_scale} needs {} before it was produced",
                        map_name(scale, j)
                    ))
                })?;
                trace.read(map_name(scale, j));
                Ok(g.resize_bilinear(m, h, w)?)
            })
            .collect()
    };
    match for_scale {
        3 => {
            let zeros = Tensor::zeros(Shape::new(batch, GUIDANCE_CHANNELS, h, w));
            Ok(GuidanceMap {
                var: g.constant(zeros),
                source: GuidanceSource::Zeros,
            })
        }
        2 => {
            let maps = gather(g, 3, trace)?;
            Ok(GuidanceMap {
                var: g.concat_channels(&maps)?,
                source: GuidanceSource::Scale3,
            })
        }
        1 => {
            let mut maps = gather(g, 2, trace)?;
            maps.extend(gather(g, 3, trace)?);
            let cat = g.concat_channels(&maps)?;
            let projector =
                projector.ok_or_else(|| Error::contract("scale-1 guidance requires a 1×1 projection"))?;
            Ok(GuidanceMap {
                var: projector.forward(g, p, cat)?,
                source: GuidanceSource::Scales2And3,
            })
        }
        other => Err(Error::contract(format!("no scale {other}"))),
    }
}

/// Layer-4 RGB-D fusion.
pub fn fuse_rgbd(
    fusion: &Fusion,
    g: &mut Graph,
    p: &ParamStore,
    f_rgb: Var,
    f_depth: Var,
    guidance: &GuidanceMap,
) -> Result<Var> {
    fusion.forward(g, p, f_rgb, f_depth, guidance.var)
}

/// Cross-scale fusion of a decoder feature with the next coarser scale's
/// feature, which is resized to the fine feature's size first.
#[allow(clippy::too_many_arguments)]
pub fn fuse_cross_scale(
    fusion: &Fusion,
    g: &mut Graph,
    p: &ParamStore,
    scale: usize,
    f_fine: Var,
    f_coarse: Var,
    guidance: &GuidanceMap,
) -> Result<Var> {
    if scale != 1 && scale != 2 {
        return Err(Error::contract(format!(
            "cross-scale fusion runs on scales 1 and 2 only, not scale {scale}"
        )));
    }
    let (h, w) = g.shape(f_fine).spatial();
    let coarse = g.resize_bilinear(f_coarse, h, w)?;
    fusion.forward(g, p, f_fine, coarse, guidance.var)
}

/// `σ(Conv1x1(feature) → 1 channel)`.
pub fn predict_head(g: &mut Graph, p: &ParamStore, feature: Var, head: &Conv) -> Result<Var> {
    let logits = head.forward(g, p, feature)?;
    Ok(g.sigmoid(logits))
}

#[derive(Clone, Debug)]
pub struct MsNet {
    config: NetConfig,
    pub params: ParamStore,
    /// In evaluation order: scale 3 first.
    scales: Vec<ScaleNet>,
}

/// Constructs only the modules `config.variant` needs.
pub fn build_variant(config: &NetConfig, seed: u64) -> Result<MsNet> {
    MsNet::new(config, seed)
}

impl MsNet {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let scales = config
            .variant
            .active_scales()
            .iter()
            .map(|&s| ScaleNet::new(&mut init, s, config))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            params,
            scales,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn scale(&self, scale: usize) -> Option<&ScaleNet> {
        self.scales.iter().find(|s| s.scale == scale)
    }

    pub fn scales(&self) -> &[ScaleNet] {
        &self.scales
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_fusion_sites(&self) -> usize {
        self.scales.iter().map(|s| s.fusion_sites().count()).sum()
    }

    /// Parameter count of every fusion site, keyed by its name prefix.
    pub fn fusion_site_params(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for s in &self.scales {
            let mut prefixes = vec![format!("s{}.rgbd_fusion.", s.scale)];
            prefixes.extend((1..=s.csf.len()).map(|j| format!("s{}.csf{j}.", s.scale)));
            for prefix in prefixes {
                let n = self.params.num_scalars_with_prefix(&prefix);
                out.push((prefix.trim_end_matches('.').to_owned(), n));
            }
        }
        out
    }

    pub fn forward(&self, g: &mut Graph, inputs: &[ScaleInput]) -> Result<ForwardOutput> {
        self.forward_with(g, &self.params, inputs)
    }

    /// [`forward`](Self::forward) with parameter values taken from `p`,
    /// which must have this network's layout.
    pub fn forward_with(&self, g: &mut Graph, p: &ParamStore, inputs: &[ScaleInput]) -> Result<ForwardOutput> {
        if p.len() != self.params.len() {
            return Err(Error::contract(format!(
                "parameter store holds {} tensors, network has {}",
                p.len(),
                self.params.len()
            )));
        }
        let mut bundle = SaliencyBundle::default();
        let mut trace = WiringTrace::default();
        let mut features = FeatureLog::default();
        let batch = inputs.first().map_or(0, |i| i.rgb.shape().n);
        for net in &self.scales {
            let i = net.scale;
            let input = inputs
                .iter()
                .find(|x| x.scale == i)
                .ok_or_else(|| Error::contract(format!("missing input for scale {i}")))?;
            let side = self.config.input_size(i);
            let want_rgb = Shape::new(batch, 3, side, side);
            if input.rgb.shape() != want_rgb || input.depth.shape() != want_rgb.with_channels(1) {
                return Err(Error::contract(format!(
                    "scale {i} expects rgb {want_rgb} and depth {}, got {} and {}",
                    want_rgb.with_channels(1),
                    input.rgb.shape(),
                    input.depth.shape()
                )));
            }
            let rgb = g.constant(input.rgb.clone());
            let depth = g.constant(input.depth.repeat_channels(3));
            let pr = net.rgb.extract_features(g, p, rgb, i, Modality::Rgb)?;
            let pd = net.depth.extract_features(g, p, depth, i, Modality::Depth)?;

            let top = g.shape(pr.layers[3]).spatial();
            let projector = net.projectors.as_ref().map(|pj| &pj.rgbd);
            let guidance = build_guidance(g, p, &bundle, i, batch, top, projector, &mut trace)?;
            let fused = fuse_rgbd(&net.rgbd_fusion, g, p, pr.layers[3], pd.layers[3], &guidance)?;
            features.fused_top.insert(i, fused);
            features.rgbd_guidance.insert(i, guidance);

            let cpr = net.decoder.decode(g, p, &pr.layers, fused)?;
            for (j, &f) in cpr.iter().enumerate() {
                features.cpr.insert((i, j + 1), f);
                trace.write(cpr_name(i, j + 1));
            }

            for (jj, &fine) in cpr.iter().enumerate() {
                let j = jj + 1;
                let feature = if i == NUM_SCALES {
                    trace.read(cpr_name(i, j));
                    fine
                } else {
                    let (coarse, coarse_name) = if i == 2 {
                        (features.cpr.get(&(3, j)), cpr_name(3, j))
                    } else {
                        (features.csf.get(&(2, j)), csf_name(2, j))
                    };
                    let coarse = *coarse.ok_or_else(|| {
                        Error::Sequencing(format!("{} needs {coarse_name}", csf_name(i, j)))
                    })?;
                    let size = g.shape(fine).spatial();
                    let projector = net.projectors.as_ref().map(|pj| &pj.csf[jj]);
                    let guidance = build_guidance(g, p, &bundle, i, batch, size, projector, &mut trace)?;
                    trace.read(cpr_name(i, j));
                    trace.read(coarse_name);
                    let fusedj = fuse_cross_scale(&net.csf[jj], g, p, i, fine, coarse, &guidance)?;
                    trace.write(csf_name(i, j));
                    features.csf.insert((i, j), fusedj);
                    features.csf_guidance.insert((i, j), guidance);
                    trace.read(csf_name(i, j));
                    fusedj
                };
                let map = predict_head(g, p, feature, &net.heads[jj])?;
                trace.write(map_name(i, j));
                bundle.insert(i, j, map);
            }
        }
        Ok(ForwardOutput {
            bundle,
            trace,
            features,
        })
    }

    /// Resizes full-resolution `rgb` `[N, 3, H, W]` and `depth` `[N, 1, H, W]`
    /// to every active scale.
    pub fn scale_inputs(&self, rgb: &Tensor, depth: &Tensor) -> Result<Vec<ScaleInput>> {
        scale_inputs(&self.config, rgb, depth)
    }

    /// Saliency prediction at the input resolution: layer-1 map of the finest
    /// active scale, bilinearly resized to `H × W`.
    pub fn predict(&self, rgb: &Tensor, depth: &Tensor) -> Result<Tensor> {
        let (h, w) = rgb.shape().spatial();
        let inputs = self.scale_inputs(rgb, depth)?;
        let mut g = Graph::inference();
        let out = self.forward(&mut g, &inputs)?;
        let s = out
            .bundle
            .get(self.config.variant.output_scale(), 1)
            .expect("finest layer-1 map");
        Ok(resize_bilinear(g.value(s), h, w)?)
    }
}

pub fn scale_inputs(config: &NetConfig, rgb: &Tensor, depth: &Tensor) -> Result<Vec<ScaleInput>> {
    let (rs, ds) = (rgb.shape(), depth.shape());
    if rs.c != 3 || ds != rs.with_channels(1) {
        return Err(Error::contract(format!("rgb {rs} and depth {ds} are not an aligned pair")));
    }
    config
        .variant
        .active_scales()
        .iter()
        .map(|&scale| {
            let side = config.input_size(scale);
            Ok(ScaleInput {
                scale,
                rgb: resize_bilinear(rgb, side, side)?,
                depth: resize_bilinear(depth, side, side)?,
            })
        })
        .collect()
}
