//! Compact pyramid refinement decoder: top-down, one refinement stage per
//! encoder layer, with projected skip connections.

use seffsal_autograd::{ConvSpec, Graph, ParamStore, Var};

use crate::error::{Error, Result};
use crate::nn::{Conv, Init, Norm};

/// Dilation rates of the parallel depthwise branches.
pub const DILATIONS: [usize; 3] = [1, 2, 4];

/// `pw → norm → relu`, then the sum of dilated depthwise 3×3 branches,
/// `norm → relu → pw → norm`, added back onto the first activation.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub in_channels: usize,
    pub out_channels: usize,
    pw_in: Conv,
    norm_in: Norm,
    depthwise: Vec<Conv>,
    norm_mid: Norm,
    pw_out: Conv,
    norm_out: Norm,
}

impl DecoderStage {
    pub fn new(init: &mut Init<'_>, cin: usize, cout: usize) -> Self {
        Self {
            in_channels: cin,
            out_channels: cout,
            pw_in: Conv::pointwise(&mut init.scope("pw_in"), cin, cout),
            norm_in: init.norm("norm_in", cout),
            depthwise: DILATIONS
                .iter()
                .map(|&d| init.conv(&format!("dw{d}"), cout, cout, 3, ConvSpec::depthwise(cout, d), true))
                .collect(),
            norm_mid: init.norm("norm_mid", cout),
            pw_out: Conv::pointwise(&mut init.scope("pw_out"), cout, cout),
            norm_out: init.norm("norm_out", cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.pw_in.forward(g, p, x)?;
        let h = self.norm_in.forward(g, p, h)?;
        let h = g.relu(h);
        let mut branches = None;
        for conv in &self.depthwise {
            let b = conv.forward(g, p, h)?;
            branches = Some(match branches {
                None => b,
                Some(acc) => g.add(acc, b)?,
            });
        }
        let d = self.norm_mid.forward(g, p, branches.expect("at least one branch"))?;
        let d = g.relu(d);
        let y = self.pw_out.forward(g, p, d)?;
        let y = self.norm_out.forward(g, p, y)?;
        let sum = g.add(h, y)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct CprDecoder {
    /// `stages[j]` produces decoder feature `j + 1`.
    pub stages: Vec<DecoderStage>,
    /// `projections[j]` maps encoder layer `j + 1` onto the width of decoder
    /// feature `j + 2`; the deepest layer has none.
    pub projections: Vec<Conv>,
}

impl CprDecoder {
    /// `encoder_channels[j]` and `decoder_channels[j]` describe layer `j + 1`;
    /// the deepest stage consumes a `top_channels`-wide fused feature.
    pub fn new(
        init: &mut Init<'_>,
        encoder_channels: &[usize],
        decoder_channels: &[usize],
        top_channels: usize,
    ) -> Result<Self> {
        let depth = decoder_channels.len();
        if depth == 0 || encoder_channels.len() != depth {
            return Err(Error::config(
                "decoder_channels",
                format!("{depth} decoder widths for {} encoder layers", encoder_channels.len()),
            ));
        }
        if decoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("decoder_channels", "widths must be positive"));
        }
        let stages = (0..depth)
            .map(|j| {
                let cin = if j + 1 == depth {
                    top_channels
                } else {
                    decoder_channels[j + 1]
                };
                DecoderStage::new(&mut init.scope(&format!("stage{}", j + 1)), cin, decoder_channels[j])
            })
            .collect();
        let projections = (0..depth - 1)
            .map(|j| {
                Conv::pointwise(
                    &mut init.scope(&format!("project{}", j + 1)),
                    encoder_channels[j],
                    decoder_channels[j + 1],
                )
            })
            .collect();
        Ok(Self { stages, projections })
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// Returns decoder features ordered shallow to deep (`[F_1, …, F_L]`);
    /// `F_j` has the spatial size of `skips[j]`.
    pub fn decode(&self, g: &mut Graph, p: &ParamStore, skips: &[Var], fused_top: Var) -> Result<Vec<Var>> {
        let depth = self.depth();
        if skips.len() != depth {
            return Err(Error::contract(format!("decoder expects {depth} skip features, got {}", skips.len())));
        }
        let top_shape = g.shape(fused_top);
        let deepest = g.shape(skips[depth - 1]);
        if top_shape.spatial() != deepest.spatial() {
            return Err(Error::contract(format!(
                "fused top {top_shape} does not match deepest encoder layer {deepest}"
            )));
        }
        let mut out = vec![None; depth];
        let mut current = self.stages[depth - 1].forward(g, p, fused_top)?;
        out[depth - 1] = Some(current);
        for j in (0..depth - 1).rev() {
            let (h, w) = g.shape(skips[j]).spatial();
            let up = g.resize_bilinear(current, h, w)?;
            let skip = self.projections[j].forward(g, p, skips[j])?;
            let merged = g.add(up, skip)?;
            current = self.stages[j].forward(g, p, merged)?;
            if g.shape(current).spatial() != (h, w) {
                return Err(Error::contract(format!(
                    "decoder stage {} produced {} for skip {h}×{w}",
                    j + 1,
                    g.shape(current)
                )));
            }
            out[j] = Some(current);
        }
        Ok(out.into_iter().map(|v| v.expect("every stage ran")).collect())
    }
}
