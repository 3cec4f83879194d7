//! Fusion sites of the network: either a saliency-enhanced block or, for the
//! ablation, a plain stack of CBR blocks with a matched parameter budget.

use seffsal_autograd::{ConvSpec, Graph, ParamStore, Var};

use crate::error::{Error, Result};
use crate::nn::{Cbr, Init};
use crate::seff::{SeffBlock, GUIDANCE_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Seff,
    Cbr,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Seff => "seff",
            Self::Cbr => "cbr",
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "seff" => Ok(Self::Seff),
            "cbr" => Ok(Self::Cbr),
            other => Err(format!("unknown fusion `{other}` (expected seff or cbr)")),
        }
    }
}

/// `concat(f1, f2, s)` through three 3×3 CBR blocks:
/// `2C+4 → C`, `C → m`, `m → C`, with `m` chosen to match a parameter budget.
#[derive(Clone, Debug)]
pub struct CbrFusion {
    channels: usize,
    pub layers: Vec<Cbr>,
}

fn cbr_params(cin: usize, cout: usize) -> usize {
    cin * cout * 9 + 2 * cout
}

impl CbrFusion {
    pub fn new(init: &mut Init<'_>, channels: usize, budget: usize) -> Self {
        let c = channels;
        let first = cbr_params(2 * c + GUIDANCE_CHANNELS, c);
        // cbr(C → m) + cbr(m → C) = m (18C + 2) + 2C
        let per_unit = 18 * c + 2;
        let rest = budget.saturating_sub(first + 2 * c);
        let hidden = ((rest as f64 / per_unit as f64).round() as usize).max(1);
        let spec = ConvSpec::same(3);
        let layers = vec![
            init.cbr("cbr1", 2 * c + GUIDANCE_CHANNELS, c, spec),
            init.cbr("cbr2", c, hidden, spec),
            init.cbr("cbr3", hidden, c, spec),
        ];
        Self { channels, layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, f1: Var, f2: Var, s: Var) -> Result<Var> {
        let (s1, s2, ss) = (g.shape(f1), g.shape(f2), g.shape(s));
        if s1 != s2 || s1.c != self.channels || ss != s1.with_channels(GUIDANCE_CHANNELS) {
            return Err(Error::contract(format!(
                "cbr fusion: f1 {s1}, f2 {s2}, s {ss} for {} channels",
                self.channels
            )));
        }
        let mut x = g.concat_channels(&[f1, f2, s])?;
        for layer in &self.layers {
            x = layer.forward(g, p, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Seff(SeffBlock),
    Cbr(CbrFusion),
}

impl Fusion {
    pub fn new(init: &mut Init<'_>, kind: FusionKind, channels: usize, reduction: usize) -> Result<Self> {
        Ok(match kind {
            FusionKind::Seff => Self::Seff(SeffBlock::new(init, channels, reduction)?),
            FusionKind::Cbr => {
                let budget = seff_param_count(channels, reduction)?;
                Self::Cbr(CbrFusion::new(init, channels, budget))
            }
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, f1: Var, f2: Var, s: Var) -> Result<Var> {
        match self {
            Self::Seff(b) => b.forward(g, p, f1, f2, s),
            Self::Cbr(b) => b.forward(g, p, f1, f2, s),
        }
    }

    pub fn as_seff(&self) -> Option<&SeffBlock> {
        match self {
            Self::Seff(b) => Some(b),
            Self::Cbr(_) => None,
        }
    }
}

/// Scalar parameter count of one [`SeffBlock`] of the given width.
pub fn seff_param_count(channels: usize, reduction: usize) -> Result<usize> {
    let mut scratch = ParamStore::new();
    SeffBlock::new(&mut Init::new(&mut scratch, 0), channels, reduction)?;
    Ok(scratch.num_scalars())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cbr_stack_is_parameter_matched() {
        for c in [4, 8, 16, 32, 64, 128] {
            let budget = seff_param_count(c, 4).unwrap();
            let mut store = ParamStore::new();
            CbrFusion::new(&mut Init::new(&mut store, 0), c, budget);
            let got = store.num_scalars();
            let rel = (got as f64 - budget as f64).abs() / budget as f64;
            assert!(rel < 0.05, "C={c}: cbr {got} vs seff {budget} ({rel:.4})");
        }
    }
}
