//! Saliency-enhanced feature fusion.
//!
//! Two same-shaped features are each concatenated with a 4-channel saliency
//! guidance map and refined by their own convolution path. The refined
//! features are summed and fed to two channel-context aggregators:
//!
//! * local (LCC): a per-position 1×1 bottleneck, no spatial mixing;
//! * global (GCC): the same bottleneck over the globally pooled vector.
//!
//! Their sum, squashed by a sigmoid, is a gate `W ∈ (0, 1)` and the output is
//! the convex combination `W ⊙ F1′ + (1 − W) ⊙ F2′`.

use seffsal_autograd::{ConvSpec, Graph, ParamStore, Var};

use crate::error::{Error, Result};
use crate::nn::{Cbr, Conv, Init};

/// Channel count of every guidance map.
pub const GUIDANCE_CHANNELS: usize = 4;

/// Bottleneck width divisor.
pub const DEFAULT_REDUCTION: usize = 4;

/// `C → C/r → ReLU → C` pointwise bottleneck. No normalization: the local
/// branch must not mix spatial positions.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: Conv,
    pub expand: Conv,
}

impl Bottleneck {
    fn new(init: &mut Init<'_>, channels: usize, hidden: usize) -> Self {
        Self {
            reduce: Conv::pointwise(&mut init.scope("reduce"), channels, hidden),
            expand: Conv::pointwise(&mut init.scope("expand"), hidden, channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, p, x)?;
        let h = g.relu(h);
        self.expand.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct SeffBlock {
    channels: usize,
    reduction: usize,
    pub refine1: [Cbr; 2],
    pub refine2: [Cbr; 2],
    pub lcc: Bottleneck,
    pub gcc: Bottleneck,
}

/// Intermediate values of one fusion, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct SeffTrace {
    pub refined1: Var,
    pub refined2: Var,
    pub gate: Var,
    pub output: Var,
}

impl SeffBlock {
    pub fn new(init: &mut Init<'_>, channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(
                "reduction",
                format!("reduction ratio {reduction} must divide channel count {channels}"),
            ));
        }
        let hidden = channels / reduction;
        let cin = channels + GUIDANCE_CHANNELS;
        let path = |init: &mut Init<'_>, name: &str| {
            let mut s = init.scope(name);
            [
                s.cbr("conv1", cin, channels, ConvSpec::same(3)),
                s.cbr("conv2", channels, channels, ConvSpec::same(3)),
            ]
        };
        Ok(Self {
            channels,
            reduction,
            refine1: path(init, "refine1"),
            refine2: path(init, "refine2"),
            lcc: Bottleneck::new(&mut init.scope("lcc"), channels, hidden),
            gcc: Bottleneck::new(&mut init.scope("gcc"), channels, hidden),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    fn check_channels(&self, g: &Graph, u: Var, what: &str) -> Result<()> {
        let s = g.shape(u);
        if s.c != self.channels {
            return Err(Error::contract(format!(
                "{what}: expected {} channels, got {s}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Local channel context: per-position attention logits, `[N, C, H, W]`.
    pub fn lcc(&self, g: &mut Graph, p: &ParamStore, u: Var) -> Result<Var> {
        self.check_channels(g, u, "lcc")?;
        self.lcc.forward(g, p, u)
    }

    /// Global channel context: pooled attention logits, `[N, C, 1, 1]`.
    pub fn gcc(&self, g: &mut Graph, p: &ParamStore, u: Var) -> Result<Var> {
        self.check_channels(g, u, "gcc")?;
        let pooled = g.global_avg_pool(u);
        self.gcc.forward(g, p, pooled)
    }

    fn refine(path: &[Cbr; 2], g: &mut Graph, p: &ParamStore, f: Var, s: Var) -> Result<Var> {
        let x = g.concat_channels(&[f, s])?;
        let x = path[0].forward(g, p, x)?;
        path[1].forward(g, p, x)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, f1: Var, f2: Var, s: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, f1, f2, s)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph, p: &ParamStore, f1: Var, f2: Var, s: Var) -> Result<SeffTrace> {
        let (s1, s2, ss) = (g.shape(f1), g.shape(f2), g.shape(s));
        if s1 != s2 {
            return Err(Error::contract(format!("seff: f1 {s1} and f2 {s2} differ")));
        }
        self.check_channels(g, f1, "seff")?;
        if ss != s1.with_channels(GUIDANCE_CHANNELS) {
            return Err(Error::contract(format!(
                "seff: guidance {ss} does not match features {s1} (expected {GUIDANCE_CHANNELS} channels)"
            )));
        }
        for (v, name) in [(f1, "f1"), (f2, "f2"), (s, "s")] {
            if !g.value(v).all_finite() {
                return Err(Error::Numeric(format!("seff input {name}")));
            }
        }
        let refined1 = Self::refine(&self.refine1, g, p, f1, s)?;
        let refined2 = Self::refine(&self.refine2, g, p, f2, s)?;
        let u = g.add(refined1, refined2)?;
        let local = self.lcc(g, p, u)?;
        let global = self.gcc(g, p, u)?;
        let logits = g.add_broadcast(local, global)?;
        let gate = g.sigmoid(logits);
        let output = g.lerp(gate, refined1, refined2)?;
        Ok(SeffTrace {
            refined1,
            refined2,
            gate,
            output,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use seffsal_autograd::{Shape, Tensor};

    #[test]
    fn reduction_must_divide_channels() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        assert!(SeffBlock::new(&mut init.scope("a"), 6, 4).is_err());
        assert!(SeffBlock::new(&mut init.scope("b"), 8, 4).is_ok());
    }

    #[test]
    fn rejects_mismatched_guidance() {
        let mut store = ParamStore::new();
        let block = SeffBlock::new(&mut Init::new(&mut store, 0), 8, 4).unwrap();
        let mut g = Graph::inference();
        let f = g.constant(Tensor::zeros(Shape::new(1, 8, 4, 4)));
        let s = g.constant(Tensor::zeros(Shape::new(1, 4, 5, 4)));
        assert!(matches!(block.forward(&mut g, &store, f, f, s), Err(Error::Contract(_))));
        let s3 = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        assert!(matches!(block.forward(&mut g, &store, f, f, s3), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut store = ParamStore::new();
        let block = SeffBlock::new(&mut Init::new(&mut store, 0), 4, 4).unwrap();
        let mut g = Graph::inference();
        let mut bad = Tensor::zeros(Shape::new(1, 4, 2, 2));
        bad.data_mut()[3] = f64::NAN;
        let f = g.constant(bad);
        let s = g.constant(Tensor::zeros(Shape::new(1, 4, 2, 2)));
        assert!(matches!(block.forward(&mut g, &store, f, f, s), Err(Error::Numeric(_))));
    }
}
