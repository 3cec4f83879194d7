//! Parameterized building blocks shared by every network component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seffsal_autograd::{kaiming_uniform, ConvSpec, Graph, ParamId, ParamStore, Shape, Tensor, Var};

use crate::error::Result;

/// Registers parameters under a dotted name prefix.
///
/// Each tensor is drawn from an RNG seeded by `(seed, full name)`, so a
/// submodule's initial values depend only on its name and the seed, never on
/// what else was built before it.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            seed,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = self.qualify(name);
        Init {
            store: self.store,
            seed: self.seed,
            prefix,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.qualify(name);
        self.store.add(full, value)
    }

    pub fn kaiming(&mut self, name: &str, shape: Shape, fan_in: usize) -> ParamId {
        let full = self.qualify(name);
        let mut rng = self.rng_for(&full);
        let t = kaiming_uniform(shape, fan_in, &mut rng);
        self.store.add(full, t)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, spec: ConvSpec, bias: bool) -> Conv {
        Conv::new(&mut self.scope(name), cin, cout, kernel, spec, bias)
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        Norm::new(&mut self.scope(name), channels)
    }

    pub fn cbr(&mut self, name: &str, cin: usize, cout: usize, spec: ConvSpec) -> Cbr {
        let mut s = self.scope(name);
        Cbr {
            conv: s.conv("conv", cin, cout, 3, spec, false),
            norm: s.norm("norm", cout),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn new(init: &mut Init<'_>, cin: usize, cout: usize, kernel: usize, spec: ConvSpec, bias: bool) -> Self {
        let cin_g = cin / spec.groups;
        let weight = init.kaiming("weight", Shape::new(cout, cin_g, kernel, kernel), cin_g * kernel * kernel);
        let bias = bias.then(|| init.tensor("bias", Tensor::zeros(Shape::new(1, cout, 1, 1))));
        Self {
            weight,
            bias,
            spec,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn pointwise(init: &mut Init<'_>, cin: usize, cout: usize) -> Self {
        Self::new(init, cin, cout, 1, ConvSpec::default(), true)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.weight);
        let b = self.bias.map(|b| g.param(p, b));
        Ok(g.conv2d(x, w, b, self.spec)?)
    }
}

/// Group normalization. Groups hold four channels when the width allows it,
/// otherwise one group spans all channels.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub fn norm_groups(channels: usize) -> usize {
    if channels % 4 == 0 {
        channels / 4
    } else {
        1
    }
}

impl Norm {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        Self {
            gamma: init.tensor("gamma", Tensor::full(shape, 1.0)),
            beta: init.tensor("beta", Tensor::zeros(shape)),
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(p, self.gamma);
        let beta = g.param(p, self.beta);
        Ok(g.group_norm(x, gamma, beta, self.groups)?)
    }
}

/// 3×3 convolution → normalization → ReLU.
#[derive(Clone, Debug)]
pub struct Cbr {
    pub conv: Conv,
    pub norm: Norm,
}

impl Cbr {
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.relu(y))
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        {
            let mut ia = Init::new(&mut a, 7);
            ia.conv("first", 3, 4, 3, ConvSpec::same(3), true);
            ia.conv("second", 4, 4, 3, ConvSpec::same(3), true);
        }
        {
            let mut ib = Init::new(&mut b, 7);
            ib.conv("second", 4, 4, 3, ConvSpec::same(3), true);
        }
        let wa = a.get(a.find("second.weight").unwrap());
        let wb = b.get(b.find("second.weight").unwrap());
        assert_eq!(wa, wb);
    }

    #[test]
    fn group_sizes() {
        assert_eq!(norm_groups(16), 4);
        assert_eq!(norm_groups(128), 32);
        assert_eq!(norm_groups(6), 1);
        assert_eq!(norm_groups(1), 1);
    }
}
