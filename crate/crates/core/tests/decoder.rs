mod common;

use common::{gradcheck, probe_sum, randomize, rng, uniform};
use seffsal_core::autograd::{Graph, ParamStore, Shape, Tensor, Var};
use seffsal_core::backbone::{Backbone, BackboneConfig, Modality};
use seffsal_core::decoder::CprDecoder;
use seffsal_core::nn::Init;

fn decoder(enc: &[usize], dec: &[usize], top: usize, seed: u64) -> (ParamStore, CprDecoder) {
    let mut store = ParamStore::new();
    let d = CprDecoder::new(&mut Init::new(&mut store, seed), enc, dec, top).unwrap();
    (store, d)
}

fn decode_sizes(side: usize) -> Vec<(usize, usize)> {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, 0);
    let b = Backbone::new(&mut init.scope("backbone"), &cfg).unwrap();
    let c = cfg.stage_channels;
    let d = CprDecoder::new(&mut init.scope("decoder"), &c, &[16, 32, 32, 64], c[3]).unwrap();
    let mut g = Graph::inference();
    let x = g.constant(uniform(Shape::new(1, 3, side, side), 0.0, 1.0, &mut rng(2)));
    let p = b.extract_features(&mut g, &store, x, 1, Modality::Rgb).unwrap();
    let out = d.decode(&mut g, &store, &p.layers, p.layers[3]).unwrap();
    for (f, skip) in out.iter().zip(p.layers) {
        assert_eq!(g.shape(*f).spatial(), g.shape(skip).spatial());
    }
    out.iter().map(|&v| g.shape(v).spatial()).collect()
}

#[test]
fn resolutions_follow_encoder() {
    let sq = |v: [usize; 4]| v.iter().map(|&s| (s, s)).collect::<Vec<_>>();
    assert_eq!(decode_sizes(352), sq([88, 44, 22, 11]));
    assert_eq!(decode_sizes(176), sq([44, 22, 11, 6]));
    assert_eq!(decode_sizes(88), sq([22, 11, 6, 3]));
}

#[test]
fn zero_parameters_give_zero_features() {
    let (mut store, d) = decoder(&[4, 8, 8, 8], &[4, 8, 8, 8], 8, 3);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut r = rng(4);
    let mut g = Graph::inference();
    let skips: Vec<Var> = [(4, 12), (8, 6), (8, 3), (8, 2)]
        .iter()
        .map(|&(c, s)| g.constant(uniform(Shape::new(1, c, s, s), -1.0, 1.0, &mut r)))
        .collect();
    let out = d.decode(&mut g, &store, &skips, skips[3]).unwrap();
    for f in out {
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn rejects_mismatched_top() {
    let (store, d) = decoder(&[4, 8], &[4, 8], 8, 5);
    let mut g = Graph::inference();
    let s1 = g.constant(Tensor::zeros(Shape::new(1, 4, 8, 8)));
    let s2 = g.constant(Tensor::zeros(Shape::new(1, 8, 4, 4)));
    let top = g.constant(Tensor::zeros(Shape::new(1, 8, 3, 3)));
    assert!(d.decode(&mut g, &store, &[s1, s2], top).is_err());
    assert!(d.decode(&mut g, &store, &[s1], s2).is_err());
}

#[test]
fn two_stage_gradients_match_finite_differences() {
    let (mut store, d) = decoder(&[4, 8], &[4, 8], 8, 6);
    randomize(&mut store, 0.05, &mut rng(7));
    let mut r = rng(8);
    let skip1 = uniform(Shape::new(1, 4, 6, 6), -1.0, 1.0, &mut r);
    let skip2 = uniform(Shape::new(1, 8, 3, 3), -1.0, 1.0, &mut r);
    let top = uniform(Shape::new(1, 8, 3, 3), -1.0, 1.0, &mut r);
    let p1 = uniform(Shape::new(1, 4, 6, 6), -1.0, 1.0, &mut r);
    let p2 = uniform(Shape::new(1, 8, 3, 3), -1.0, 1.0, &mut r);
    let report = gradcheck(&store, &[skip1, skip2, top], 24, |g, p, v| {
        let out = d.decode(g, p, &[v[0], v[1]], v[2]).unwrap();
        let a = probe_sum(g, out[0], &p1);
        let b = probe_sum(g, out[1], &p2);
        g.add(a, b).unwrap()
    });
    assert!(report.max_rel < 1e-4, "{report:?}");
}
