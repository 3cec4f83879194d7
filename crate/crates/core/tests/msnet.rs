mod common;

use common::{gradcheck, randomize, rng, uniform};
use proptest::prelude::*;
use seffsal_core::autograd::{Graph, Shape, Tensor};
use seffsal_core::backbone::{pyramid_sizes, BackboneConfig};
use seffsal_core::fusion::{seff_param_count, FusionKind};
use seffsal_core::losses::{total_loss, ApiWeights};
use seffsal_core::msnet::{
    build_guidance, cpr_name, csf_name, fuse_cross_scale, map_name, predict_head, scale_inputs, GuidanceSource,
    MsNet, NetConfig, NetVariant, SaliencyBundle, WiringEvent,
};
use seffsal_core::nn::{Conv, Init};
use seffsal_core::Error;

fn paper_sized(variant: NetVariant) -> NetConfig {
    NetConfig {
        variant,
        ..NetConfig::default()
    }
}

fn micro(variant: NetVariant) -> NetConfig {
    NetConfig {
        backbone: BackboneConfig {
            stage_channels: [4, 8, 8, 8],
            blocks_per_stage: 1,
        },
        decoder_channels: [8, 8, 8, 8],
        reduction: 4,
        input_sizes: [64, 32, 16],
        variant,
        fusion: FusionKind::Seff,
    }
}

fn rgbd(n: usize, side: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (
        uniform(Shape::new(n, 3, side, side), 0.0, 1.0, &mut r),
        uniform(Shape::new(n, 1, side, side), 0.0, 1.0, &mut r),
    )
}

#[test]
fn full_variant_emits_twelve_maps_at_stride_resolutions() {
    let cfg = paper_sized(NetVariant::Full);
    let net = MsNet::new(&cfg, 0).unwrap();
    let (rgb, depth) = rgbd(1, 200, 1);
    let inputs = net.scale_inputs(&rgb, &depth).unwrap();
    let sides: Vec<usize> = inputs.iter().map(|i| i.rgb.shape().h).collect();
    assert_eq!(sides, vec![88, 176, 352]);
    let mut g = Graph::inference();
    let out = net.forward(&mut g, &inputs).unwrap();
    assert_eq!(out.bundle.len(), 12);
    let expected = [[88, 44, 22, 11], [44, 22, 11, 6], [22, 11, 6, 3]];
    for (i, row) in expected.iter().enumerate() {
        assert_eq!(pyramid_sizes(cfg.input_size(i + 1)), *row);
        for (j, &side) in row.iter().enumerate() {
            let m = out.bundle.get(i + 1, j + 1).unwrap();
            assert_eq!(g.shape(m), Shape::new(1, 1, side, side), "{}", map_name(i + 1, j + 1));
            assert!(g.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn scale3_guidance_is_exactly_zero() {
    let net = MsNet::new(&micro(NetVariant::Full), 2).unwrap();
    let (rgb, depth) = rgbd(2, 64, 3);
    let mut g = Graph::inference();
    let out = net.forward(&mut g, &net.scale_inputs(&rgb, &depth).unwrap()).unwrap();
    let guide = out.features.rgbd_guidance[&3];
    assert_eq!(guide.source, GuidanceSource::Zeros);
    assert_eq!(g.shape(guide.var).c, 4);
    assert!(g.value(guide.var).data().iter().all(|&v| v == 0.0));
    assert_eq!(out.features.rgbd_guidance[&2].source, GuidanceSource::Scale3);
    assert_eq!(out.features.rgbd_guidance[&1].source, GuidanceSource::Scales2And3);
    assert!(out.features.csf_guidance.keys().all(|&(i, _)| i != 3));
}

#[test]
fn scale1_fusion_consumes_scale2_csf_features() {
    let net = MsNet::new(&micro(NetVariant::Full), 4).unwrap();
    let (rgb, depth) = rgbd(1, 64, 5);
    let mut g = Graph::inference();
    let out = net.forward(&mut g, &net.scale_inputs(&rgb, &depth).unwrap()).unwrap();
    out.trace.check_acyclic().unwrap();
    for j in 1..=4 {
        let fine = out.trace.inputs_of(&csf_name(1, j));
        assert!(fine.contains(&csf_name(2, j)), "{fine:?}");
        assert!(fine.contains(&cpr_name(1, j)));
        assert!(!fine.contains(&cpr_name(2, j)), "{fine:?}");
        let mid = out.trace.inputs_of(&csf_name(2, j));
        assert!(mid.contains(&cpr_name(3, j)) && mid.contains(&cpr_name(2, j)), "{mid:?}");

        // Recomputing the scale-1 fusion from the logged tensors reproduces
        // it only when the coarse input is the scale-2 CSF feature.
        let s1 = net.scale(1).unwrap();
        let guide = out.features.csf_guidance[&(1, j)];
        let fine_f = out.features.cpr[&(1, j)];
        let from_csf = fuse_cross_scale(&s1.csf[j - 1], &mut g, &net.params, 1, fine_f, out.features.csf[&(2, j)], &guide)
            .unwrap();
        let from_cpr = fuse_cross_scale(&s1.csf[j - 1], &mut g, &net.params, 1, fine_f, out.features.cpr[&(2, j)], &guide)
            .unwrap();
        let logged = g.value(out.features.csf[&(1, j)]);
        assert_eq!(g.value(from_csf), logged);
        assert_ne!(g.value(from_cpr), logged);
    }
    // No map is read before it is written and every map is written once.
    let writes = out
        .trace
        .events
        .iter()
        .filter(|e| matches!(e, WiringEvent::Write(n) if n.starts_with('S')))
        .count();
    assert_eq!(writes, 12);
}

#[test]
fn variants_build_only_their_scales() {
    let full = MsNet::new(&micro(NetVariant::Full), 0).unwrap();
    let s2 = MsNet::new(&micro(NetVariant::Scale2), 0).unwrap();
    let s1 = MsNet::new(&micro(NetVariant::Scale1), 0).unwrap();
    assert!(s1.num_params() < s2.num_params() && s2.num_params() < full.num_params());
    assert!(s2.scale(1).is_none() && s2.scale(2).is_some());
    assert!(s1.scale(2).is_none() && s1.scale(3).is_some());
    assert!(s2.params.iter().all(|(_, n, _)| !n.starts_with("s1.")));
    assert_eq!(full.num_fusion_sites(), 11);

    let (rgb, depth) = rgbd(1, 64, 6);
    let mut g = Graph::inference();
    let out = s2.forward(&mut g, &s2.scale_inputs(&rgb, &depth).unwrap()).unwrap();
    assert_eq!(out.bundle.len(), 8);
    let mut g = Graph::inference();
    let inputs = s1.scale_inputs(&rgb, &depth).unwrap();
    assert_eq!(inputs.len(), 1);
    assert_eq!(inputs[0].rgb.shape().h, 16);
    let out = s1.forward(&mut g, &inputs).unwrap();
    assert_eq!(out.bundle.len(), 4);
    assert!(out.bundle.iter().all(|((i, _), _)| i == 3));
    assert!(out.features.rgbd_guidance.values().all(|gm| gm.source == GuidanceSource::Zeros));

    assert!(matches!(NetVariant::from_scales(&[1, 2]), Err(Error::Config { .. })));
    assert_eq!(NetVariant::from_scales(&[2, 3]).unwrap(), NetVariant::Scale2);
}

#[test]
fn scale3_of_full_network_equals_scale1_variant() {
    let full = MsNet::new(&micro(NetVariant::Full), 9).unwrap();
    let single = MsNet::new(&micro(NetVariant::Scale1), 9).unwrap();
    for (id, name, t) in single.params.iter() {
        let other = full.params.find(name).unwrap_or_else(|| panic!("{name}"));
        assert_eq!(full.params.get(other), t, "{name} ({id:?})");
    }
    let (rgb, depth) = rgbd(2, 64, 10);
    let mut g1 = Graph::inference();
    let a = full.forward(&mut g1, &full.scale_inputs(&rgb, &depth).unwrap()).unwrap();
    let mut g2 = Graph::inference();
    let b = single.forward(&mut g2, &single.scale_inputs(&rgb, &depth).unwrap()).unwrap();
    for j in 1..=4 {
        let x = g1.value(a.bundle.get(3, j).unwrap());
        let y = g2.value(b.bundle.get(3, j).unwrap());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
    }
}

#[test]
fn cbr_replacement_is_parameter_matched() {
    let seff = MsNet::new(&paper_sized(NetVariant::Full), 0).unwrap();
    let cbr = MsNet::new(
        &NetConfig {
            fusion: FusionKind::Cbr,
            ..paper_sized(NetVariant::Full)
        },
        0,
    )
    .unwrap();
    let a = seff.fusion_site_params();
    let b = cbr.fusion_site_params();
    assert_eq!(a.len(), 11);
    for ((na, pa), (nb, pb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        let rel = (*pa as f64 - *pb as f64).abs() / *pa as f64;
        assert!(rel < 0.05, "{na}: {pa} vs {pb}");
    }
    let rel = (seff.num_params() as f64 - cbr.num_params() as f64).abs() / seff.num_params() as f64;
    assert!(rel < 0.05);
    let top = seff.config().backbone.stage_channels[3];
    let site = a.iter().find(|(n, _)| n == "s3.rgbd_fusion").unwrap();
    assert_eq!(site.1, seff_param_count(top, 4).unwrap());
}

#[test]
fn guidance_construction() {
    let mut store = seffsal_core::autograd::ParamStore::new();
    let proj = Conv::pointwise(&mut Init::new(&mut store, 0).scope("p"), 8, 4);
    let mut g = Graph::inference();
    let mut bundle = SaliencyBundle::default();
    for (j, side) in [(1, 22), (2, 11), (3, 6), (4, 3)] {
        bundle.insert(3, j, g.constant(Tensor::full(Shape::new(2, 1, side, side), 0.5)));
        bundle.insert(2, j, g.constant(Tensor::full(Shape::new(2, 1, 2 * side, 2 * side), 0.25)));
    }
    let mut trace = Default::default();
    let z = build_guidance(&mut g, &store, &bundle, 3, 2, (11, 11), None, &mut trace).unwrap();
    assert_eq!(g.shape(z.var), Shape::new(2, 4, 11, 11));
    assert!(g.value(z.var).data().iter().all(|&v| v == 0.0));

    let s3 = build_guidance(&mut g, &store, &bundle, 2, 2, (44, 44), None, &mut trace).unwrap();
    assert_eq!(g.shape(s3.var), Shape::new(2, 4, 44, 44));
    assert!(g.value(s3.var).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

    let s1 = build_guidance(&mut g, &store, &bundle, 1, 2, (88, 88), Some(&proj), &mut trace).unwrap();
    assert_eq!(g.shape(s1.var), Shape::new(2, 4, 88, 88));
    assert!(build_guidance(&mut g, &store, &bundle, 1, 2, (8, 8), None, &mut trace).is_err());

    let empty = SaliencyBundle::default();
    assert!(matches!(
        build_guidance(&mut g, &store, &empty, 2, 2, (8, 8), None, &mut trace),
        Err(Error::Sequencing(_))
    ));
}

#[test]
fn head_saturation_and_scale3_fusion_rejected() {
    let mut store = seffsal_core::autograd::ParamStore::new();
    let head = Conv::pointwise(&mut Init::new(&mut store, 0).scope("h"), 16, 1);
    let feat = uniform(Shape::new(2, 16, 44, 44), -1.0, 1.0, &mut rng(11));
    let run = |store: &seffsal_core::autograd::ParamStore| {
        let mut g = Graph::inference();
        let f = g.constant(feat.clone());
        let m = predict_head(&mut g, store, f, &head).unwrap();
        g.value(m).clone()
    };
    store.get_mut(head.weight).data_mut().fill(0.0);
    let m = run(&store);
    assert_eq!(m.shape(), Shape::new(2, 1, 44, 44));
    assert!(m.data().iter().all(|&v| v == 0.5));
    store.get_mut(head.bias.unwrap()).data_mut().fill(-40.0);
    assert!(run(&store).data().iter().all(|&v| v > 0.0 && v < 1e-12));

    let mut g = Graph::inference();
    let net = MsNet::new(&micro(NetVariant::Full), 0).unwrap();
    let fusion = &net.scale(2).unwrap().csf[0];
    let x = g.constant(Tensor::zeros(Shape::new(1, 8, 4, 4)));
    let s = g.constant(Tensor::zeros(Shape::new(1, 4, 4, 4)));
    let guide = seffsal_core::msnet::GuidanceMap {
        var: s,
        source: GuidanceSource::Zeros,
    };
    assert!(matches!(
        fuse_cross_scale(fusion, &mut g, &net.params, 3, x, x, &guide),
        Err(Error::Contract(_))
    ));
}

#[test]
fn saturated_cross_scale_gate_passes_fine_branch() {
    let mut net = MsNet::new(&micro(NetVariant::Full), 12).unwrap();
    let ids: Vec<_> = net
        .params
        .ids()
        .filter(|&id| {
            let n = net.params.name(id);
            n.starts_with("s1.csf1.lcc.") || n.starts_with("s1.csf1.gcc.")
        })
        .collect();
    for id in ids {
        net.params.get_mut(id).data_mut().fill(0.0);
    }
    let bias = net.params.find("s1.csf1.lcc.expand.bias").unwrap();
    net.params.get_mut(bias).data_mut().fill(40.0);
    let (rgb, depth) = rgbd(1, 64, 13);
    let mut g = Graph::inference();
    let out = net.forward(&mut g, &net.scale_inputs(&rgb, &depth).unwrap()).unwrap();
    let block = net.scale(1).unwrap().csf[0].as_seff().unwrap();
    let fine = out.features.cpr[&(1, 1)];
    let coarse = out.features.csf[&(2, 1)];
    let (h, w) = g.shape(fine).spatial();
    let coarse = g.resize_bilinear(coarse, h, w).unwrap();
    let guide = out.features.csf_guidance[&(1, 1)].var;
    let t = block.forward_traced(&mut g, &net.params, fine, coarse, guide).unwrap();
    let diff = g.value(out.features.csf[&(1, 1)]).max_abs_diff(g.value(t.refined1)).unwrap();
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn rejects_wrong_input_sizes() {
    let net = MsNet::new(&micro(NetVariant::Full), 0).unwrap();
    let (rgb, depth) = rgbd(1, 64, 14);
    let mut inputs = net.scale_inputs(&rgb, &depth).unwrap();
    inputs[0].rgb = Tensor::zeros(Shape::new(1, 3, 20, 20));
    let mut g = Graph::inference();
    assert!(matches!(net.forward(&mut g, &inputs), Err(Error::Contract(_))));
    assert!(net.forward(&mut g, &inputs[1..]).is_err());
}

#[test]
fn prediction_is_input_sized() {
    let net = MsNet::new(&micro(NetVariant::Full), 0).unwrap();
    let (rgb, depth) = rgbd(1, 80, 15);
    let p = net.predict(&rgb, &depth).unwrap();
    assert_eq!(p.shape(), Shape::new(1, 1, 80, 80));
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = micro(NetVariant::Full);
    let mut net = MsNet::new(&cfg, 16).unwrap();
    randomize(&mut net.params, 0.02, &mut rng(17));
    let (rgb, depth) = rgbd(1, 64, 18);
    let inputs = scale_inputs(&cfg, &rgb, &depth).unwrap();
    let gt = Tensor::from_fn(Shape::new(1, 1, 64, 64), |_, _, y, x| {
        if (16..44).contains(&y) && (20..50).contains(&x) {
            1.0
        } else {
            0.0
        }
    });
    let weights = ApiWeights::default();
    let report = gradcheck(&net.params, &[], 2, |g, p, _| {
        let out = net.forward_with(g, p, &inputs).unwrap();
        total_loss(g, &out.bundle, &gt, &weights).unwrap().total
    });
    assert!(report.max_rel < 1e-3, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn maps_are_open_unit_interval(seed in any::<u64>(), scale in 0.0f64..50.0) {
        let net = MsNet::new(&micro(NetVariant::Full), seed).unwrap();
        let mut r = rng(seed);
        let rgb = uniform(Shape::new(1, 3, 64, 64), -scale, scale, &mut r);
        let depth = uniform(Shape::new(1, 1, 64, 64), -scale, scale, &mut r);
        let mut g = Graph::inference();
        let out = net.forward(&mut g, &net.scale_inputs(&rgb, &depth).unwrap()).unwrap();
        prop_assert_eq!(out.bundle.len(), 12);
        for (_, m) in out.bundle.iter() {
            prop_assert!(g.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
