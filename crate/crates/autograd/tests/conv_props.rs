use proptest::prelude::*;
use seffsal_autograd::{conv2d_forward, ConvSpec, Graph, Shape, Tensor, GROUP_NORM_EPS};

/// Direct seven-loop convolution with zero padding.
fn naive(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: &ConvSpec) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let out_len = |n: usize| (n + 2 * s.padding - s.dilation * (k - 1) - 1) / s.stride + 1;
    let (ho, wo) = (out_len(xs.h), out_len(xs.w));
    let cout_g = ws.n / s.groups;
    Tensor::from_fn(Shape::new(xs.n, ws.n, ho, wo), |n, o, oy, ox| {
        let g = o / cout_g;
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for ci in 0..ws.c {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                    let xx = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                    if y < 0 || xx < 0 || y >= xs.h as isize || xx >= xs.w as isize {
                        continue;
                    }
                    acc += w.get(o, ci, ky, kx) * x.get(n, g * ws.c + ci, y as usize, xx as usize);
                }
            }
        }
        acc
    })
}

fn tensor(shape: Shape, seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_, _, _, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn conv_matches_direct_sum(
        n in 1usize..3,
        groups in 1usize..4,
        cin_g in 1usize..3,
        cout_g in 1usize..3,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        dilation in 1usize..3,
        padding in 0usize..3,
        h in 5usize..11,
        w in 5usize..11,
        bias in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let spec = ConvSpec { stride, padding, dilation, groups };
        let xs = Shape::new(n, groups * cin_g, h, w);
        let ws = Shape::new(groups * cout_g, cin_g, k, k);
        prop_assume!(spec.output_len(h, k).is_some() && spec.output_len(w, k).is_some());
        let x = tensor(xs, seed);
        let wt = tensor(ws, seed ^ 1);
        let b = bias.then(|| tensor(Shape::new(1, ws.n, 1, 1), seed ^ 2));
        let got = conv2d_forward(&x, &wt, b.as_ref(), &spec).unwrap();
        let want = naive(&x, &wt, b.as_ref(), &spec);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn bilinear_resize_preserves_constants(
        c in 0.0f64..5.0,
        h in 1usize..9, w in 1usize..9,
        oh in 1usize..17, ow in 1usize..17,
    ) {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(Shape::new(1, 2, h, w), c));
        let y = g.resize_bilinear(x, oh, ow).unwrap();
        prop_assert_eq!(g.shape(y), Shape::new(1, 2, oh, ow));
        prop_assert!(g.value(y).data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn group_norm_output_is_standardized(
        groups in 1usize..4,
        per in 1usize..4,
        h in 2usize..6,
        seed in any::<u64>(),
    ) {
        let c = groups * per;
        let input = tensor(Shape::new(2, c, h, h), seed);
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let gamma = g.constant(Tensor::full(Shape::new(1, c, 1, 1), 1.0));
        let beta = g.constant(Tensor::zeros(Shape::new(1, c, 1, 1)));
        let y = g.group_norm(x, gamma, beta, groups).unwrap();
        let block = per * h * h;
        let moments = |chunk: &[f64]| {
            let mean = chunk.iter().sum::<f64>() / block as f64;
            (mean, chunk.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / block as f64)
        };
        for (out, inp) in g.value(y).data().chunks(block).zip(input.data().chunks(block)) {
            let (mean, var) = moments(out);
            let (_, raw) = moments(inp);
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - raw / (raw + GROUP_NORM_EPS)).abs() < 1e-9, "var {}", var);
        }
    }
}
