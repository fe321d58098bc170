use candle_core::{DType, Device, Tensor};
use facecomp::acc::{patchify, unpatchify};
use facecomp::codebook::{nearest_code, perplexity, quantize, Codebook, CodebookKind, ScaleView};
use facecomp::flowcore::{warp, FlowField};
use facecomp::nn::to_vec_f64;
use facecomp::toolkit::{metric_l1, metric_psnr};
use facecomp::Config;
use proptest::prelude::*;

fn codes_and_inputs() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1usize..6, 1usize..12, 1usize..20).prop_flat_map(|(dim, k, n)| {
        (
            Just(dim),
            prop::collection::vec(-2.0f64..2.0, k * dim),
            prop::collection::vec(-2.0f64..2.0, n * dim),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_picks_a_nearest_code_and_is_idempotent((dim, codes, x) in codes_and_inputs()) {
        let k = codes.len() / dim;
        let n = x.len() / dim;
        let view = ScaleView::from_codes(Tensor::from_vec(codes.clone(), (k, dim), &Device::Cpu).unwrap(), CodebookKind::Motion).unwrap();
        let q = quantize(&Tensor::from_vec(x.clone(), (n, dim), &Device::Cpu).unwrap(), &view).unwrap();
        for (v, &i) in x.chunks_exact(dim).zip(&q.indices) {
            let chosen: f64 = v.iter().zip(&codes[i as usize * dim..]).map(|(a, b)| (a - b) * (a - b)).sum();
            for c in codes.chunks_exact(dim) {
                let d: f64 = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                prop_assert!(chosen <= d);
            }
            prop_assert_eq!(nearest_code(v, &codes, dim).0, i as usize);
        }
        let again = quantize(&q.quantized, &view).unwrap();
        prop_assert_eq!(again.indices, q.indices);
    }

    #[test]
    fn allocations_are_nested_prefixes(per_scale in 1usize..16, n_scales in 1usize..6, dim in 1usize..4) {
        let k = per_scale * n_scales;
        let values: Vec<f64> = (0..k * dim).map(|i| i as f64).collect();
        let cb = Codebook::from_codes(Tensor::from_vec(values.clone(), (k, dim), &Device::Cpu).unwrap(), n_scales, CodebookKind::Motion).unwrap();
        for i in 1..=n_scales {
            let v = cb.allocate(i).unwrap();
            prop_assert_eq!(v.n_allocated(), i * per_scale);
            prop_assert_eq!(to_vec_f64(v.codes()).unwrap(), values[..i * per_scale * dim].to_vec());
        }
    }

    #[test]
    fn perplexity_is_bounded_by_used_codes(counts in prop::collection::vec(0u64..50, 1..40)) {
        let used = counts.iter().filter(|c| **c > 0).count();
        let p = perplexity(&counts);
        if used == 0 {
            prop_assert_eq!(p, 0.0);
        } else {
            prop_assert!(p >= 1.0 - 1e-9 && p <= used as f64 + 1e-9);
        }
    }

    #[test]
    fn patchify_round_trips(b in 1usize..3, c in 1usize..4, window in 1usize..4, ph in 1usize..4) {
        let side = window * ph;
        let n = b * c * side * side;
        let x = Tensor::arange(0f64, n as f64, &Device::Cpu).unwrap().reshape((b, c, side, side)).unwrap();
        let p = patchify(&x, window).unwrap();
        prop_assert_eq!(p.dims(), &[b, window, window, c * ph * ph]);
        let back = unpatchify(&p, (c, side, side)).unwrap();
        prop_assert_eq!(to_vec_f64(&back).unwrap(), to_vec_f64(&x).unwrap());
    }

    #[test]
    fn identity_warp_is_exact(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
        let n = 2 * h * w;
        let data: Vec<f32> = (0..n as u64).map(|i| ((i * 7919 + seed * 104729) % 1009) as f32 / 1009.0).collect();
        let x = Tensor::from_vec(data, (1, 2, h, w), &Device::Cpu).unwrap();
        let flow = FlowField::identity(1, h, w, DType::F32, &Device::Cpu).unwrap();
        prop_assert_eq!(to_vec_f64(&warp(&x, &flow).unwrap()).unwrap(), to_vec_f64(&x).unwrap());
    }

    #[test]
    fn displacement_round_trips(h in 1usize..8, w in 1usize..8, d in prop::collection::vec(-1.0f64..1.0, 2)) {
        let disp = Tensor::from_vec(d.clone(), (1, 1, 1, 2), &Device::Cpu).unwrap().broadcast_as((1, h, w, 2)).unwrap();
        let flow = FlowField::identity(1, h, w, DType::F64, &Device::Cpu).unwrap().add_displacement(&disp).unwrap();
        let back = to_vec_f64(&flow.displacement().unwrap()).unwrap();
        for pair in back.chunks_exact(2) {
            prop_assert!((pair[0] - d[0]).abs() < 1e-12 && (pair[1] - d[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn image_metrics_are_symmetric(a in prop::collection::vec(0.0f32..1.0, 3..48), shift in 0.0f32..0.5) {
        let b: Vec<f32> = a.iter().map(|v| (v + shift).min(1.0)).collect();
        let l1 = metric_l1(&a, &b).unwrap();
        prop_assert!(l1 >= 0.0 && l1 <= shift as f64 + 1e-6);
        prop_assert_eq!(l1, metric_l1(&b, &a).unwrap());
        prop_assert_eq!(metric_psnr(&a, &b).unwrap(), metric_psnr(&b, &a).unwrap());
        prop_assert_eq!(metric_l1(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn config_toml_round_trips(steps in 1u64..100_000, seed in any::<u64>(), lr in 1e-6f64..1e-2, full in any::<bool>()) {
        let mut cfg = if full { Config::full() } else { Config::desk() };
        cfg.train.steps = steps;
        cfg.train.seed = seed;
        cfg.train.learning_rate = lr;
        let back = Config::from_toml_str(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
