use proptest::prelude::*;
use qcache::cache::{CacheConfig, QuantizedKvCache, WindowConfig};
use qcache::kernels::{qgemv_inner, qgemv_outer};
use qcache::quant::{
    dequantize_group, dequantize_matrix, estimate_packed_bits, quantize_group_asym,
    quantize_group_hybrid, quantize_group_sym, quantize_matrix, GroupingAxis, QuantConfig,
    QuantMode,
};
use qcache::tensor::matmul_ref;
use qcache::Matrix;

fn ulp(x: f32) -> f32 {
    let a = x.abs();
    a.next_up() - a
}

fn group(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop_oneof![
        prop::collection::vec(-100.0f32..100.0, len),
        prop::collection::vec(-1e-3f32..1e-3, len),
        (prop::collection::vec(-1.0f32..1.0, len), 0.5f32..50.0)
            .prop_map(|(v, off)| v.into_iter().map(|x| x + off).collect()),
    ]
}

fn sse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn mode() -> impl Strategy<Value = QuantMode> {
    prop_oneof![
        Just(QuantMode::Asym),
        Just(QuantMode::Sym),
        Just(QuantMode::Hybrid),
        Just(QuantMode::HybridPrefill),
    ]
}

fn config() -> impl Strategy<Value = QuantConfig> {
    (1u8..=8, mode(), prop::sample::select(vec![8usize, 16, 32])).prop_map(|(b, m, g)| {
        let g = if m.has_mask() { 32 } else { g };
        QuantConfig::new(b, g, m).unwrap()
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-4.0f32..4.0, rows * cols)
        .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn round_trip_within_half_step(v in group(32), bits in 1u8..=8) {
        for enc in [quantize_group_asym(&v, bits).unwrap(), quantize_group_sym(&v, bits).unwrap()] {
            let r = dequantize_group(&enc).unwrap();
            for (&x, &y) in v.iter().zip(&r) {
                let bound = enc.scale as f64 / 2.0 + ulp(x.abs().max(y.abs())) as f64;
                prop_assert!((x as f64 - y as f64).abs() <= bound, "{x} -> {y}, scale {}", enc.scale);
            }
        }
    }

    #[test]
    fn hybrid_is_the_better_mode(v in group(32), bits in 1u8..=8) {
        let a = quantize_group_asym(&v, bits).unwrap();
        let s = quantize_group_sym(&v, bits).unwrap();
        let (h, stats) = quantize_group_hybrid(&v, bits).unwrap();
        let (ea, es) = (sse(&v, &dequantize_group(&a).unwrap()), sse(&v, &dequantize_group(&s).unwrap()));
        prop_assert_eq!(stats.sse_asym, ea);
        prop_assert_eq!(stats.sse_sym, es);
        prop_assert_eq!(sse(&v, &dequantize_group(&h).unwrap()), ea.min(es));
        prop_assert_eq!(&h, if ea < es { &a } else { &s });
    }

    #[test]
    fn symmetric_scale_covariance(v in group(32), bits in 1u8..=8, e in -8i32..8) {
        let c = 2f32.powi(e);
        let a = quantize_group_sym(&v, bits).unwrap();
        let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
        let b = quantize_group_sym(&scaled, bits).unwrap();
        prop_assert_eq!(&a.codes, &b.codes);
        prop_assert_eq!(a.aux, b.aux);
        prop_assert_eq!(a.scale * c, b.scale);
    }

    #[test]
    fn kernels_match_dequantized_product(
        cfg in config(),
        (m, a) in (1usize..=3, 1usize..=4).prop_flat_map(|(r, k)| (matrix(32 * r, 32 * k), prop::collection::vec(-2.0f32..2.0, 32 * k))),
    ) {
        let col = Matrix::new(a.len(), 1, a.clone()).unwrap();
        let mut stats = Vec::new();
        for axis in [GroupingAxis::Inner, GroupingAxis::Outer] {
            let p = quantize_matrix(&m, axis, &cfg).unwrap();
            let want = matmul_ref(&dequantize_matrix(&p), &col).unwrap();
            let got = if axis == GroupingAxis::Inner { qgemv_inner(&a, &p.view()) } else { qgemv_outer(&a, &p.view()) }.unwrap();
            // same reconstruction, same f64 summation order
            prop_assert_eq!(got.output.as_slice(), want.data());
            stats.push(got.stats);
        }
        let (inner, outer) = (stats[0], stats[1]);
        prop_assert_eq!(outer.scale_loads, inner.scale_loads * cfg.group_size() as u64);
        prop_assert_eq!(outer.aux_loads, inner.aux_loads * cfg.group_size() as u64);
        prop_assert_eq!(outer.flops, inner.flops);
    }

    #[test]
    fn matrix_groups_match_group_functions(
        bits in 1u8..=8,
        mode in mode(),
        rows in prop::collection::vec(group(32), 1..8),
    ) {
        let cfg = QuantConfig::new(bits, 32, mode).unwrap();
        let data: Vec<f32> = rows.concat();
        let m = Matrix::new(rows.len(), 32, data).unwrap();
        let p = quantize_matrix(&m, GroupingAxis::Inner, &cfg).unwrap();
        for (gi, v) in rows.iter().enumerate() {
            let want = match mode {
                QuantMode::Asym => quantize_group_asym(v, bits).unwrap(),
                QuantMode::Sym => quantize_group_sym(v, bits).unwrap(),
                _ => quantize_group_hybrid(v, bits).unwrap().0,
            };
            let g = p.group(gi);
            prop_assert_eq!(g.scale, want.scale);
            prop_assert_eq!(g.aux, want.aux);
            prop_assert_eq!(g.is_symmetric, want.is_symmetric);
            prop_assert_eq!(qcache::quant::unpack_codes(g.packed_codes, 32, bits).unwrap(), want.codes);
        }
    }

    #[test]
    fn packed_size_matches_estimate(cfg in config(), rows in 1usize..6, groups in 1usize..5) {
        let m = Matrix::from_fn(rows, groups * cfg.group_size(), |i, j| ((i * 7 + j) as f32).sin());
        let p = quantize_matrix(&m, GroupingAxis::Inner, &cfg).unwrap();
        let n = p.num_groups() as u64;
        let mask_bits = if cfg.mode().has_mask() { n } else { 0 };
        let actual = 8 * (p.code_bytes().len() + 4 * p.scales().len() + 4 * p.aux_words().len()) as u64 + mask_bits;
        prop_assert_eq!(actual, estimate_packed_bits(&cfg, (rows * groups * cfg.group_size()) as u64));
        prop_assert_eq!(p.mask_bytes().len() as u64, mask_bits.div_ceil(8));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cache_conserves_tokens(
        prefill in 1usize..260,
        steps in 0usize..120,
        w_sink in 0usize..40,
        w_recent in 32usize..80,
    ) {
        let cfg = CacheConfig {
            quant: QuantConfig::new(2, 32, QuantMode::HybridPrefill).unwrap(),
            windows: WindowConfig { w_sink, w_recent },
            quantize: true,
        };
        let k = Matrix::from_fn(prefill + steps, 32, |i, j| ((i * 3 + j * 5) as f32 * 0.1).cos());
        let mut c = QuantizedKvCache::init_from_prefill(&k.slice_rows(0, prefill).unwrap(), &k.slice_rows(0, prefill).unwrap(), cfg).unwrap();
        let sink = c.key_views().sink.clone();
        c.check_invariants().unwrap();
        let mut groups = c.key_views().middle.num_groups();
        for t in prefill..prefill + steps {
            c.append_token(k.row(t), k.row(t)).unwrap();
            prop_assert!(c.check_invariants().is_ok());
            let l = c.layout();
            prop_assert!(l.k_recent < w_recent + 32 && l.v_recent < w_recent + 32);
            if l.total_tokens >= w_sink + w_recent + 32 {
                prop_assert!(l.k_recent >= w_recent && l.v_recent >= w_recent);
            }
            let g = c.key_views().middle.num_groups();
            prop_assert!(g >= groups);
            groups = g;
            if sink.rows() == w_sink {
                prop_assert_eq!(c.key_views().sink, &sink);
            }
        }
        // order preserved: sink and recent rows are the original rows
        let rk = c.reconstruct_keys();
        let l = c.layout();
        let all = k.slice_rows(0, prefill + steps).unwrap();
        prop_assert_eq!(rk.slice_rows(0, l.sink).unwrap(), all.slice_rows(0, l.sink).unwrap());
        let n = l.total_tokens;
        prop_assert_eq!(rk.slice_rows(n - l.k_recent, n).unwrap(), all.slice_rows(n - l.k_recent, n).unwrap());
        let max_scale = |m: &qcache::quant::PackedMatrix| m.scales().iter().fold(0.0f32, |a, &s| a.max(s));
        let bound = max_scale(c.key_views().middle) as f64 / 2.0 + 1e-6;
        prop_assert!(rk.max_abs_diff(&all).unwrap() <= bound);
    }
}
