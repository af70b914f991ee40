use gbtd_core::archspec::{self, builtin, resnext_spec, Cardinality, CountConvention};
use gbtd_core::convmap::{
    direct_conv2d, factored_forward, grouped_conv2d, grouped_conv2d_reference, ConvKernel,
    FactoredConvUnit,
};
use gbtd_core::cru::CollectiveGroup;
use gbtd_core::decomp::{btd_als, random_btd, AlsConfig, BlockTermDecomp, TuckerTerm};
use gbtd_core::io::{decode, encode};
use gbtd_core::{relative_error, DenseTensor, FactorMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..=1.0)).unwrap()
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> FactorMatrix {
    FactorMatrix::new(
        r,
        c,
        (0..r * c).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
    )
    .unwrap()
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..5)
}

fn close(a: &DenseTensor, b: &DenseTensor, tol: f64) -> bool {
    a.shape() == b.shape()
        && (b.frobenius_norm() == 0.0 && a.frobenius_norm() == 0.0
            || relative_error(a, b).unwrap() <= tol)
}

fn random_unit(
    rng: &mut ChaCha8Rng,
    r: usize,
    d: usize,
    k: usize,
    d3: usize,
    d4: usize,
) -> FactoredConvUnit {
    FactoredConvUnit::new(
        (0..r).map(|_| rand_matrix(rng, d3, d)).collect(),
        (0..r).map(|_| rand_tensor(rng, &[k, k, d, d])).collect(),
        (0..r).map(|_| rand_matrix(rng, d4, d)).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fold_inverts_unfold(shape in shape_strategy(), seed: u64, pick: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_tensor(&mut rng, &shape);
        let mode = pick % shape.len();
        let m = t.unfold(mode).unwrap();
        prop_assert_eq!(m.shape(), &[shape[mode], t.len() / shape[mode]][..]);
        prop_assert_eq!(DenseTensor::fold(&m, mode, &shape).unwrap(), t);
    }

    #[test]
    fn slice_inverts_concat(shape in shape_strategy(), extra in 1usize..4, seed: u64, pick: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = pick % shape.len();
        let mut other = shape.clone();
        other[mode] = extra;
        let a = rand_tensor(&mut rng, &shape);
        let b = rand_tensor(&mut rng, &other);
        let c = DenseTensor::concat_mode(&[a.clone(), b.clone()], mode).unwrap();
        prop_assert_eq!(c.slice_mode(mode, 0, shape[mode]).unwrap(), a);
        prop_assert_eq!(c.slice_mode(mode, shape[mode], extra).unwrap(), b);
    }

    #[test]
    fn distinct_mode_products_commute(shape in prop::collection::vec(1usize..5, 2..5), seed: u64, p: usize, q: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.len();
        let (m1, m2) = (p % n, (p % n + 1 + q % (n - 1)) % n);
        let t = rand_tensor(&mut rng, &shape);
        let (ra, rb) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let a = rand_matrix(&mut rng, ra, shape[m1]);
        let b = rand_matrix(&mut rng, rb, shape[m2]);
        let ab = t.mode_n_product(&a, m1).unwrap().mode_n_product(&b, m2).unwrap();
        let ba = t.mode_n_product(&b, m2).unwrap().mode_n_product(&a, m1).unwrap();
        prop_assert!(close(&ab, &ba, 1e-12));
    }

    #[test]
    fn same_mode_products_compose(shape in shape_strategy(), seed: u64, pick: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = pick % shape.len();
        let t = rand_tensor(&mut rng, &shape);
        let (ra, rb) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let a = rand_matrix(&mut rng, ra, shape[mode]);
        let b = rand_matrix(&mut rng, rb, a.rows());
        let seq = t.mode_n_product(&a, mode).unwrap().mode_n_product(&b, mode).unwrap();
        let once = t.mode_n_product(&b.matmul(&a).unwrap(), mode).unwrap();
        prop_assert!(close(&seq, &once, 1e-12));
    }

    #[test]
    fn gbt1_round_trip(shape in shape_strategy(), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_tensor(&mut rng, &shape);
        prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
    }

    #[test]
    fn reconstruct_is_linear_in_cores(seed: u64, alpha in -3.0f64..3.0) {
        let d = random_btd(&[3, 4, 2], 2, &[Some(2), None, Some(1)], seed).unwrap();
        let scaled: Vec<TuckerTerm> = d
            .terms()
            .iter()
            .map(|t| TuckerTerm::new(t.core().scale(alpha), t.factors().to_vec()).unwrap())
            .collect();
        let scaled = BlockTermDecomp::new(scaled, vec![3, 4, 2]).unwrap();
        prop_assert!(close(&scaled.reconstruct(), &d.reconstruct().scale(alpha), 1e-12));
        // a decomposition is the sum of its single-term pieces
        let parts = d.terms().iter().map(|t| t.reconstruct()).reduce(|a, b| a.add(&b).unwrap()).unwrap();
        prop_assert_eq!(parts, d.reconstruct());
    }

    #[test]
    fn factored_forward_is_linear(seed: u64, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = random_unit(&mut rng, 2, 2, 3, 5, 4);
        let u = rand_tensor(&mut rng, &[5, 4, 5]);
        let v = rand_tensor(&mut rng, &[5, 4, 5]);
        let mix = u.scale(alpha).add(&v.scale(beta)).unwrap();
        let lhs = factored_forward(&mix, &unit).unwrap();
        let rhs = factored_forward(&u, &unit).unwrap().scale(alpha).add(&factored_forward(&v, &unit).unwrap().scale(beta)).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-10));
    }

    #[test]
    fn convolution_commutes_with_interior_shifts(seed: u64, dx in 0usize..3, dy in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h, c) = (12, 11, 3);
        let patch = rand_tensor(&mut rng, &[4, 4, c]);
        let place = |ox: usize, oy: usize| {
            DenseTensor::from_fn(&[w, h, c], |i| {
                let (x, y) = (i[0] as isize - ox as isize, i[1] as isize - oy as isize);
                if (0..4).contains(&x) && (0..4).contains(&y) { patch.get(&[x as usize, y as usize, i[2]]) } else { 0.0 }
            }).unwrap()
        };
        let kernel = ConvKernel::new(rand_tensor(&mut rng, &[3, 3, c, 2])).unwrap();
        let base = direct_conv2d(&place(2, 2), &kernel).unwrap();
        let moved = direct_conv2d(&place(2 + dx, 2 + dy), &kernel).unwrap();
        for x in 0..w - dx {
            for y in 0..h - dy {
                for o in 0..2 {
                    prop_assert!((moved.get(&[x + dx, y + dy, o]) - base.get(&[x, y, o])).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn blocked_grouped_conv_is_bitwise_reference(seed: u64, groups in 1usize..4, gin in 1usize..4, gout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(k..9), rng.gen_range(k..9));
        let u = rand_tensor(&mut rng, &[w, h, groups * gin]);
        let cores: Vec<_> = (0..groups).map(|_| rand_tensor(&mut rng, &[k, k, gin, gout])).collect();
        let pad = ((k - 1) / 2, (k - 1) / 2);
        prop_assert_eq!(
            grouped_conv2d(&u, &cores, (stride, stride), pad).unwrap(),
            grouped_conv2d_reference(&u, &cores, (stride, stride), pad).unwrap()
        );
    }

    #[test]
    fn unit_kernels_slice_joint_kernel_bitwise(seed: u64, units in 1usize..5, r in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let group = CollectiveGroup::new(
            (0..r).map(|_| rand_matrix(&mut rng, 4, 2)).collect(),
            (0..r).map(|_| rand_tensor(&mut rng, &[3, 3, 2, 2])).collect(),
            (0..units).map(|_| (0..r).map(|_| rand_matrix(&mut rng, 3, 2)).collect()).collect(),
        ).unwrap();
        let joint = group.to_decomposition().reconstruct();
        for l in 0..units {
            let kernel = group.unit_kernel(l).unwrap();
            prop_assert_eq!(kernel.tensor(), &joint.slice_mode(3, 3 * l, 3).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn als_trace_never_rises(seed: u64, terms in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 5, 3]);
        let cfg = AlsConfig { max_sweeps: 60, restarts: 2, seed, ..AlsConfig::default() };
        let fit = btd_als(&x, terms, &[Some(2), Some(2), None], &cfg).unwrap();
        for pair in fit.error_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-10, "{:?}", pair);
        }
    }

    #[test]
    fn resnext_params_follow_closed_form(
        reps in prop::array::uniform4(1usize..5),
        card in prop::sample::select(vec![1usize, 2, 4, 8, 32]),
        d in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let base = card * d;
        let spec = resnext_spec("probe", reps, Cardinality::Fixed(card), base).unwrap();
        let conv = CountConvention::default();
        // stem conv + norm, then per unit: three convs + norms, projection on the first
        let mut want = 7 * 7 * 3 * 64 + 2 * 64;
        let mut cin = 64;
        for (i, &n) in reps.iter().enumerate() {
            let (w, out) = (base << i, 256 << i);
            for u in 0..n {
                let c = if u == 0 { cin } else { out };
                want += c * w + 2 * w + 9 * (w / card) * w + 2 * w + w * out + 2 * out;
                if u == 0 {
                    want += c * out + 2 * out;
                }
            }
            cin = out;
        }
        want += 2048 * 1000 + 1000;
        prop_assert_eq!(archspec::param_count(&spec, &conv).unwrap(), want as u64);
    }
}

#[test]
fn sharing_saves_exactly_the_reported_windows() {
    let conv = CountConvention::default();
    for name in archspec::builtin_names() {
        let spec = builtin(name).unwrap();
        let with = archspec::count(&spec, 224, &conv).unwrap();
        let without = archspec::count(&spec.without_sharing(), 224, &conv).unwrap();
        assert_eq!(without.params - with.params, with.saved_params, "{name}");
        assert_eq!(with.flops, without.flops, "{name}");
        let stage_sum: u64 =
            with.stages.iter().map(|s| s.params).sum::<u64>() + with.classifier_params;
        assert_eq!(stage_sum, with.params, "{name}");
    }
}
