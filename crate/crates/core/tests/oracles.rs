//! Library results checked against independent brute-force computations.

use gbtd_core::convmap::{
    add_channel_bias, compress_kernel, direct_conv2d, factored_forward, fuse_affine, ConvKernel,
    FactoredConvUnit,
};
use gbtd_core::cru::{collective_compress, CollectiveGroup};
use gbtd_core::decomp::{random_btd, AlsConfig, BlockTermDecomp};
use gbtd_core::{relative_error, Activation, DenseTensor, FactorMatrix};
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

#[test]
fn generalized_product_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = rand_tensor(&mut rng, &[3, 4, 2]);
    let a = rand_matrix(&mut rng, 5, 4);
    let got = t
        .generalized_mode_n_product(&a, 1, &Activation::Relu)
        .unwrap();
    assert_eq!(got.shape(), &[3, 5, 2]);
    for i in 0..3 {
        for o in 0..5 {
            for k in 0..2 {
                let s: f64 = (0..4).map(|j| a.get(o, j) * t.get(&[i, j, k])).sum();
                assert!((got.get(&[i, o, k]) - s.max(0.0)).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn norm_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = rand_tensor(&mut rng, &[5, 3, 2]);
    let mut s = 0.0;
    for v in t.data() {
        s += v * v;
    }
    assert!((t.frobenius_norm() - s.sqrt()).abs() < 1e-14);
}

#[test]
fn btd_reconstruct_matches_nested_loops() {
    let d = random_btd(&[4, 4, 4], 2, &[Some(2), Some(3), Some(2)], 3).unwrap();
    let x = d.reconstruct();
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                let mut s = 0.0;
                for term in d.terms() {
                    let (g, f) = (term.core(), term.factors());
                    let (a, b, c) = (
                        f[0].as_ref().unwrap(),
                        f[1].as_ref().unwrap(),
                        f[2].as_ref().unwrap(),
                    );
                    for p in 0..2 {
                        for q in 0..3 {
                            for r in 0..2 {
                                s += g.get(&[p, q, r]) * a.get(i, p) * b.get(j, q) * c.get(k, r);
                            }
                        }
                    }
                }
                assert!((x.get(&[i, j, k]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cp_and_tucker_degenerations() {
    let d = random_btd(&[4, 4, 4], 3, &[Some(1); 3], 4).unwrap();
    let cp = d.degrade_to_cp().unwrap();
    assert_eq!(cp.components.len(), 3);
    assert!(relative_error(&cp.reconstruct(), &d.reconstruct()).unwrap() < 1e-12);
    assert!(random_btd(&[4, 4, 4], 1, &[Some(2), Some(1), Some(1)], 4)
        .unwrap()
        .degrade_to_cp()
        .is_err());

    let single = random_btd(&[3, 4, 5], 1, &[Some(2), None, Some(3)], 5).unwrap();
    let term = single.clone().degrade_to_tucker().unwrap();
    let again = BlockTermDecomp::new(vec![term], vec![3, 4, 5]).unwrap();
    assert_eq!(again.reconstruct(), single.reconstruct());
    assert!(random_btd(&[3, 4, 5], 2, &[Some(2), None, Some(3)], 5)
        .unwrap()
        .degrade_to_tucker()
        .is_err());
}

#[test]
fn factored_forward_matches_composed_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let unit = FactoredConvUnit::new(
        (0..2).map(|_| rand_matrix(&mut rng, 8, 2)).collect(),
        (0..2)
            .map(|_| rand_tensor(&mut rng, &[3, 3, 2, 2]))
            .collect(),
        (0..2).map(|_| rand_matrix(&mut rng, 8, 2)).collect(),
    )
    .unwrap();
    let u = rand_tensor(&mut rng, &[6, 6, 8]);
    let a = factored_forward(&u, &unit).unwrap();
    let b = direct_conv2d(&u, &unit.compose()).unwrap();
    assert!(relative_error(&a, &b).unwrap() <= 1e-10);

    // zero output factors silence the unit whatever the activations
    let silent = FactoredConvUnit::new(
        unit.a3().to_vec(),
        unit.cores().to_vec(),
        vec![FactorMatrix::zeros(8, 2).unwrap(); 2],
    )
    .unwrap()
    .with_activations(Activation::Relu, Activation::custom(|x| x + 1.0));
    assert!(factored_forward(&u, &silent)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    // identity pointwise stages reduce to the core alone
    let core = rand_tensor(&mut rng, &[3, 3, 4, 5]);
    let plain = FactoredConvUnit::new(
        vec![FactorMatrix::identity(4).unwrap()],
        vec![core.clone()],
        vec![FactorMatrix::identity(5).unwrap()],
    )
    .unwrap();
    let u = rand_tensor(&mut rng, &[5, 5, 4]);
    let direct = direct_conv2d(&u, &ConvKernel::new(core).unwrap()).unwrap();
    assert!(relative_error(&factored_forward(&u, &plain).unwrap(), &direct).unwrap() < 1e-14);
}

#[test]
fn fused_affine_matches_unfused_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = ConvKernel::new(rand_tensor(&mut rng, &[3, 3, 3, 4])).unwrap();
    let scale: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let shift: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let u = rand_tensor(&mut rng, &[5, 6, 3]);
    let plain = direct_conv2d(&u, &k).unwrap();
    let (fk, bias) = fuse_affine(&k, &scale, &shift).unwrap();
    let fused = add_channel_bias(&direct_conv2d(&u, &fk).unwrap(), &bias).unwrap();
    for x in 0..5 {
        for y in 0..6 {
            for c in 0..4 {
                let want = scale[c] * plain.get(&[x, y, c]) + shift[c];
                assert!((fused.get(&[x, y, c]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn compressed_kernel_recovers_and_runs() {
    let truth = random_btd(&[3, 3, 8, 8], 2, &[None, None, Some(2), Some(2)], 8)
        .unwrap()
        .reconstruct();
    let k = ConvKernel::new(truth).unwrap();
    let (unit, err) = compress_kernel(&k, 2, 2, 2, &AlsConfig::default()).unwrap();
    assert!(err < 1e-6, "{err}");
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for _ in 0..3 {
        let u = rand_tensor(&mut rng, &[7, 7, 8]);
        let a = factored_forward(&u, &unit).unwrap();
        let b = direct_conv2d(&u, &k).unwrap();
        assert!(relative_error(&a, &b).unwrap() <= 1e-5);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let full = ConvKernel::new(rand_tensor(&mut rng, &[3, 3, 3, 4])).unwrap();
    let (_, err) = compress_kernel(&full, 1, 3, 4, &AlsConfig::default()).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn single_unit_collective_equals_compress_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = ConvKernel::new(rand_tensor(&mut rng, &[3, 3, 5, 4])).unwrap();
    let cfg = AlsConfig {
        max_sweeps: 30,
        restarts: 2,
        seed: 3,
        ..AlsConfig::default()
    };
    let (unit, e1) = compress_kernel(&k, 2, 2, 2, &cfg).unwrap();
    let (group, e2) = collective_compress(std::slice::from_ref(&k), 2, 2, 2, &cfg).unwrap();
    assert_eq!(e1, e2);
    let g = group.unit(0).unwrap();
    assert_eq!(g.a3(), unit.a3());
    assert_eq!(g.cores(), unit.cores());
    assert_eq!(g.a4(), unit.a4());
}

#[test]
fn identical_kernels_give_identical_units() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let k = ConvKernel::new(rand_tensor(&mut rng, &[3, 3, 4, 3])).unwrap();
    let cfg = AlsConfig {
        max_sweeps: 40,
        restarts: 1,
        ..AlsConfig::default()
    };
    let (group, _) = collective_compress(&[k.clone(), k.clone(), k], 2, 2, 2, &cfg).unwrap();
    let kernels: Vec<_> = (0..3).map(|l| group.unit_kernel(l).unwrap()).collect();
    let u = rand_tensor(&mut rng, &[6, 5, 4]);
    let outs: Vec<_> = (0..3).map(|l| group.unit_forward(l, &u).unwrap()).collect();
    for l in 1..3 {
        assert!(relative_error(kernels[l].tensor(), kernels[0].tensor()).unwrap() <= 1e-10);
        assert!(relative_error(&outs[l], &outs[0]).unwrap() <= 1e-8);
    }
}

#[test]
fn shared_factor_kernels_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = CollectiveGroup::new(
        (0..2).map(|_| rand_matrix(&mut rng, 6, 2)).collect(),
        (0..2)
            .map(|_| rand_tensor(&mut rng, &[3, 3, 2, 2]))
            .collect(),
        (0..3)
            .map(|_| (0..2).map(|_| rand_matrix(&mut rng, 4, 2)).collect())
            .collect(),
    )
    .unwrap();
    let kernels: Vec<_> = (0..3).map(|l| truth.unit_kernel(l).unwrap()).collect();
    let (group, err) = collective_compress(&kernels, 2, 2, 2, &AlsConfig::default()).unwrap();
    assert!(err < 1e-6, "{err}");
    let u = rand_tensor(&mut rng, &[5, 5, 6]);
    for (l, k) in kernels.iter().enumerate() {
        let a = group.unit_forward(l, &u).unwrap();
        let b = direct_conv2d(&u, k).unwrap();
        assert!(relative_error(&a, &b).unwrap() < 1e-5);
    }
}

#[test]
fn sharing_counts_match_stored_numbers() {
    let (r, d3, d4, units) = (640, 1024, 1024, 6);
    let group = |units: usize| {
        CollectiveGroup::new(
            vec![FactorMatrix::zeros(d3, 1).unwrap(); r],
            vec![DenseTensor::zeros(&[3, 3, 1, 1]).unwrap(); r],
            vec![vec![FactorMatrix::zeros(d4, 1).unwrap(); r]; units],
        )
        .unwrap()
    };
    let g = group(units);
    // enumerate the numbers actually held by the group
    let shared_storage: usize = g
        .shared()
        .a3()
        .iter()
        .map(|f| f.data().len())
        .sum::<usize>()
        + g.shared()
            .cores()
            .iter()
            .map(|c| c.data().len())
            .sum::<usize>();
    let unit_storage: usize = g
        .per_unit_a4()
        .iter()
        .flatten()
        .map(|f| f.data().len())
        .sum();
    assert_eq!(g.shared_param_count(), shared_storage + unit_storage);
    assert_eq!(g.shared_param_count(), 640 * (9 + 1024) + 6 * 640 * 1024);
    assert_eq!(g.independent_param_count(), 6 * 640 * (9 + 1024 + 1024));
    let counts = g.sharing_counts();
    assert!((counts.ratio - counts.shared as f64 / counts.independent as f64).abs() < 1e-15);

    let doubled = group(2 * units);
    assert_eq!(doubled.shared().param_count(), g.shared().param_count());
    assert_eq!(
        doubled.shared_param_count() - doubled.shared().param_count(),
        2 * unit_storage
    );
}
