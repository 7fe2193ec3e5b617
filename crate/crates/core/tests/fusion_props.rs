use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thama_core::fusion::*;
use thama_core::gradcheck::grad_check;
use thama_core::graph::{Graph, Mode};
use thama_core::layers::Initializer;
use thama_core::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Z_k = Σ_ij T_ijk F1_i F2_j` with `T_ijk = Σ_abc G_abc A_ia B_jb C_kc`,
/// evaluated by plain nested loops.
fn oracle(f1: &[f64], f2: &[f64], core: &TuckerCoreFactored<f64>) -> Vec<f64> {
    let d = core.fused_dim();
    let [r1, r2, r3] = core.ranks();
    let (g, a, b, c) = (core.g.data(), core.a.data(), core.b.data(), core.c.data());
    let mut t = vec![0.0; d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                let mut s = 0.0;
                for p in 0..r1 {
                    for q in 0..r2 {
                        for r in 0..r3 {
                            s += g[(p * r2 + q) * r3 + r]
                                * a[i * r1 + p]
                                * b[j * r2 + q]
                                * c[k * r3 + r];
                        }
                    }
                }
                t[(i * d + j) * d + k] = s;
            }
        }
    }
    let mut z = vec![0.0; d];
    for (k, zk) in z.iter_mut().enumerate() {
        for i in 0..d {
            for j in 0..d {
                *zk += t[(i * d + j) * d + k] * f1[i] * f2[j];
            }
        }
    }
    z
}

fn random_factored(rng: &mut ChaCha8Rng) -> TuckerCoreFactored<f64> {
    let d = rng.gen_range(1..=8);
    let r = [
        rng.gen_range(1..=d),
        rng.gen_range(1..=d),
        rng.gen_range(1..=d),
    ];
    TuckerCoreFactored::new(
        rand_tensor(rng, &r),
        rand_tensor(rng, &[d, r[0]]),
        rand_tensor(rng, &[d, r[1]]),
        rand_tensor(rng, &[d, r[2]]),
    )
    .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn factored_equals_full_over_reconstructed_core() {
    for trial in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let core = random_factored(&mut rng);
        let d = core.fused_dim();
        let f1 = rand_tensor(&mut rng, &[d]);
        let f2 = rand_tensor(&mut rng, &[d]);
        let factored = tucker_fuse_factored(&f1, &f2, &core).unwrap();
        let full = tucker_fuse_full(&f1, &f2, &reconstruct_core(&core)).unwrap();
        let expect = oracle(f1.data(), f2.data(), &core);
        assert!(
            max_abs_diff(factored.data(), full.data()) < 1e-5,
            "trial {trial}"
        );
        assert!(max_abs_diff(full.data(), &expect) < 1e-9, "trial {trial}");
    }
}

#[test]
fn reconstruction_d4_ranks_222() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let core = TuckerCoreFactored::new(
        rand_tensor(&mut rng, &[2, 2, 2]),
        rand_tensor(&mut rng, &[4, 2]),
        rand_tensor(&mut rng, &[4, 2]),
        rand_tensor(&mut rng, &[4, 2]),
    )
    .unwrap();
    let f1 = rand_tensor(&mut rng, &[4]);
    let f2 = rand_tensor(&mut rng, &[4]);
    let full = tucker_fuse_full(&f1, &f2, &reconstruct_core(&core)).unwrap();
    assert!(max_abs_diff(full.data(), &oracle(f1.data(), f2.data(), &core)) < 1e-12);
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0))
}

proptest! {
    #[test]
    fn full_fusion_is_bilinear(seed in any::<u64>(), d in 1usize..7, alpha in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = TuckerCoreFull::new(rand_tensor(&mut rng, &[d, d, d])).unwrap();
        let (f1, g1, f2, g2) = (
            rand_tensor(&mut rng, &[d]),
            rand_tensor(&mut rng, &[d]),
            rand_tensor(&mut rng, &[d]),
            rand_tensor(&mut rng, &[d]),
        );
        let z = |a: &Tensor<f64>, b: &Tensor<f64>| tucker_fuse_full(a, b, &core).unwrap().data().to_vec();
        let base = z(&f1, &f2);
        let scaled: Vec<f64> = base.iter().map(|v| alpha * v).collect();
        prop_assert!(close(&z(&f1.map(|v| alpha * v), &f2), &scaled));
        prop_assert!(close(&z(&f1, &f2.map(|v| alpha * v)), &scaled));
        let sum1 = Tensor::vector(f1.data().iter().zip(g1.data()).map(|(a, b)| a + b).collect());
        let sum2 = Tensor::vector(f2.data().iter().zip(g2.data()).map(|(a, b)| a + b).collect());
        let add1: Vec<f64> = base.iter().zip(z(&g1, &f2)).map(|(a, b)| a + b).collect();
        let add2: Vec<f64> = base.iter().zip(z(&f1, &g2)).map(|(a, b)| a + b).collect();
        prop_assert!(close(&z(&sum1, &f2), &add1));
        prop_assert!(close(&z(&f1, &sum2), &add2));
    }

    #[test]
    fn hadamard_square_is_nonnegative_and_even(v in prop::collection::vec(-1e3f64..1e3, 0..20)) {
        let z = Tensor::vector(v.clone());
        let h = hadamard_square(&z);
        prop_assert!(h.data().iter().all(|&x| x >= 0.0));
        prop_assert_eq!(hadamard_square(&z.map(|x| -x)), h);
    }
}

#[test]
fn fusion_parameters_pass_grad_check() {
    for (trial, kind) in [CoreKind::Full, CoreKind::Factored { ranks: [2, 3, 4] }]
        .into_iter()
        .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(trial as u64);
        let mut init = Initializer::new(trial as u64);
        let mut g = Graph::<f64>::new();
        let x1 = g.input("x1", &[7], true).unwrap();
        let x2 = g.input("x2", &[5], true).unwrap();
        let f1 = add_projection(&mut g, &mut init, x1, "proj1", 7, 4).unwrap();
        let f2 = add_projection(&mut g, &mut init, x2, "proj2", 5, 4).unwrap();
        let z = add_tucker_fusion(&mut g, f1, f2, init_core(&mut init, 4, &kind)).unwrap();
        let h = add_hadamard_square(&mut g, z).unwrap();
        let w = g.param("probe", rand_tensor(&mut rng, &[4])).unwrap();
        let hw = g.mul(h, w).unwrap();
        let loss = g.reduce_mean(hw).unwrap();
        let (a, b) = (
            rand_tensor(&mut rng, &[3, 7]),
            rand_tensor(&mut rng, &[3, 5]),
        );
        let r = grad_check(
            &mut g,
            &[("x1", &a), ("x2", &b)],
            loss,
            1e-5,
            Mode::Inference,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{kind:?}: {r:?}");
        assert_eq!(r.kinks, 0);
    }
}
