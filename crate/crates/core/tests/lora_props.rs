mod oracles;

use peft_forge::lora::{init_adapter, trainable_param_count, LoraAdapter, LowRankUpdate, DEFAULT_INIT_STDDEV};
use peft_forge::{gaussian_matrix, matmul, Matrix, SeededRng};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=8, 1usize..=8, any::<u64>())
        .prop_flat_map(|(d, k, seed)| (Just(d), Just(k), 1..=d.min(k).min(4), Just(seed)))
}

fn random_adapter(rng: &mut SeededRng, d: usize, k: usize, r: usize, alpha: f64) -> LoraAdapter {
    let base = gaussian_matrix(rng, d, k, 1.0).unwrap();
    let a = gaussian_matrix(rng, r, k, 0.7).unwrap();
    let b = gaussian_matrix(rng, d, r, 0.7).unwrap();
    LoraAdapter::new(base, LowRankUpdate::new(a, b, alpha).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(n in 1usize..6, k in 1usize..6, m in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let a = gaussian_matrix(&mut rng, n, k, 1.0).unwrap();
        let b = gaussian_matrix(&mut rng, k, m, 1.0).unwrap();
        let want = oracles::naive_matmul(a.as_slice(), b.as_slice(), n, k, m);
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.as_slice().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn fresh_adapter_is_identity((d, k, r, seed) in dims(), alpha in 0.5f64..256.0) {
        let mut rng = SeededRng::new(seed);
        let base = gaussian_matrix(&mut rng, d, k, 1.0).unwrap();
        let x = gaussian_matrix(&mut rng, k, 3, 1.0).unwrap();
        let ad = init_adapter(&mut rng, base.clone(), r, alpha, DEFAULT_INIT_STDDEV).unwrap();
        prop_assert_eq!(ad.forward(&x).unwrap(), matmul(&base, &x).unwrap());
    }

    #[test]
    fn merged_forward_matches((d, k, r, seed) in dims(), alpha in 0.5f64..64.0) {
        let mut rng = SeededRng::new(seed);
        let ad = random_adapter(&mut rng, d, k, r, alpha);
        let x = gaussian_matrix(&mut rng, k, 4, 1.0).unwrap();
        let merged = matmul(&ad.merge().unwrap(), &x).unwrap();
        prop_assert!(ad.forward(&x).unwrap().max_abs_diff(&merged).unwrap() <= 1e-10);
    }

    #[test]
    fn gradients_match_central_differences((d, k, r, seed) in dims(), alpha in 0.5f64..16.0) {
        let mut rng = SeededRng::new(seed);
        let ad = random_adapter(&mut rng, d, k, r, alpha);
        let x = gaussian_matrix(&mut rng, k, 3, 1.0).unwrap();
        let g = gaussian_matrix(&mut rng, d, 3, 1.0).unwrap();
        let grads = ad.backward(&x, &g).unwrap();
        let objective = |a: &[f64], b: &[f64]| {
            let u = LowRankUpdate::new(
                Matrix::from_vec(r, k, a.to_vec()).unwrap(),
                Matrix::from_vec(d, r, b.to_vec()).unwrap(),
                alpha,
            ).unwrap();
            let h = LoraAdapter::new(ad.base().clone(), u).unwrap().forward(&x).unwrap();
            h.hadamard(&g).unwrap().sum()
        };
        let (a0, b0) = (ad.update().a().as_slice(), ad.update().b().as_slice());
        let fd_a = oracles::central_diff(|a| objective(a, b0), a0, 1e-5);
        let fd_b = oracles::central_diff(|b| objective(a0, b), b0, 1e-5);
        prop_assert!(oracles::rel_err(grads.grad_a.as_slice(), &fd_a) < 1e-5);
        prop_assert!(oracles::rel_err(grads.grad_b.as_slice(), &fd_b) < 1e-5);
    }

    #[test]
    fn param_count_is_linear_in_rank(shapes in prop::collection::vec((1usize..40, 1usize..40), 1..5), mult in 1usize..12) {
        let mut rng = SeededRng::new(1);
        let mk = |rng: &mut SeededRng, r: usize| -> Vec<LowRankUpdate> {
            shapes.iter().map(|&(d, k)| LowRankUpdate::init(rng, d.max(r), k.max(r), r, 1.0, 0.02).unwrap()).collect()
        };
        let small = mk(&mut rng, 1);
        let big = mk(&mut rng, mult);
        let expect = |r: usize| shapes.iter().map(|&(d, k)| r * (d.max(r) + k.max(r))).sum::<usize>();
        prop_assert_eq!(trainable_param_count(&small), expect(1));
        prop_assert_eq!(trainable_param_count(&big), expect(mult));
    }
}

#[test]
fn rank_ratio_ten_on_wide_layers() {
    let shapes = [(1024, 1024), (4096, 1024), (1024, 4096)];
    let count = |r: usize| {
        let set: Vec<LowRankUpdate> = shapes
            .iter()
            .map(|&(d, k)| LowRankUpdate::new(Matrix::zeros(r, k).unwrap(), Matrix::zeros(d, r).unwrap(), 1.0).unwrap())
            .collect();
        trainable_param_count(&set)
    };
    let (c64, c640) = (count(64), count(640));
    assert_eq!(c640, 10 * c64);
}
