use proptest::prelude::*;
use rand::Rng;
use unlearn_core::eval::{alpha_beta_estimate, kl_divergence};
use unlearn_core::sisa::{sisa_train, sisa_train_with_assignment, sisa_unlearn, SisaConfig};
use unlearn_core::*;

fn table(n: usize, p: usize, seed: u64) -> DatasetTable {
    let mut r = RngStream::new(seed, 7).rng();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let labels = rows.iter().map(|row| u32::from(row[0] - 0.5 * row[p - 1] + r.random_range(-1.0..1.0) > 0.0)).collect();
    DatasetTable::from_rows(&rows, labels, 2).unwrap()
}

fn spec_for(kind: bool, lambda: f64) -> LossSpec {
    if kind { LossSpec::logistic(lambda) } else { LossSpec::squared(lambda) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_central_differences(
        seed in 0u64..10_000,
        theta in proptest::collection::vec(-2.0f64..2.0, 6),
        logistic in any::<bool>(),
        lambda in 0.0f64..0.5,
    ) {
        let data = table(50, 5, seed);
        let spec = spec_for(logistic, lambda);
        let theta = ParamVector::new(theta);
        let g = loss_gradient(&theta, &data, &spec).unwrap();
        let h = 1e-6;
        let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for j in 0..theta.len() {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (loss_value(&up, &data, &spec).unwrap() - loss_value(&down, &data, &spec).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-6 * scale, "coord {}: fd {} vs {}", j, fd, g[j]);
        }
    }

    #[test]
    fn hessian_is_symmetric_psd(
        seed in 0u64..10_000,
        theta in proptest::collection::vec(-3.0f64..3.0, 5),
        logistic in any::<bool>(),
        lambda in 0.0f64..0.5,
    ) {
        let data = table(30, 4, seed);
        let h = loss_hessian(&ParamVector::new(theta), &data, &spec_for(logistic, lambda)).unwrap();
        let asym = (&h - h.transpose()).abs().max();
        prop_assert!(asym <= 1e-15 * h.abs().max().max(1.0));
        prop_assert!(h.symmetric_eigenvalues().min() >= -1e-10);
    }

    #[test]
    fn remove_rows_composes(seed in 0u64..10_000, mask in proptest::collection::vec(0u8..3, 40)) {
        let data = table(40, 3, seed);
        let a: Vec<SampleId> = (0..40).filter(|&i| mask[i] == 1).map(|i| data.id(i)).collect();
        let b: Vec<SampleId> = (0..40).filter(|&i| mask[i] == 2).map(|i| data.id(i)).collect();
        let ab = data.remove_rows(&a).unwrap().remove_rows(&b).unwrap();
        let ba = data.remove_rows(&b).unwrap().remove_rows(&a).unwrap();
        let both: Vec<SampleId> = a.iter().chain(&b).copied().collect();
        let once = data.remove_rows(&both).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert_eq!(&ab, &once);
        prop_assert_eq!(once.n(), 40 - both.len());
    }

    #[test]
    fn beta_hat_matches_recount(gaps in proptest::collection::vec(-1.0f64..1.0, 1..1000), alpha in -1.0f64..1.0) {
        let mut above = 0usize;
        for g in &gaps {
            if *g > alpha {
                above += 1;
            }
        }
        prop_assert_eq!(alpha_beta_estimate(&gaps, alpha).unwrap(), above as f64 / gaps.len() as f64);
    }

    #[test]
    fn kl_vanishes_only_on_equal_inputs(p in proptest::collection::vec(0.01f64..1.0, 3), q in proptest::collection::vec(0.01f64..1.0, 3)) {
        let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(p), norm(q));
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
        let d = kl_divergence(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-3) {
            prop_assert!(d > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sisa_deletion_touches_one_shard(seed in 0u64..1000, pick in 0usize..120) {
        let data = gaussian_blobs(&BlobSpec::new(120, 4, 2.0, seed)).unwrap();
        let spec = LossSpec::logistic(0.01);
        let cfg = SisaConfig::new(3, 4, 5, TrainConfig::full_batch(5, 0.5));
        let rng = RngStream::from_seed(seed);
        let model = sisa_train(&data, &spec, &cfg, rng).unwrap();
        let id = data.id(pick);
        let (next, _) = sisa_unlearn(&model, &data, &[id]).unwrap();
        let changed = model.shard_params().iter().zip(next.shard_params()).filter(|(a, b)| **a != *b).count();
        prop_assert!(changed <= 1);
        let oracle = sisa_train_with_assignment(&data, &spec, &cfg, model.assignment_without(&[id]), rng).unwrap();
        for (a, b) in next.shard_params().iter().zip(oracle.shard_params()) {
            prop_assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }
}

#[test]
fn sisa_retrain_cost_is_nonincreasing_in_slice() {
    let data = gaussian_blobs(&BlobSpec::new(300, 3, 2.0, 1)).unwrap();
    let cfg = SisaConfig::new(3, 6, 4, TrainConfig::full_batch(4, 0.5));
    let model = sisa_train(&data, &LossSpec::logistic(0.01), &cfg, RngStream::from_seed(1)).unwrap();
    for shard in 0..3 {
        let costs: Vec<u64> = (0..6).map(|j| model.retrain_evals(shard, j)).collect();
        assert!(costs.windows(2).all(|w| w[1] <= w[0]), "{costs:?}");
    }
}

#[test]
fn operations_are_pure() {
    let data = table(40, 3, 9);
    let spec = LossSpec::logistic(0.1);
    let theta = ParamVector::new(vec![0.3, -0.2, 0.1, 0.05]);
    assert_eq!(loss_gradient(&theta, &data, &spec).unwrap(), loss_gradient(&theta, &data, &spec).unwrap());
    assert_eq!(loss_hessian(&theta, &data, &spec).unwrap(), loss_hessian(&theta, &data, &spec).unwrap());
    assert_eq!(loss_value(&theta, &data, &spec).unwrap().to_bits(), loss_value(&theta, &data, &spec).unwrap().to_bits());
}
