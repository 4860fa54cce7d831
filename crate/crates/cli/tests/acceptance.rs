//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use unlearn_cli::bench::{run_benchmark, select_deletions, RunOptions};
use unlearn_cli::config::{BenchConfig, DatasetConfig, DeletionConfig, MethodConfig, StreamConfig, ToleranceConfig};
use unlearn_cli::dataset::load_dataset;
use unlearn_cli::stream::{simulate_stream, window_constants};
use unlearn_core::d2d::{pgd_unlearn, project_ball, run_sequence, ChainMode, D2DConfig, D2DState};
use unlearn_core::dare::{audit_forest, dare_train, DareParams};
use unlearn_core::deepobliviate::{block_train, block_train_with_blocks, deepobliviate_unlearn, ResidualSeries};
use unlearn_core::deltagrad::{deltagrad_unlearn, DeltaGradConfig};
use unlearn_core::dfa::dfa_exponent;
use unlearn_core::eval::{
    acc_err, alpha_beta_estimate, backdoor_experiment, classify_timing, compare_models, disagree_consistency,
    kl_divergence, monitor_proxies, param_diff, sape, speedup, BackdoorSpec, Metric, TimingClass,
};
use unlearn_core::linalg::ridge_closed_form;
use unlearn_core::loss::loss_hessian;
use unlearn_core::mechanism::Method;
use unlearn_core::rng::{normal_vec, tags};
use unlearn_core::secondorder::{fisher_unlearn, influence_unlearn, NoiseSpec, RemovalBatchPlan};
use unlearn_core::sisa::SisaConfig;
use unlearn_core::{gaussian_blobs, train_gd, train_test_split, BlobSpec, DatasetTable, LossSpec, ParamVector, RngStream, SampleId, TrainConfig};

type Outcome = Result<String, String>;

/// Name, check, and runtime budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn check(ok: bool, msg: impl Into<String>) -> Outcome {
    let msg = msg.into();
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn blobs(n: usize, p: usize, sep: f64, seed: u64) -> DatasetTable {
    gaussian_blobs(&BlobSpec::new(n, p, sep, seed)).unwrap()
}

fn every_kth(t: &DatasetTable, k: usize) -> Vec<SampleId> {
    (0..t.n()).step_by(k).map(|i| t.id(i)).collect()
}

fn quadratic_exactness() -> Outcome {
    let t = blobs(200, 5, 1.0, 1);
    let lambda = 0.1;
    let spec = LossSpec::squared(lambda);
    let theta = ridge_closed_form(&t, lambda, None).map_err(|e| e.to_string())?;
    let ids: Vec<SampleId> = every_kth(&t, 23);
    let oracle = ridge_closed_form(&t.remove_rows(&ids).unwrap(), lambda, None).unwrap();
    let f = fisher_unlearn(&theta, &t, &ids, &NoiseSpec::none(), &RemovalBatchPlan::single(), &spec).unwrap();
    let i = influence_unlearn(&theta, &t, &ids, &RemovalBatchPlan::single(), &spec).unwrap();
    let (ef, ei) = (f.sub(&oracle).norm2(), i.sub(&oracle).norm2());
    check(ef <= 1e-8 && ei <= 1e-8, format!("{} removed; fisher {ef:.1e}, influence {ei:.1e} (≤ 1e-8)", ids.len()))
}

fn sisa_exactness() -> Outcome {
    let data = blobs(2000, 10, 2.0, 2);
    let root = RngStream::from_seed(2);
    let (train, test) = train_test_split(&data, 0.2, root.derive(tags::SYNTHETIC)).unwrap();
    let spec = LossSpec::logistic(0.01);
    let method = Method::Sisa { spec, config: SisaConfig::new(4, 5, 50, TrainConfig::full_batch(50, 1.0)) };
    let (model, _) = method.train(&train, root).unwrap();
    let dels = select_deletions(&model, &train, &DeletionConfig::default(), root.derive(tags::DELETION)).unwrap();
    let ids: Vec<SampleId> = dels.iter().map(|d| SampleId(d.id)).collect();
    let (unlearned, _) = method.unlearn(&model, &train, &ids, root).unwrap();
    let (naive, _) = method.naive(&model, &train, &ids, root).unwrap();
    let gap = unlearned.params().unwrap().max_abs_diff(&naive.params().unwrap());
    let cmp = compare_models(&unlearned, &naive, &test, &train.select_ids(&ids).unwrap(), Metric::Accuracy).unwrap();
    check(
        gap <= 1e-12 && cmp.acc_err == 0.0 && cmp.disagree_pct == 100.0,
        format!("{} deletions; max |Δθ| {gap:.1e}, acc_err {}, disagree {}%", ids.len(), cmp.acc_err, cmp.disagree_pct),
    )
}

fn dare_integrity() -> Outcome {
    let data = blobs(14_000, 10, 2.0, 3);
    let params = DareParams { trees: 10, d_max: 10, d_rmax: 1, k: 5, p_tilde: 4 };
    let mut forest = dare_train(&data, params, RngStream::from_seed(3)).unwrap();
    let mut order = data.ids().to_vec();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut RngStream::new(3, tags::DELETION).rng());
    let (mut unlearn_work, mut retrain_work) = (0u64, 0u64);
    for &z in &order[..200] {
        unlearn_work += forest.delete(z).unwrap().work();
        retrain_work += forest.training_work();
    }
    let audit = audit_forest(&forest, &forest.alive_table());
    let ratio = retrain_work as f64 / unlearn_work.max(1) as f64;
    check(
        audit.is_clean() && ratio >= 10.0 && forest.alive_count() == 13_800,
        format!("audit {} discrepancies over {} nodes; work speedup {ratio:.1}x (≥ 10x)", audit.entries.len(), audit.nodes_checked),
    )
}

fn deltagrad_exactness() -> Outcome {
    let t = blobs(1000, 20, 1.0, 4);
    let spec = LossSpec::logistic(0.01);
    let cfg = TrainConfig::full_batch(100, 1.0);
    let rng = RngStream::from_seed(4);
    let (_, hist) = train_gd(&t, &spec, &cfg, rng).unwrap();
    let ids = every_kth(&t, 100);
    let (star, _) = train_gd(&t.remove_rows(&ids).unwrap(), &spec, &cfg, rng).unwrap();

    let (exact, _) = deltagrad_unlearn(&hist, &t, &ids, &DeltaGradConfig::new(0, 1, 2), rng).unwrap();
    let (same, _) = deltagrad_unlearn(&hist, &t, &[], &DeltaGradConfig::new(10, 5, 2), rng).unwrap();
    let dg = DeltaGradConfig::new(10, 5, 2);
    let (approx, rep) = deltagrad_unlearn(&hist, &t, &ids, &dg, rng).unwrap();
    let err = approx.sub(&star).norm2();
    let expected_exact = 10 + (100usize - 10).div_ceil(5);
    check(
        exact == star && &same == hist.final_params() && err < 1e-2 && rep.exact_steps == expected_exact,
        format!(
            "T0=1 bit-exact {}, empty removal exact {}, {} removed: ‖Δθ‖ {err:.1e} (< 1e-2), exact steps {} (= {expected_exact})",
            exact == star,
            &same == hist.final_params(),
            ids.len(),
            rep.exact_steps
        ),
    )
}

fn d2d_convergence() -> Outcome {
    let t = blobs(300, 5, 1.0, 5);
    let lambda = 0.1;
    let spec = LossSpec::squared(lambda);
    let theta = ridge_closed_form(&t, lambda, None).unwrap();
    let eig = loss_hessian(&theta, &t, &spec).unwrap().symmetric_eigenvalues();
    let eta = 2.0 / (eig.min() + eig.max());
    let cfg = D2DConfig::new(ChainMode::Perfect, 500, 0.0, eta);
    let state = D2DState::new(theta.clone(), t.clone(), &cfg).unwrap();
    let z = t.id(11);
    let next = pgd_unlearn(&state, z, &spec, &cfg.schedule, RngStream::from_seed(5)).unwrap();
    let star = project_ball(&ridge_closed_form(&t.remove_rows(&[z]).unwrap(), lambda, None).unwrap(), state.radius);
    let gap = next.published.sub(&star).norm2();

    let seq_cfg = D2DConfig::new(ChainMode::Perfect, 20, 0.0, eta);
    let ids: Vec<SampleId> = (0..50).map(|i| t.id(i * 3)).collect();
    let log = run_sequence(theta, &t, &ids, &spec, &seq_cfg, RngStream::from_seed(5), None).unwrap();
    let costs: Vec<f64> = log.entries.iter().map(|e| e.gradient_evals as f64).collect();
    let worst = costs.iter().map(|c| c / costs[0]).fold(0.0, f64::max);
    let class = classify_timing(&costs).unwrap();
    check(
        gap <= 1e-6 && worst <= 1.1 && costs.len() == 50 && class == TimingClass::Strong,
        format!("T=500 gap {gap:.1e} (≤ 1e-6); 50 requests max C_i/C_1 {worst:.3} (≤ 1.1), {class:?}"),
    )
}

fn deepobliviate_suite() -> Outcome {
    let data = blobs(800, 6, 1.5, 6);
    let spec = LossSpec::logistic(0.01);
    let cfg = TrainConfig::full_batch(15, 0.5);
    let rng = RngStream::from_seed(6);
    let (run, _) = block_train(&data, 8, &spec, &cfg, rng).unwrap();
    let z = run.blocks[1][7];
    let out = deepobliviate_unlearn(&run, &data, z, 0.0).unwrap();
    let mut blocks = run.blocks.clone();
    blocks[1].retain(|&id| id != z);
    let (naive, _) = block_train_with_blocks(&data, blocks, &spec, &cfg, rng).unwrap();
    let bit_exact = &out.model == naive.final_params() && out.run.params == naive.params;

    // DFA over 20 independent length-512 realizations per benchmark
    let (mut white, mut walk) = (0.0, 0.0);
    let realizations = 20;
    for s in 0..realizations {
        let noise = normal_vec(&mut RngStream::new(600 + s, 1).rng(), 512);
        let cum: Vec<f64> = noise.iter().scan(0.0, |a, x| { *a += x; Some(*a) }).collect();
        white += dfa_exponent(&noise).unwrap().alpha / realizations as f64;
        walk += dfa_exponent(&cum).unwrap().alpha / realizations as f64;
    }
    let dfa_ok = (white - 0.5).abs() <= 0.1 && (walk - 1.5).abs() <= 0.1;

    // Δ(x) = 5x⁻² + 0.01 gives |g(x)| = 10/x³; below 0.05 first at x = 6
    let closed_form = (1..).find(|&x: &i32| 10.0 / (x as f64).powi(3) < 0.05).unwrap();
    let mut series = ResidualSeries::new(1);
    let mut stop = None;
    for x in 1..=20 {
        series.push(5.0 * (x as f64).powi(-2) + 0.01).unwrap();
        if series.should_stop(0.05) {
            stop = Some(x);
            break;
        }
    }
    check(
        bit_exact && dfa_ok && stop == Some(closed_form),
        format!("eps=0 bit-exact {bit_exact}; DFA mean α white {white:.3}, walk {walk:.3} (±0.1); stop {stop:?} vs {closed_form}"),
    )
}

fn backdoor_sanity() -> Outcome {
    let spec = BackdoorSpec {
        trigger_indices: vec![7, 8, 9],
        trigger_offsets: vec![6.0; 3],
        target_label: 1,
        removal_count: 100,
        poison_fraction: 1.0,
        test_fraction: 0.2,
    };
    let train = TrainConfig::full_batch(200, 2.0);
    let loss = LossSpec::logistic(1e-3);
    let methods = [
        Method::Sisa { spec: loss, config: SisaConfig::new(4, 5, 40, train) },
        Method::Dare { params: DareParams { trees: 10, d_max: 8, d_rmax: 1, k: 5, p_tilde: 5 } },
    ];
    let (mut min_original, mut max_naive_excess, mut max_dis) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for seed in 0..10 {
        let data = gaussian_blobs(&BlobSpec::new(2000, 10, 6.0, seed).with_informative(3)).unwrap();
        for m in &methods {
            let o = backdoor_experiment(&data, &spec, m, RngStream::from_seed(seed)).map_err(|e| e.to_string())?;
            min_original = min_original.min(o.original);
            max_naive_excess = max_naive_excess.max(o.naive - o.chance);
            max_dis = max_dis.max(o.acc_dis);
        }
    }
    check(
        min_original >= 90.0 && max_naive_excess <= 10.0 && max_dis <= 2.0,
        format!(
            "10 seeds × SISA, DaRE: min original {min_original:.1}% (≥ 90), max naive − chance {max_naive_excess:.1} (≤ 10), max acc_dis {max_dis:.2} (≤ 2)"
        ),
    )
}

fn metric_units() -> Outcome {
    // a few ulps: 0.9 − 0.8 is not exactly 0.1 in binary
    let close = |a: f64, b: f64| (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs());
    let cases = [
        ("sape(0,0)=0", sape(0.0, 0.0) == 0.0),
        ("sape(0,x)=100", sape(0.0, 0.3) == 100.0),
        ("sape(x,x)=0", sape(0.7, 0.7) == 0.0),
        ("sape symmetric", sape(0.9, 0.8) == sape(0.8, 0.9)),
        ("sape(0.9,0.8)", close(sape(0.9, 0.8), 100.0 * 0.1 / 1.7)),
        ("kl(p,p)=0", kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap() == 0.0),
        ("kl((1,0),(.5,.5))=ln2", close(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), std::f64::consts::LN_2)),
        ("kl support", kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap() == f64::INFINITY),
        ("l2(3,4)=5", param_diff(&ParamVector::new(vec![3.0, 4.0]), &ParamVector::zeros(2)).unwrap() == 5.0),
        ("speedup(10,2)=5", speedup(10.0, 2.0).unwrap() == 5.0),
        ("speedup(0,1) rejected", speedup(0.0, 1.0).is_err()),
        ("acc_err", close(acc_err(0.9, 0.85), 0.05)),
        ("disagree", disagree_consistency(&[1, 0, 1, 1], &[1, 1, 1, 1]).unwrap() == 75.0),
        ("alpha_beta", alpha_beta_estimate(&[0.1, 0.3], 0.2).unwrap() == 0.5),
        ("alpha_beta zero", alpha_beta_estimate(&[0.0; 4], 0.1).unwrap() == 0.0),
        ("proxy after retrain", {
            let p = monitor_proxies(0.8, Some(0.8), 3.0, 3.0, 1.0, 1.0).unwrap();
            p.acc_dis == 0.0 && p.acc_err == 0.0
        }),
    ];
    let failed: Vec<&str> = cases.iter().filter(|c| !c.1).map(|c| c.0).collect();
    check(failed.is_empty(), format!("{} analytic cases; failing: {failed:?}", cases.len()))
}

fn stream_config(name: &str, seed: u64) -> BenchConfig {
    BenchConfig {
        name: "stream".into(),
        seeds: vec![seed],
        output_dir: std::env::temp_dir(),
        dataset: DatasetConfig::synthetic(2000, 10, 2.0, seed),
        methods: vec![MethodConfig::named(name)],
        deletion: DeletionConfig::default(),
        tolerances: ToleranceConfig::default(),
        metric: Some(Metric::MeanTrueClassProbability),
        stream: StreamConfig { deletions: 30, retrain_every: Some(10), ..StreamConfig::default() },
        timing_repeats: 1,
        epsilon: None,
        delta: None,
    }
}

fn monitoring() -> Outcome {
    let (mut covered, mut steps, mut prospective) = (0, 0, 0);
    let mut misses = Vec::new();
    for name in ["fisher", "influence", "deltagrad"] {
        for seed in 0..3 {
            let cfg = stream_config(name, seed);
            let data = load_dataset(&cfg.dataset).unwrap();
            let log = simulate_stream(&cfg, &cfg.methods[0], seed, &data, true).unwrap();
            for (s, (c, e)) in log.iter().zip(window_constants(&log)).filter(|(s, _)| !s.retrained) {
                let (td, te) = (s.true_acc_dis.unwrap(), s.true_acc_err.unwrap());
                steps += 1;
                if c * s.raw_acc_dis >= td && e * s.raw_acc_err >= te {
                    covered += 1;
                } else {
                    misses.push(format!("{name}/{seed}/{}", s.step));
                }
                if s.overestimates().unwrap() {
                    prospective += 1;
                }
            }
        }
    }
    check(
        covered == steps,
        format!(
            "fisher, influence, deltagrad × 3 seeds: {covered}/{steps} non-retrain steps bounded by their window's constants \
             (constants carried from the previous window: {prospective}/{steps}); misses {misses:?}"
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let methods: String = ["naive", "sisa", "dare", "fisher", "influence", "deltagrad", "d2d", "deepobliviate"]
        .iter()
        .map(|m| format!("[[methods]]\nname = \"{m}\"\n"))
        .collect();
    let run = |sub: &str| {
        let text = format!(
            "seeds = [0, 1]\noutput_dir = \"{}\"\n[dataset]\nsource = \"synthetic\"\n{methods}",
            dir.path().join(sub).display()
        );
        let cfg = BenchConfig::from_toml(&text, &[]).unwrap();
        run_benchmark(&cfg, RunOptions { deterministic: true, force: false, jobs: 0 }).unwrap();
        ["reports.json", "reports.csv"].map(|f| std::fs::read(dir.path().join(sub).join(f)).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    check(a == b, format!("16 cells over 8 methods: reports.json and reports.csv identical = {}", a == b))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 second-order quadratic exactness", quadratic_exactness, 1),
        ("2 SISA exactness", sisa_exactness, 60),
        ("3 DaRE integrity and efficiency", dare_integrity, 300),
        ("4 DeltaGrad exactness and accuracy", deltagrad_exactness, 60),
        ("5 Descent-to-Delete convergence", d2d_convergence, 120),
        ("6 DeepObliviate", deepobliviate_suite, 120),
        ("7 backdoor verification", backdoor_sanity, 300),
        ("8 metric unit suite", metric_units, 60),
        ("9 monitoring overestimation", monitoring, 600),
        ("10 determinism", determinism, 600),
    ];
    let mut failures = 0;
    for (name, f, budget) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = started.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (ok, detail) = match result {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "{} {name}: {detail} [{:.2}s, budget {budget}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("{} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
