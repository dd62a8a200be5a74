//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test -p hybridfl --test acceptance -- --nocapture`.

use hybridfl::data::{
    dirichlet_partition, generate_synthetic, standardize, ClientShard, LabeledDataset,
    PartitionScheme, PartitionSpec, ShardSize,
};
use hybridfl::harness::{parse_config_str, run_experiment, rounds_to_target};
use hybridfl::model::{Batch, ModelVector, Objective};
use hybridfl::protocol::{
    aggregate_corrected, aggregate_plain, client_local_train, initial_model, run_round,
    run_training, Algorithm, BatchSize, ClientUpdate, CommRecord, HyperParams, RoundState,
    TrainingSetup, TrainingTrace,
};
use hybridfl::theory::{
    bound_clg_sgd, bound_fedclg_c, bound_fedclg_s, estimate_sigma, estimate_sigma_g,
    estimate_smoothness, minimize_centrally, BoundReport, TheoremConstants,
};
use itertools::Itertools;
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn random_model(obj: &Objective, seed: u64) -> ModelVector {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelVector::from_vec(
        (0..obj.param_dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let cases: [(Objective, usize); 3] = [
        (Objective::logistic_regression(19, 10), 200), // d = 200
        (Objective::mlp_one_hidden(8, 10, 4).with_l2(0.01), 134),
        (Objective::least_squares(12), 12),
    ];
    for (obj, expected_dim) in cases {
        assert_eq!(obj.param_dim(), expected_dim);
        let mut worst: f64 = 0.0;
        for instance in 0..20u64 {
            let classes = obj.num_classes.max(2);
            let data = generate_synthetic(classes, obj.input_dim, 20, 1.0, 900 + instance).unwrap();
            let x = random_model(&obj, 1900 + instance);
            let err = obj.finite_diff_check(&x, &data, 1e-5).unwrap();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-5, "{obj:?}: relative error {worst}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    println!("ACCEPTANCE 1 (gradient correctness, 20 instances x 3 kinds, {elapsed:?}): PASS");
}

fn bits(values: &Array1<f64>) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}

fn trace_bits(trace: &TrainingTrace) -> Vec<(usize, [u64; 6], u64, u64)> {
    trace
        .rows
        .iter()
        .map(|r| {
            (
                r.round,
                [
                    r.grad_norm_sq.to_bits(),
                    r.train_loss.to_bits(),
                    r.test_accuracy.to_bits(),
                    r.client_lr.to_bits(),
                    r.server_lr.to_bits(),
                    0,
                ],
                r.floats_up,
                r.floats_down,
            )
        })
        .collect()
}

#[test]
fn criterion_02_reduction_identities() {
    // (a) a forced-zero correction reproduces the plain local update
    let data = generate_synthetic(2, 3, 16, 1.5, 41).unwrap();
    let obj = Objective::logistic_regression(3, 2);
    let shard = ClientShard { client_id: 0, data: data.clone() };
    let x = random_model(&obj, 42);
    let zeros = Array1::zeros(obj.param_dim());
    let mut rng_a = ChaCha8Rng::seed_from_u64(7);
    let mut rng_b = ChaCha8Rng::seed_from_u64(7);
    let plain = client_local_train(&obj, &x, &shard, 0.1, 5, BatchSize::Full, None, &mut rng_a, 0)
        .unwrap();
    let forced = client_local_train(
        &obj, &x, &shard, 0.1, 5, BatchSize::Full, Some(&zeros), &mut rng_b, 0,
    )
    .unwrap();
    assert_eq!(bits(&plain.delta), bits(&forced.delta), "zero correction changed the trajectory");

    // round level: identical client/server data makes the correction vanish
    let shards: Vec<ClientShard> = (0..4)
        .map(|client_id| ClientShard { client_id, data: data.clone() })
        .collect();
    let hp = HyperParams {
        client_lr: 0.1,
        global_lr: 1.0,
        server_lr: 0.1,
        client_steps: 3,
        server_steps: 2,
        rounds: 1,
        sampled_clients: 2,
        num_clients: 4,
        server_dataset_size: data.len(),
        client_batch: BatchSize::Full,
        server_batch: BatchSize::Full,
        lr_decay: 0.99,
        lr_floor: 0.001,
    };
    let one_round = |algorithm| {
        let state = RoundState::new(algorithm, ModelVector::zeros(obj.param_dim()), 99, &hp);
        let (next, _) = run_round(algorithm, &obj, state, &shards, &data, &hp).unwrap();
        next.model
    };
    assert_eq!(
        bits(one_round(Algorithm::FedClgC).values()),
        bits(one_round(Algorithm::ClgSgd).values()),
        "corrected-client round with zero correction diverged from plain"
    );

    // (b) matching anchors collapse the corrected aggregation to the plain one
    let g_s = Array1::from_vec(vec![0.3, -0.7, 0.1]);
    let updates: Vec<ClientUpdate> = (0..3)
        .map(|client_id| ClientUpdate {
            client_id,
            delta: Array1::from_vec(vec![
                0.1 * client_id as f64,
                -0.2,
                0.05 + client_id as f64,
            ]),
            anchor_grad: Some(g_s.clone()),
            steps_taken: 4,
        })
        .collect();
    let x3 = ModelVector::from_vec(vec![1.0, 2.0, -3.0]).unwrap();
    let corrected = aggregate_corrected(&x3, &updates, &g_s, 0.1, 0.8, 4).unwrap();
    let plain = aggregate_plain(&x3, &updates, 0.8).unwrap();
    assert_eq!(bits(corrected.values()), bits(plain.values()));

    // (c) no server steps: the hybrid baseline IS classic federated averaging
    let big = generate_synthetic(3, 4, 120, 2.0, 43).unwrap();
    let spec = PartitionSpec {
        scheme: PartitionScheme::Iid,
        num_clients: 6,
        shard_size: ShardSize::Proportional,
        seed: 44,
    };
    let shards = dirichlet_partition(&big, &spec).unwrap();
    let obj3 = Objective::logistic_regression(4, 3);
    let hp = HyperParams {
        server_steps: 0,
        rounds: 5,
        sampled_clients: 3,
        num_clients: 6,
        server_dataset_size: 10,
        ..hp
    };
    let run = |algorithm| {
        run_training(&TrainingSetup {
            algorithm,
            objective: &obj3,
            shards: &shards,
            population: &big,
            test_data: None,
            hp: &hp,
            master_seed: 45,
        })
        .unwrap()
    };
    let clg = run(Algorithm::ClgSgd);
    let fedavg = run(Algorithm::FedAvg);
    assert!(clg.aborted.is_none());
    assert_eq!(trace_bits(&clg), trace_bits(&fedavg), "E = 0 trace differs from FedAvg");

    println!("ACCEPTANCE 2 (reduction identities, bit-exact): PASS");
}

#[test]
fn criterion_03_sampling_variance_identity() {
    let (n, m) = (5usize, 2usize);
    let vectors: Vec<Array1<f64>> = (0..n)
        .map(|i| {
            Array1::from_vec(vec![
                (i as f64).sin() + 0.3,
                0.5 * i as f64 - 1.2,
                (i as f64 * 2.7).cos(),
            ])
        })
        .collect();
    let mean = vectors.iter().fold(Array1::<f64>::zeros(3), |a, v| a + v) / n as f64;

    let subsets: Vec<Vec<usize>> = (0..n).combinations(m).collect();
    let variance: f64 = subsets
        .iter()
        .map(|subset| {
            let sub_mean =
                subset.iter().fold(Array1::<f64>::zeros(3), |a, &i| a + &vectors[i]) / m as f64;
            let d = &sub_mean - &mean;
            d.dot(&d)
        })
        .sum::<f64>()
        / subsets.len() as f64;

    let dispersion: f64 = vectors
        .iter()
        .map(|v| {
            let d = v - &mean;
            d.dot(&d)
        })
        .sum();
    let closed_form = (n - m) as f64 / (m * n * (n - 1)) as f64 * dispersion;
    assert!(
        (variance - closed_form).abs() <= 1e-12,
        "enumerated {variance} vs closed form {closed_form}"
    );
    println!("ACCEPTANCE 3 (sampling-variance identity, N=5 M=2): PASS");
}

/// Shared setup for the convergence-ordering experiments: a 10-class
/// logistic task with strong regularization so the sampling-noise floor
/// binds well before the rates decay away.
fn ordering_config(scheme: &str, dir: &std::path::Path) -> String {
    format!(
        "[experiment]\n\
         algorithm = clg-sgd\n\
         master_seed = 1000\n\
         repeats = 5\n\
         output_dir = {}\n\
         target = loss <= 0.7557\n\
         [dataset]\n\
         kind = synthetic\n\
         classes = 10\n\
         input_dim = 20\n\
         train_size = 40000\n\
         test_size = 2000\n\
         separation = 4.0\n\
         seed = 424242\n\
         [objective]\n\
         kind = logistic-regression\n\
         l2_reg = 0.05\n\
         [partition]\n\
         {}\
         clients = 50\n\
         shard_size = 800\n\
         seed = 777\n\
         [hyperparams]\n\
         client_lr = 0.05\n\
         global_lr = 3.0\n\
         server_lr = 0.05\n\
         client_steps = 3\n\
         server_steps = 3\n\
         rounds = 170\n\
         sampled_clients = 5\n\
         server_dataset_size = 800\n\
         client_batch = full\n\
         server_batch = full\n\
         lr_decay = 0.99\n\
         lr_floor = 0.001\n",
        dir.display(),
        match scheme {
            "iid" => "scheme = iid\n".to_string(),
            _ => "scheme = dirichlet\nalpha = 0.1\n".to_string(),
        }
    )
}

fn median_crossings(scheme: &str) -> (f64, f64, f64) {
    let dir = tempfile::tempdir().unwrap();
    let config = parse_config_str(&ordering_config(scheme, dir.path())).unwrap();
    let prepared = hybridfl::harness::prepare(&config).unwrap();
    let target = config.target.unwrap();
    let mut medians = Vec::new();
    for algorithm in [Algorithm::ClgSgd, Algorithm::FedClgC, Algorithm::FedClgS] {
        let mut crossings: Vec<f64> = (0..config.repeats)
            .map(|r| {
                let trace = run_training(&TrainingSetup {
                    algorithm,
                    objective: &prepared.objective,
                    shards: &prepared.shards,
                    population: &prepared.population,
                    test_data: prepared.test_data.as_ref(),
                    hp: &config.hp,
                    master_seed: config.master_seed + r as u64,
                })
                .unwrap();
                assert!(trace.aborted.is_none());
                rounds_to_target(&trace.rows, target)
                    .map(|r| r as f64)
                    .unwrap_or(f64::INFINITY)
            })
            .collect();
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(crossings[crossings.len() / 2]);
    }
    (medians[0], medians[1], medians[2])
}

#[test]
fn criterion_04_convergence_ordering_non_iid() {
    let start = Instant::now();
    let (clg, fedclg_c, fedclg_s) = median_crossings("dirichlet");
    let elapsed = start.elapsed();
    assert!(clg.is_finite(), "baseline never reached the target");
    assert!(
        fedclg_c <= 0.8 * clg,
        "fedclg-c median {fedclg_c} not <= 0.8 x baseline {clg}"
    );
    assert!(
        fedclg_s <= 0.8 * clg,
        "fedclg-s median {fedclg_s} not <= 0.8 x baseline {clg}"
    );
    assert!(elapsed.as_secs() < 180, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 4 (non-IID ordering: clg-sgd {clg}, fedclg-c {fedclg_c}, \
         fedclg-s {fedclg_s} rounds, {elapsed:?}): PASS"
    );
}

#[test]
fn criterion_05_iid_comparability() {
    let (clg, fedclg_c, fedclg_s) = median_crossings("iid");
    assert!(clg.is_finite());
    for (name, median) in [("fedclg-c", fedclg_c), ("fedclg-s", fedclg_s)] {
        let ratio = median / clg;
        assert!(
            (0.8..=1.2).contains(&ratio),
            "{name} median {median} vs baseline {clg}: ratio {ratio}"
        );
    }
    println!(
        "ACCEPTANCE 5 (IID comparability: clg-sgd {clg}, fedclg-c {fedclg_c}, \
         fedclg-s {fedclg_s} rounds): PASS"
    );
}

#[test]
fn criterion_06_server_gradient_unbiasedness() {
    let population = generate_synthetic(2, 3, 4, 1.5, 51).unwrap();
    let obj = Objective::logistic_regression(3, 2);
    let x = random_model(&obj, 52);
    let full = obj.gradient(&x, &population, Batch::Full).unwrap().vector;
    let subsets: Vec<Vec<usize>> = (0..4).combinations(2).collect();
    assert_eq!(subsets.len(), 6);
    let mut mean = Array1::<f64>::zeros(obj.param_dim());
    for subset in &subsets {
        mean = mean
            + obj
                .gradient(&x, &population.subset(subset), Batch::Full)
                .unwrap()
                .vector;
    }
    mean /= subsets.len() as f64;
    let worst = (&mean - &full).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    assert!(worst <= 1e-12, "max deviation {worst}");
    println!("ACCEPTANCE 6 (server-gradient unbiasedness by enumeration): PASS");
}

fn golden_hp() -> HyperParams {
    HyperParams {
        client_lr: 0.01,
        global_lr: 1.0,
        server_lr: 0.01,
        client_steps: 5,
        server_steps: 5,
        rounds: 100,
        sampled_clients: 4,
        num_clients: 20,
        server_dataset_size: 10,
        client_batch: BatchSize::Full,
        server_batch: BatchSize::Full,
        lr_decay: 0.99,
        lr_floor: 0.001,
    }
}

fn golden_constants() -> TheoremConstants {
    TheoremConstants {
        smoothness: 1.0,
        sigma: 1.0,
        sigma_g: 1.0,
        f_init: 1.0,
        f_star: 0.0,
    }
}

fn assert_rel(actual: f64, expected: f64, what: &str) {
    let tolerance = 1e-12 * expected.abs().max(1e-300);
    assert!(
        (actual - expected).abs() <= tolerance,
        "{what}: {actual} vs golden {expected}"
    );
}

#[test]
fn criterion_07_bound_evaluators_golden() {
    // golden values precomputed with exact rational arithmetic, independent
    // of the implementation
    let c = golden_constants();
    let hp = golden_hp();

    let report = bound_clg_sgd(&c, &hp, 100).unwrap();
    assert_rel(report.init_term, 0.4444444444444444, "clg init");
    assert_rel(report.drift_term, 0.015833333333333335, "clg drift");
    assert_rel(report.server_data_term, 0.0035555555555555557, "clg server");
    assert_rel(report.sampling_term, 0.08421052631578947, "clg sampling");
    assert_rel(report.total, 0.5480438596491228, "clg total");

    let report = bound_fedclg_c(&c, &hp, 100).unwrap();
    assert_rel(report.init_term, 0.375, "fedclg-c init");
    assert_rel(report.drift_term, 0.08328125, "fedclg-c drift");
    assert_rel(report.server_data_term, 0.003, "fedclg-c server");
    assert_rel(report.sampling_term, 0.0016875, "fedclg-c correction");
    assert_rel(report.total, 0.46296875, "fedclg-c total");

    let report = bound_fedclg_s(&c, &hp, 100).unwrap();
    assert_rel(report.init_term, 0.4444444444444444, "fedclg-s init");
    assert_rel(report.drift_term, 0.015833333333333335, "fedclg-s drift");
    assert_rel(report.server_data_term, 0.0035555555555555557, "fedclg-s server");
    assert_rel(report.sampling_term, 0.002, "fedclg-s correction");
    assert_rel(report.total, 0.4658333333333333, "fedclg-s total");

    // exact zeros at the degenerate corners
    let iid = TheoremConstants { sigma_g: 0.0, ..c };
    let report = bound_clg_sgd(&iid, &hp, 100).unwrap();
    assert_eq!(report.drift_term, 0.0);
    assert_eq!(report.sampling_term, 0.0);
    let full = HyperParams { sampled_clients: 20, ..hp };
    assert_eq!(bound_clg_sgd(&c, &full, 100).unwrap().sampling_term, 0.0);

    // monotone in the server dataset size over a 10-point sweep
    for bound in [bound_clg_sgd, bound_fedclg_c, bound_fedclg_s] {
        let mut last = f64::INFINITY;
        for step in 1..=10usize {
            let hp = HyperParams { server_dataset_size: step * 7, ..hp };
            let total = bound(&c, &hp, 100).unwrap().total;
            assert!(total <= last, "bound rose at m_s = {}", step * 7);
            last = total;
        }
    }
    println!("ACCEPTANCE 7 (bound evaluators vs pre-registered goldens, 1e-12 rel): PASS");
}

#[test]
fn criterion_08_measured_vs_bound() {
    // strongly regularized logistic problem, estimated constants inflated
    // by a factor of 2 (the estimators are lower bounds)
    let raw = generate_synthetic(3, 4, 240, 2.0, 61).unwrap();
    let (data, _) = standardize(&raw, &[]);
    let spec = PartitionSpec {
        scheme: PartitionScheme::Dirichlet { alpha: 0.5 },
        num_clients: 6,
        shard_size: ShardSize::Fixed(40),
        seed: 62,
    };
    let obj = Objective::logistic_regression(4, 3).with_l2(0.2);
    let shards = dirichlet_partition(&data, &spec).unwrap();
    let refs: Vec<&LabeledDataset> = shards.iter().map(|s| &s.data).collect();
    let population = LabeledDataset::concat(&refs).unwrap();
    let m_s = 24;

    let x0 = initial_model(&obj, 63);
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let datasets: Vec<&LabeledDataset> = shards.iter().map(|s| &s.data).collect();
    let smoothness = estimate_smoothness(&obj, &datasets, 150, 1.0, &mut rng).unwrap();
    let sigma = estimate_sigma(&obj, &population, m_s, &x0, 300, &mut rng).unwrap();
    let sigma_g = estimate_sigma_g(&obj, &shards, std::slice::from_ref(&x0)).unwrap();
    let f_init = obj.loss(&x0, &population).unwrap();
    let (_, f_star) = minimize_centrally(&obj, &population, &x0, 10_000, 1e-10).unwrap();
    let constants = TheoremConstants {
        smoothness,
        sigma,
        sigma_g,
        f_init,
        f_star,
    }
    .inflated(2.0);

    // rates chosen from the inflated smoothness so every theorem's
    // precondition holds: eta <= 1/(6KL), eta*eta_g <= 1/(27KL), gamma <= 1/(6EL)
    let k = 3usize;
    let e = 2usize;
    let l = constants.smoothness;
    let hp = HyperParams {
        client_lr: 1.0 / (6.0 * k as f64 * l),
        global_lr: 0.2,
        server_lr: 1.0 / (6.0 * e as f64 * l),
        client_steps: k,
        server_steps: e,
        rounds: 200,
        sampled_clients: 2,
        num_clients: 6,
        server_dataset_size: m_s,
        client_batch: BatchSize::Full,
        server_batch: BatchSize::Full,
        lr_decay: 1.0,
        lr_floor: 1e-9,
    };

    let cases: [(Algorithm, fn(&TheoremConstants, &HyperParams, usize) -> hybridfl::Result<BoundReport>); 3] = [
        (Algorithm::ClgSgd, bound_clg_sgd),
        (Algorithm::FedClgC, bound_fedclg_c),
        (Algorithm::FedClgS, bound_fedclg_s),
    ];
    for (algorithm, bound) in cases {
        let report = bound(&constants, &hp, hp.rounds).unwrap();
        assert!(
            report.preconditions_hold(),
            "{algorithm}: violated {:?}",
            report.preconditions
        );
        let trace = run_training(&TrainingSetup {
            algorithm,
            objective: &obj,
            shards: &shards,
            population: &population,
            test_data: None,
            hp: &hp,
            master_seed: 65,
        })
        .unwrap();
        assert!(trace.aborted.is_none());
        let measured = trace
            .rows
            .iter()
            .map(|r| r.grad_norm_sq)
            .fold(f64::INFINITY, f64::min);
        assert!(
            measured <= report.total,
            "{algorithm}: min grad norm^2 {measured} above bound {}",
            report.total
        );
        println!(
            "  {algorithm}: min ||grad f||^2 = {measured:.3e} <= bound {:.3e}",
            report.total
        );
    }
    println!("ACCEPTANCE 8 (measured vs bound with 2x-inflated estimated constants): PASS");
}

#[test]
fn criterion_09_byte_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traces");
    let config_text = format!(
        "[experiment]\n\
         algorithm = fedclg-s\n\
         master_seed = 71\n\
         repeats = 2\n\
         output_dir = {}\n\
         [dataset]\n\
         kind = synthetic\n\
         classes = 3\n\
         input_dim = 4\n\
         train_size = 180\n\
         test_size = 60\n\
         separation = 2.5\n\
         [objective]\n\
         kind = mlp-1hidden\n\
         hidden_width = 6\n\
         [partition]\n\
         scheme = dirichlet\n\
         alpha = 0.3\n\
         clients = 6\n\
         shard_size = 30\n\
         [hyperparams]\n\
         client_lr = 0.1\n\
         global_lr = 1.0\n\
         server_lr = 0.1\n\
         client_steps = 2\n\
         server_steps = 2\n\
         rounds = 8\n\
         sampled_clients = 3\n\
         server_dataset_size = 20\n\
         client_batch = 16\n\
         server_batch = full\n",
        out.display()
    );
    let config = parse_config_str(&config_text).unwrap();
    let first = run_experiment(&config).unwrap();
    let snapshot: Vec<Vec<u8>> = first
        .trace_paths
        .iter()
        .chain(std::iter::once(&first.summary_path))
        .map(|p| std::fs::read(p).unwrap())
        .collect();
    let second = run_experiment(&config).unwrap();
    let paths: Vec<_> = second
        .trace_paths
        .iter()
        .chain(std::iter::once(&second.summary_path))
        .collect();
    assert_eq!(first.trace_paths, second.trace_paths);
    for (path, before) in paths.iter().zip(&snapshot) {
        let after = std::fs::read(path).unwrap();
        assert_eq!(&after, before, "{} changed between runs", path.display());
    }
    println!("ACCEPTANCE 9 (byte-identical traces across reruns): PASS");
}

#[test]
fn criterion_10_communication_accounting() {
    let data = generate_synthetic(2, 24, 160, 1.5, 81).unwrap();
    let spec = PartitionSpec {
        scheme: PartitionScheme::Iid,
        num_clients: 8,
        shard_size: ShardSize::Proportional,
        seed: 82,
    };
    let shards = dirichlet_partition(&data, &spec).unwrap();
    let obj = Objective::logistic_regression(24, 2); // d = 50
    let d = obj.param_dim() as u64;
    let m = 4u64;
    let hp = HyperParams {
        client_lr: 0.05,
        global_lr: 1.0,
        server_lr: 0.05,
        client_steps: 2,
        server_steps: 2,
        rounds: 1,
        sampled_clients: m as usize,
        num_clients: 8,
        server_dataset_size: 16,
        client_batch: BatchSize::Full,
        server_batch: BatchSize::Full,
        lr_decay: 0.99,
        lr_floor: 0.001,
    };
    let comm_of = |algorithm| -> CommRecord {
        let state = RoundState::new(algorithm, ModelVector::zeros(obj.param_dim()), 83, &hp);
        run_round(algorithm, &obj, state, &shards, &data, &hp).unwrap().1
    };
    let base = comm_of(Algorithm::ClgSgd);
    let c = comm_of(Algorithm::FedClgC);
    let s = comm_of(Algorithm::FedClgS);
    assert_eq!(c.floats_down - base.floats_down, m * d, "client-corrected download overhead");
    assert_eq!(c.floats_up, base.floats_up);
    assert_eq!(s.floats_up - base.floats_up, m * d, "aggregation-corrected upload overhead");
    assert_eq!(s.floats_down, base.floats_down);
    println!(
        "ACCEPTANCE 10 (comm accounting: down-overhead {} = up-overhead {} = M*d = {}): PASS",
        c.floats_down - base.floats_down,
        s.floats_up - base.floats_up,
        m * d
    );
}
