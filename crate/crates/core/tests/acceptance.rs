//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured runtime.
//!
//! Run with `cargo test -p fedcat-core --test acceptance -- --nocapture`.

use std::path::PathBuf;
use std::time::Instant;

use fedcat_core::config::{ExperimentConfig, Method};
use fedcat_core::data::{dirichlet_partition, mean_label_entropy, synth_dataset, PartitionSpec,
    SynthSpec};
use fedcat_core::engine::{aggregate, begin_cycle, dispatch_target, train_iter, CycleState,
    TrainIterContext};
use fedcat_core::metrics::account_bytes;
use fedcat_core::nn::{init_params, local_train, loss_and_grad, ModelSpec, TrainOptions};
use fedcat_core::params::ParamVector;
use fedcat_core::rng::{stream, StreamKind};
use fedcat_core::runner::{run_experiment, ResolvedExperiment, RunOutput};
use fedcat_core::selection::{regroup, select_devices, CountTable, GroupAssignment};
use fedcat_core::theory::{bound_b, bound_gap, TheoryConstants};

fn pass(criterion: &str, started: Instant, details: &str) {
    println!(
        "ACCEPTANCE {criterion}: PASS ({:.2}s) {details}",
        started.elapsed().as_secs_f64()
    );
}

fn synth_config(json_patch: &str) -> ExperimentConfig {
    let base = format!(
        r#"{{
            "method": "fedavg",
            "dataset": "synth",
            "num_devices": 6,
            "alpha": 0.5,
            "rounds": 4,
            "seed": 7,
            "batch_size": 10,
            "local_epochs": 2,
            "eval_every": 2,
            "devices_per_round": 2,
            "synth": {{"num_classes": 4, "train_per_class": 30, "test_per_class": 15, "dim": 8, "spread": 0.3}},
            "model": {{"input_dim": 8, "hidden_layers": [6], "num_classes": 4}}
            {json_patch}
        }}"#
    );
    ExperimentConfig::from_json(&base).unwrap()
}

// ---------------------------------------------------------------------
// 1. Protocol oracle equivalence: a full cycle's copy i equals a
//    standalone model trained sequentially through dispatch order,
//    bit-exact, for K in {2, 3, 5}.
// ---------------------------------------------------------------------
#[test]
fn criterion_01_protocol_oracle_equivalence() {
    let started = Instant::now();
    for k in [2usize, 3, 5] {
        let n = 2 * k;
        let spec = ModelSpec::new(8, vec![6], 4);
        let data = synth_dataset(
            &SynthSpec {
                num_classes: 4,
                samples_per_class: 5 * n,
                dim: 8,
                spread: 0.3,
            },
            40 + k as u64,
        );
        let parts = dirichlet_partition(
            &data,
            &PartitionSpec {
                num_devices: n,
                alpha: 1.0,
                seed: 40 + k as u64,
            },
        )
        .unwrap();
        let seed = 90 + k as u64;
        let model = init_params(&spec, &mut stream(seed, StreamKind::Init, 0, 0));
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 10,
            learning_rate: 0.05,
            momentum: 0.9,
        };

        // Selections produced by the real grouped, count-based policy.
        let ids: Vec<usize> = (0..n).collect();
        let groups = regroup(&ids, k, &mut stream(seed, StreamKind::Grouping, 0, 0), 0).unwrap();
        let mut table = CountTable::new(n, k);
        let selections: Vec<Vec<usize>> = (0..k)
            .map(|round| {
                select_devices(
                    &groups,
                    &mut table,
                    round,
                    0.5,
                    &mut stream(seed, StreamKind::Selection, round as u64, 0),
                )
                .iter()
                .map(|p| p.device)
                .collect()
            })
            .collect();

        let mut cycle = begin_cycle(0, &model, k).unwrap();
        for (round, selected) in selections.iter().enumerate() {
            let ctx = TrainIterContext {
                spec: &spec,
                data: &data,
                parts: &parts,
                opts,
                seed,
                round,
            };
            train_iter(&mut cycle, selected, &ctx).unwrap();
        }

        for copy in 1..=k {
            let mut oracle = model.clone();
            for (round, selected) in selections.iter().enumerate() {
                let slot = dispatch_target(copy, round + 1, k);
                let device = selected[slot - 1];
                let report = local_train(
                    &oracle,
                    &spec,
                    &data,
                    &parts[device].indices,
                    &opts,
                    &mut stream(seed, StreamKind::Training, round as u64, device as u64),
                )
                .unwrap();
                oracle.add_assign(&report.delta);
            }
            assert_eq!(
                cycle.copies[copy - 1].model, oracle,
                "k={k}: copy {copy} diverged from the sequential oracle"
            );
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "criterion 1 took {elapsed:.2}s, limit 10s");
    pass("01 protocol-oracle-equivalence", started, "K in {2,3,5}, bit-exact");
}

// ---------------------------------------------------------------------
// 2. Reduction: K=1 concatenated training (and the DC ablation at K=1)
//    matches plain averaging bit-exactly over 50 rounds under shared
//    streams.
// ---------------------------------------------------------------------
#[test]
fn criterion_02_reduction_to_plain_averaging() {
    let started = Instant::now();
    let mut base = synth_config("");
    base.rounds = 50;
    base.devices_per_round = Some(1);
    base.eval_every = 10;

    let mut avg_cfg = base.clone();
    avg_cfg.method = Method::Fedavg;
    let avg = ResolvedExperiment::prepare(avg_cfg).unwrap().run().unwrap();

    // DC ablation with K=1 shares the uniform selection stream and must be
    // bit-identical.
    let mut dc_cfg = base.clone();
    dc_cfg.method = Method::FedcatDc;
    let dc = ResolvedExperiment::prepare(dc_cfg).unwrap().run().unwrap();
    assert_eq!(dc.final_model, avg.final_model, "DC K=1 != fedavg");
    assert_trajectories_equal(&dc, &avg);

    // Full protocol with K=1 picks its own devices; replaying its schedule
    // through plain averaging must give the identical trajectory.
    let mut cat_cfg = base.clone();
    cat_cfg.method = Method::Fedcat;
    let cat = ResolvedExperiment::prepare(cat_cfg).unwrap().run().unwrap();
    let schedule: Vec<Vec<usize>> = cat.trace.iter().map(|row| vec![row.device]).collect();
    assert_eq!(schedule.len(), 50);
    let avg_exp = ResolvedExperiment::prepare({
        let mut c = base.clone();
        c.method = Method::Fedavg;
        c
    })
    .unwrap();
    let replayed =
        fedcat_core::baselines::run_fedavg_with_schedule(&avg_exp, &schedule).unwrap();
    assert_eq!(replayed.final_model, cat.final_model, "fedcat K=1 != fedavg");
    assert_trajectories_equal(&replayed, &cat);

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "criterion 2 took {elapsed:.2}s, limit 30s");
    pass("02 k1-reduction", started, "50 rounds, bit-exact");
}

fn assert_trajectories_equal(a: &RunOutput, b: &RunOutput) {
    assert_eq!(a.log.rows.len(), b.log.rows.len());
    for (ra, rb) in a.log.rows.iter().zip(&b.log.rows) {
        assert_eq!(ra.round, rb.round);
        assert_eq!(ra.test_accuracy, rb.test_accuracy);
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(ra.bytes_up, rb.bytes_up);
        assert_eq!(ra.bytes_down, rb.bytes_down);
    }
}

// ---------------------------------------------------------------------
// 3. Dispatch permutation: the copy -> slot map is a bijection per round
//    and every copy visits every slot exactly once per cycle.
// ---------------------------------------------------------------------
#[test]
fn criterion_03_dispatch_permutation() {
    let started = Instant::now();
    for k in [1usize, 2, 3, 5, 8] {
        for round in 1..=k {
            let mut slots: Vec<usize> =
                (1..=k).map(|copy| dispatch_target(copy, round, k)).collect();
            slots.sort_unstable();
            assert_eq!(slots, (1..=k).collect::<Vec<_>>(), "round {round} of k={k}");
        }
        for copy in 1..=k {
            let mut slots: Vec<usize> =
                (1..=k).map(|round| dispatch_target(copy, round, k)).collect();
            slots.sort_unstable();
            assert_eq!(slots, (1..=k).collect::<Vec<_>>(), "copy {copy} of k={k}");
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "criterion 3 took {elapsed:.2}s, limit 1s");
    pass("03 dispatch-permutation", started, "K in {1,2,3,5,8}, exhaustive");
}

// ---------------------------------------------------------------------
// 4. Aggregation: the data-size-weighted mean matches a brute-force
//    weighted mean within 1e-12 per element over 100 random trials.
// ---------------------------------------------------------------------
#[test]
fn criterion_04_aggregation_brute_force() {
    let started = Instant::now();
    let spec = ModelSpec::new(5, vec![4], 3);
    let mut rng = stream(4242, StreamKind::Probe, 0, 0);
    use rand::Rng;
    for trial in 0..100 {
        let k = rng.random_range(2..=6);
        let mut cycle = CycleState::fresh(&ParamVector::zeros(spec.layout()), k, k);
        for copy in &mut cycle.copies {
            copy.model = init_params(&spec, &mut rng);
            copy.data_size = rng.random_range(1..=1000);
        }
        cycle.offset = k;
        let got = aggregate(&cycle).unwrap();

        // Brute force: sum(d_i * m_i) / sum(d).
        let total: f64 = cycle.copies.iter().map(|c| c.data_size as f64).sum();
        let mut expected = vec![0.0; got.len()];
        for copy in &cycle.copies {
            for (e, v) in expected.iter_mut().zip(copy.model.values()) {
                *e += copy.data_size as f64 * v;
            }
        }
        for e in &mut expected {
            *e /= total;
        }
        for (idx, (g, e)) in got.values().iter().zip(&expected).enumerate() {
            assert!(
                (g - e).abs() <= 1e-12,
                "trial {trial}, element {idx}: {g} vs {e}"
            );
        }
    }
    pass("04 aggregation-brute-force", started, "100 trials, <=1e-12/element");
}

// ---------------------------------------------------------------------
// 5. Selection distribution: proportional sampling matches the weight
//    distribution within +/-0.01 over 1e5 draws; the greedy branch picks
//    the argmax (lowest-id ties) in 100% of trials.
// ---------------------------------------------------------------------
#[test]
fn criterion_05_selection_distribution() {
    let started = Instant::now();
    // Weights 1/sqrt(4) and 1/sqrt(1): P = (1/3, 2/3).
    let groups = GroupAssignment {
        groups: vec![vec![0, 1]],
        formed_at_round: 0,
    };
    let base = {
        let mut t = CountTable::new(2, 1);
        for _ in 0..4 {
            t.increment(0, 0);
        }
        t.increment(1, 0);
        t
    };
    let mut rng = stream(777, StreamKind::Selection, 0, 0);
    let mut hits = [0u64; 2];
    let trials = 100_000;
    for _ in 0..trials {
        let mut table = base.clone();
        let picks = select_devices(&groups, &mut table, 0, 0.0, &mut rng);
        hits[picks[0].device] += 1;
    }
    let f0 = hits[0] as f64 / trials as f64;
    let f1 = hits[1] as f64 / trials as f64;
    assert!((f0 - 1.0 / 3.0).abs() <= 0.01, "P(0) = {f0}, want 1/3 +/- 0.01");
    assert!((f1 - 2.0 / 3.0).abs() <= 0.01, "P(1) = {f1}, want 2/3 +/- 0.01");

    // epsilon = 1: argmax with lowest-id tie-break, always.
    let tie_groups = GroupAssignment {
        groups: vec![vec![3, 1, 2]],
        formed_at_round: 0,
    };
    for trial in 0..100 {
        // Ties: devices 1 and 2 both have count 1, device 3 has count 4.
        let mut table = CountTable::new(4, 1);
        for _ in 0..4 {
            table.increment(3, 0);
        }
        table.increment(1, 0);
        table.increment(2, 0);
        let picks = select_devices(
            &tie_groups,
            &mut table,
            0,
            1.0,
            &mut stream(888, StreamKind::Selection, trial, 0),
        );
        assert_eq!(picks[0].device, 1, "greedy trial {trial} missed the argmax");
        assert!(picks[0].greedy);
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "criterion 5 took {elapsed:.2}s, limit 5s");
    pass("05 selection-distribution", started, "1e5 draws within +/-0.01");
}

// ---------------------------------------------------------------------
// 6. Gradient correctness: analytic vs central finite differences,
//    including the proximal term, relative error <= 1e-3 per coordinate
//    on 5 random small models.
// ---------------------------------------------------------------------
#[test]
fn criterion_06_gradient_correctness() {
    let started = Instant::now();
    let spec = ModelSpec::new(6, vec![5], 4);
    use rand::Rng;
    for tag in 0..5u64 {
        let model = init_params(&spec, &mut stream(600 + tag, StreamKind::Init, 0, 0));
        let mut data_rng = stream(600 + tag, StreamKind::Probe, 0, 0);
        let x: Vec<f64> = (0..6 * 8).map(|_| data_rng.random::<f64>()).collect();
        let y: Vec<u8> = (0..8).map(|_| data_rng.random_range(0..4) as u8).collect();
        let anchor = init_params(&spec, &mut stream(700 + tag, StreamKind::Init, 0, 0));
        let mu = 0.5;

        let (_, grad) = loss_and_grad(&model, &spec, &x, &y).unwrap();
        let (_, prox_grad) =
            fedcat_core::baselines::prox_loss_and_grad(&model, &spec, &x, &y, mu, &anchor)
                .unwrap();

        let h = 1e-4;
        for k in 0..model.len() {
            let fd = |with_prox: bool| {
                let mut plus = model.clone();
                plus.values_mut()[k] += h;
                let mut minus = model.clone();
                minus.values_mut()[k] -= h;
                let eval = |m: &ParamVector| {
                    if with_prox {
                        fedcat_core::baselines::prox_loss_and_grad(m, &spec, &x, &y, mu, &anchor)
                            .unwrap()
                            .0
                    } else {
                        loss_and_grad(m, &spec, &x, &y).unwrap().0
                    }
                };
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            };
            let plain_fd = fd(false);
            let a = grad.values()[k];
            let denom = a.abs().max(plain_fd.abs()).max(1e-6);
            assert!(
                (a - plain_fd).abs() / denom <= 1e-3,
                "model {tag} coord {k}: {a} vs {plain_fd}"
            );
            let prox_fd = fd(true);
            let p = prox_grad.values()[k];
            let denom = p.abs().max(prox_fd.abs()).max(1e-6);
            assert!(
                (p - prox_fd).abs() / denom <= 1e-3,
                "model {tag} prox coord {k}: {p} vs {prox_fd}"
            );
        }
    }
    pass("06 gradient-correctness", started, "5 models, plain + proximal");
}

// ---------------------------------------------------------------------
// 7. Heterogeneity monotonicity: mean per-device label entropy rises
//    strictly with alpha across {0.1, 0.5, 1.0}, averaged over 5 seeds.
// ---------------------------------------------------------------------
#[test]
fn criterion_07_heterogeneity_monotonicity() {
    let started = Instant::now();
    let data = synth_dataset(
        &SynthSpec {
            num_classes: 10,
            samples_per_class: 100,
            dim: 8,
            spread: 0.3,
        },
        70,
    );
    let mean_entropy = |alpha: f64| -> f64 {
        (0..5)
            .map(|seed| {
                let parts = dirichlet_partition(
                    &data,
                    &PartitionSpec {
                        num_devices: 100,
                        alpha,
                        seed,
                    },
                )
                .unwrap();
                mean_label_entropy(&data, &parts)
            })
            .sum::<f64>()
            / 5.0
    };
    let h01 = mean_entropy(0.1);
    let h05 = mean_entropy(0.5);
    let h10 = mean_entropy(1.0);
    let h100 = mean_entropy(100.0);
    assert!(h01 < h05, "entropy(0.1)={h01} !< entropy(0.5)={h05}");
    assert!(h05 < h10, "entropy(0.5)={h05} !< entropy(1.0)={h10}");
    assert!(h10 <= h100, "entropy(1.0)={h10} !<= entropy(100)={h100}");
    pass(
        "07 heterogeneity-monotonicity",
        started,
        &format!("entropy {h01:.3} < {h05:.3} < {h10:.3} <= {h100:.3}"),
    );
}

// ---------------------------------------------------------------------
// 8a. Trend reproduction on synthetic data: under high heterogeneity the
//     concatenated protocol reaches at least the plain-averaging final
//     accuracy, and reaches that level in no more rounds.
// ---------------------------------------------------------------------
#[test]
fn criterion_08a_trend_synth() {
    let started = Instant::now();
    let config = ExperimentConfig::from_json(
        r#"{
            "method": "fedavg",
            "dataset": "synth",
            "num_devices": 100,
            "alpha": 0.1,
            "rounds": 200,
            "seed": 1,
            "batch_size": 20,
            "local_epochs": 10,
            "learning_rate": 0.01,
            "momentum": 0.9,
            "eval_every": 10,
            "synth": {"num_classes": 10, "train_per_class": 2000, "test_per_class": 100, "dim": 32, "spread": 0.7}
        }"#,
    )
    .unwrap();

    let seeds = [1u64, 2, 3];
    let mut curves: Vec<Vec<(usize, f64)>> = Vec::new(); // fedavg then fedcat
    for method in [Method::Fedavg, Method::Fedcat] {
        let mut per_round: Vec<(usize, f64)> = Vec::new();
        for &seed in &seeds {
            let mut cfg = config.clone();
            cfg.method = method;
            cfg.seed = seed;
            let out = ResolvedExperiment::prepare(cfg).unwrap().run().unwrap();
            if per_round.is_empty() {
                per_round = out
                    .log
                    .rows
                    .iter()
                    .map(|r| (r.round, r.test_accuracy))
                    .collect();
            } else {
                for (acc, row) in per_round.iter_mut().zip(&out.log.rows) {
                    assert_eq!(acc.0, row.round);
                    acc.1 += row.test_accuracy;
                }
            }
        }
        for acc in &mut per_round {
            acc.1 /= seeds.len() as f64;
        }
        curves.push(per_round);
    }
    let (fedavg_curve, fedcat_curve) = (&curves[0], &curves[1]);
    let fedavg_final = fedavg_curve.last().unwrap().1;
    let fedcat_final = fedcat_curve.last().unwrap().1;
    assert!(
        fedcat_final >= fedavg_final,
        "mean final accuracy: fedcat {fedcat_final:.4} < fedavg {fedavg_final:.4}"
    );

    let first_reach = |curve: &[(usize, f64)], tau: f64| -> Option<usize> {
        curve.iter().find(|(_, a)| *a >= tau).map(|(r, _)| *r)
    };
    let fedavg_rounds = first_reach(fedavg_curve, fedavg_final)
        .expect("fedavg reaches its own final accuracy");
    let fedcat_rounds = first_reach(fedcat_curve, fedavg_final)
        .expect("fedcat never reached the fedavg final accuracy");
    assert!(
        fedcat_rounds <= fedavg_rounds,
        "rounds to fedavg-final {fedavg_final:.4}: fedcat {fedcat_rounds} > fedavg {fedavg_rounds}"
    );

    pass(
        "08a trend-synth",
        started,
        &format!(
            "fedcat {fedcat_final:.4} >= fedavg {fedavg_final:.4}; rounds-to-threshold {fedcat_rounds} <= {fedavg_rounds} (target <10min)"
        ),
    );
}

// ---------------------------------------------------------------------
// 8b. Trend reproduction smoke test on MNIST: both methods exceed 85%
//     test accuracy after 100 rounds at alpha = 0.1.
// ---------------------------------------------------------------------
#[test]
fn criterion_08b_mnist_smoke() {
    let started = Instant::now();
    let mnist_dir = mnist_dir();
    assert!(
        mnist_dir.join("train-images-idx3-ubyte").exists(),
        "MNIST IDX files not found in {} (set SIM_MNIST_DIR or see README)",
        mnist_dir.display()
    );
    let config = ExperimentConfig::from_json(&format!(
        r#"{{
            "method": "fedavg",
            "dataset": "mnist",
            "mnist_dir": {:?},
            "num_devices": 100,
            "alpha": 0.1,
            "rounds": 100,
            "seed": 1
        }}"#,
        mnist_dir.to_str().unwrap()
    ))
    .unwrap();

    for method in [Method::Fedavg, Method::Fedcat] {
        let mut cfg = config.clone();
        cfg.method = method;
        let exp = ResolvedExperiment::prepare(cfg).unwrap();
        // Canonical file shape.
        assert_eq!(exp.train.len(), 60_000);
        assert_eq!(exp.train.dim(), 784);
        assert_eq!(exp.train.num_classes(), 10);
        assert_eq!(exp.eval.len(), 10_000);
        let out = exp.run().unwrap();
        let acc = out.log.final_accuracy();
        assert!(
            acc > 0.85,
            "{} reached only {acc:.4} on MNIST (need > 0.85)",
            method.name()
        );
        println!("  mnist {}: final accuracy {acc:.4}", method.name());
    }
    pass("08b mnist-smoke", started, "both methods above 85%");
}

fn mnist_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("SIM_MNIST_DIR") {
        return PathBuf::from(dir);
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

// ---------------------------------------------------------------------
// 9. Communication ratios: control-variate traffic is exactly twice the
//    plain-averaging traffic, concatenated traffic exactly equal.
// ---------------------------------------------------------------------
#[test]
fn criterion_09_communication_ratios() {
    let started = Instant::now();
    for (params, k) in [(1000usize, 10usize), (51_450, 10), (2_818, 3), (1, 1)] {
        let (avg_up, avg_down) = account_bytes(Method::Fedavg, params, k);
        let (sca_up, sca_down) = account_bytes(Method::Scaffold, params, k);
        let (cat_up, cat_down) = account_bytes(Method::Fedcat, params, k);
        assert_eq!(sca_up, 2 * avg_up);
        assert_eq!(sca_down, 2 * avg_down);
        assert_eq!(cat_up, avg_up);
        assert_eq!(cat_down, avg_down);
    }

    // End to end: the logged cumulative bytes keep the exact ratios.
    let mut avg_cfg = synth_config("");
    avg_cfg.rounds = 5;
    avg_cfg.eval_every = 5;
    let avg = ResolvedExperiment::prepare(avg_cfg.clone()).unwrap().run().unwrap();
    let mut sca_cfg = avg_cfg.clone();
    sca_cfg.method = Method::Scaffold;
    let sca = ResolvedExperiment::prepare(sca_cfg).unwrap().run().unwrap();
    let mut cat_cfg = avg_cfg.clone();
    cat_cfg.method = Method::Fedcat;
    let cat = ResolvedExperiment::prepare(cat_cfg).unwrap().run().unwrap();
    let (avg_up, _) = avg.log.total_bytes();
    assert_eq!(sca.log.total_bytes().0, 2 * avg_up);
    assert_eq!(cat.log.total_bytes().0, avg_up);

    pass("09 communication-ratios", started, "scaffold 2.0000x, fedcat 1.0000x, exact");
}

// ---------------------------------------------------------------------
// 10. Bound calculator: the aggregate constant matches hand arithmetic
//     to 1e-12 on three constant sets; the bound strictly decreases over
//     t in [1, 1e4].
// ---------------------------------------------------------------------
#[test]
fn criterion_10_bound_calculator() {
    let started = Instant::now();
    let make = |n: usize, beta_sq: f64, l: f64, gamma_cap: f64, k: usize, e: usize, g_sq: f64| {
        TheoryConstants {
            smoothness: l,
            strong_convexity: l.min(1.0),
            gradient_variance: beta_sq,
            gradient_norm_sq: g_sq,
            heterogeneity_gap: gamma_cap,
            gamma_shift: 1.0,
            num_devices: n,
            devices_per_round: k,
            local_epochs: e,
        }
    };
    // (1/1)*1 + 6*1*1 + 8*(2*1-1)^2*1 = 15
    assert!((bound_b(&make(1, 1.0, 1.0, 1.0, 2, 1, 1.0)).unwrap() - 15.0).abs() <= 1e-12);
    // (1/4)*2 + 6*3*0.5 + 8*(2*3-1)^2*0.25 = 0.5 + 9 + 50 = 59.5
    assert!((bound_b(&make(4, 2.0, 3.0, 0.5, 2, 3, 0.25)).unwrap() - 59.5).abs() <= 1e-12);
    // (1/10)*0.1 + 0 + 0 = 0.01
    assert!((bound_b(&make(10, 0.1, 2.0, 0.0, 1, 1, 7.0)).unwrap() - 0.01).abs() <= 1e-12);

    let constants = make(8, 1.5, 2.0, 0.3, 2, 5, 0.4);
    let mut previous = f64::INFINITY;
    for t in 1..=10_000u64 {
        let value = bound_gap(&constants, t, 2.0).unwrap();
        assert!(
            value < previous,
            "bound not strictly decreasing at t={t}: {value} >= {previous}"
        );
        previous = value;
    }
    pass("10 bound-calculator", started, "3 hand sets at 1e-12; monotone over 1e4");
}

// ---------------------------------------------------------------------
// 11. Determinism: identical configs produce byte-identical CSV output
//     regardless of the thread count, including maximum parallelism.
// ---------------------------------------------------------------------
#[test]
fn criterion_11_determinism_under_parallelism() {
    let started = Instant::now();
    for method in [Method::Fedcat, Method::Scaffold] {
        let mut cfg = synth_config("");
        cfg.method = method;
        cfg.rounds = 6;
        cfg.eval_every = 3;
        cfg.num_devices = 8;
        cfg.devices_per_round = Some(4);

        let dir = tempfile::tempdir().unwrap();
        let mut csvs: Vec<Vec<u8>> = Vec::new();
        let mut models: Vec<Vec<u8>> = Vec::new();
        let max_threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(8);
        for (label, threads) in [("t1", 1usize), ("tmax", max_threads), ("auto", 0)] {
            let out = dir.path().join(format!("{}_{label}", method.name()));
            run_experiment(&cfg, &out, threads).unwrap();
            csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
            models.push(std::fs::read(out.join("model.bin")).unwrap());
        }
        assert_eq!(csvs[0], csvs[1], "{}: 1 thread vs max threads", method.name());
        assert_eq!(csvs[0], csvs[2], "{}: 1 thread vs auto", method.name());
        assert_eq!(models[0], models[1], "{}: checkpoint differs", method.name());
        assert_eq!(models[0], models[2], "{}: checkpoint differs", method.name());
    }
    pass("11 determinism", started, "byte-identical CSV across thread counts");
}
