//! Reference baselines sharing the same substrate, partitioner, init and
//! evaluation, so protocol differences are the only differences.

use rayon::prelude::*;

use crate::config::Method;
use crate::data::uniform_k_of_n;
use crate::error::{Result, SimError};
use crate::metrics::Recorder;
use crate::nn::{train_session, ModelSpec, TrainReport};
use crate::params::{weighted_mean, ParamVector};
use crate::rng::{stream, StreamKind};
use crate::runner::{ResolvedExperiment, RunOutput};

/// Control variates of the drift-corrected baseline: one server control and
/// one per-device control, all zero-initialized.
#[derive(Debug, Clone)]
pub struct ScaffoldState {
    pub server_control: ParamVector,
    pub client_controls: Vec<ParamVector>,
}

impl ScaffoldState {
    pub fn new(spec: &ModelSpec, num_devices: usize) -> Self {
        ScaffoldState {
            server_control: ParamVector::zeros(spec.layout()),
            client_controls: (0..num_devices)
                .map(|_| ParamVector::zeros(spec.layout()))
                .collect(),
        }
    }
}

/// Regularized loss `base + (mu/2) * ||w - anchor||^2` and its exact
/// gradient. `mu = 0` leaves both untouched bit for bit.
pub fn prox_loss_and_grad(
    model: &ParamVector,
    spec: &ModelSpec,
    batch_x: &[f64],
    batch_y: &[u8],
    mu: f64,
    anchor: &ParamVector,
) -> Result<(f64, ParamVector)> {
    let (mut loss, mut grad) = crate::nn::loss_and_grad(model, spec, batch_x, batch_y)?;
    if mu != 0.0 {
        loss += 0.5 * mu * model.dist_sq(anchor);
        let diff = model.sub(anchor);
        grad.axpy(mu, &diff);
    }
    Ok((loss, grad))
}

enum Correction<'a> {
    None,
    Prox(f64),
    /// Per-device additive gradient correction `c - c_k`.
    Control(&'a [ParamVector]),
}

fn run_device_sessions(
    exp: &ResolvedExperiment,
    round: usize,
    selected: &[usize],
    global: &ParamVector,
    correction: &Correction<'_>,
) -> Result<Vec<TrainReport>> {
    let opts = exp.train_options();
    selected
        .par_iter()
        .map(|&device| {
            let part = &exp.parts[device];
            if part.indices.is_empty() {
                return Err(SimError::Protocol(format!(
                    "selected device {device} has no data"
                )));
            }
            let mut rng = stream(
                exp.config.seed,
                StreamKind::Training,
                round as u64,
                device as u64,
            );
            match correction {
                Correction::None => crate::nn::local_train(
                    global,
                    &exp.spec,
                    &exp.train,
                    &part.indices,
                    &opts,
                    &mut rng,
                ),
                Correction::Prox(mu) => {
                    let mu = *mu;
                    train_session(
                        global,
                        &exp.spec,
                        &exp.train,
                        &part.indices,
                        &opts,
                        &mut rng,
                        |current, grad| {
                            if mu != 0.0 {
                                let diff = current.sub(global);
                                grad.axpy(mu, &diff);
                            }
                        },
                    )
                }
                Correction::Control(corrections) => {
                    let corr = &corrections[device];
                    train_session(
                        global,
                        &exp.spec,
                        &exp.train,
                        &part.indices,
                        &opts,
                        &mut rng,
                        |_, grad| {
                            if !corr.is_zero() {
                                grad.add_assign(corr);
                            }
                        },
                    )
                }
            }
        })
        .collect()
}

fn aggregate_locals(
    global: &ParamVector,
    selected: &[usize],
    exp: &ResolvedExperiment,
    reports: &[TrainReport],
) -> Result<ParamVector> {
    let locals: Vec<ParamVector> = reports
        .iter()
        .map(|r| {
            let mut m = global.clone();
            m.add_assign(&r.delta);
            m
        })
        .collect();
    let weights: Vec<f64> = selected
        .iter()
        .map(|&dev| exp.parts[dev].n() as f64)
        .collect();
    weighted_mean(&locals, &weights)
}

fn selection_for_round(
    exp: &ResolvedExperiment,
    round: usize,
    schedule: Option<&[Vec<usize>]>,
) -> Vec<usize> {
    match schedule {
        Some(s) => s[round].clone(),
        None => {
            let k = exp.config.devices_per_round();
            uniform_k_of_n(
                &mut stream(exp.config.seed, StreamKind::Selection, round as u64, 0),
                exp.config.num_devices,
                k,
            )
        }
    }
}

fn run_weighted_rounds(
    exp: &ResolvedExperiment,
    method: Method,
    mu: Option<f64>,
    schedule: Option<&[Vec<usize>]>,
) -> Result<RunOutput> {
    let cfg = &exp.config;
    let k = cfg.devices_per_round();
    let param_count = exp.spec.param_count();
    let mut global = exp.init_model.clone();
    let mut recorder = Recorder::new(
        method,
        cfg.eval_every,
        cfg.record_wall_time,
        &exp.train,
        &exp.eval,
        &exp.spec,
        exp.header_json(),
    );
    recorder.record_initial(&global)?;

    for round in 0..cfg.rounds {
        let selected = selection_for_round(exp, round, schedule);
        let correction = match mu {
            Some(mu) => Correction::Prox(mu),
            None => Correction::None,
        };
        let reports = run_device_sessions(exp, round, &selected, &global, &correction)?;
        global = aggregate_locals(&global, &selected, exp, &reports)?;
        recorder.round_done(round + 1, param_count, k, &global)?;
    }

    Ok(RunOutput {
        log: recorder.finish(),
        final_model: global,
        trace: Vec::new(),
    })
}

/// Plain federated averaging: uniform selection, locals weighted by their
/// sample counts.
pub fn run_fedavg(exp: &ResolvedExperiment) -> Result<RunOutput> {
    run_weighted_rounds(exp, Method::Fedavg, None, None)
}

/// Federated averaging with an injected per-round selection schedule.
/// Exists so protocol-equivalence checks can feed both methods the exact
/// same device sequence.
pub fn run_fedavg_with_schedule(
    exp: &ResolvedExperiment,
    schedule: &[Vec<usize>],
) -> Result<RunOutput> {
    if schedule.len() != exp.config.rounds {
        return Err(SimError::config(
            "schedule",
            "one selection list per round required",
        ));
    }
    run_weighted_rounds(exp, Method::Fedavg, None, Some(schedule))
}

/// Proximal-regularized local training; otherwise identical to
/// [`run_fedavg`], and bit-identical to it when `mu` is zero.
pub fn run_fedprox(exp: &ResolvedExperiment, mu: f64) -> Result<RunOutput> {
    run_weighted_rounds(exp, Method::Fedprox, Some(mu), None)
}

/// Control-variate baseline. Every device step uses the corrected gradient
/// `g - c_k + c`; after each session the device control is refreshed with
/// the option-II rule `c_k <- c_k - c + (x - y) / (steps * lr)`, and the
/// server control absorbs `sum(delta c_k) / N`. Each round ships the model
/// plus a control both ways, which the byte accounting records as twice
/// the plain-averaging traffic.
pub fn run_scaffold(exp: &ResolvedExperiment) -> Result<RunOutput> {
    let cfg = &exp.config;
    let k = cfg.devices_per_round();
    let n = cfg.num_devices;
    let param_count = exp.spec.param_count();
    let lr = cfg.learning_rate;
    let mut global = exp.init_model.clone();
    let mut state = ScaffoldState::new(&exp.spec, n);
    let mut recorder = Recorder::new(
        Method::Scaffold,
        cfg.eval_every,
        cfg.record_wall_time,
        &exp.train,
        &exp.eval,
        &exp.spec,
        exp.header_json(),
    );
    recorder.record_initial(&global)?;

    for round in 0..cfg.rounds {
        let selected = selection_for_round(exp, round, None);
        let corrections: Vec<ParamVector> = state
            .client_controls
            .iter()
            .map(|c_k| state.server_control.sub(c_k))
            .collect();
        let reports =
            run_device_sessions(exp, round, &selected, &global, &Correction::Control(&corrections))?;

        let mut control_shift = ParamVector::zeros(exp.spec.layout());
        for (&device, report) in selected.iter().zip(&reports) {
            // c_k+ = c_k - c + (x - y)/(steps * lr); x - y = -delta.
            let scale = -1.0 / (report.steps as f64 * lr);
            let mut new_control = state.client_controls[device].clone();
            new_control.axpy(-1.0, &state.server_control);
            new_control.axpy(scale, &report.delta);
            let mut delta_c = new_control.sub(&state.client_controls[device]);
            state.client_controls[device] = new_control;
            delta_c.scale(1.0 / n as f64);
            control_shift.add_assign(&delta_c);
        }
        global = aggregate_locals(&global, &selected, exp, &reports)?;
        state.server_control.add_assign(&control_shift);
        recorder.round_done(round + 1, param_count, k, &global)?;
    }

    Ok(RunOutput {
        log: recorder.finish(),
        final_model: global,
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::nn::loss_and_grad;
    use crate::runner::ResolvedExperiment;

    fn test_config(method: Method, rounds: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_json(
            r#"{
                "method": "fedavg",
                "dataset": "synth",
                "num_devices": 8,
                "alpha": 0.5,
                "rounds": 4,
                "seed": 33,
                "batch_size": 10,
                "local_epochs": 2,
                "eval_every": 2,
                "synth": {"num_classes": 4, "train_per_class": 40, "test_per_class": 20, "dim": 8, "spread": 0.3},
                "model": {"input_dim": 8, "hidden_layers": [6], "num_classes": 4}
            }"#,
        )
        .unwrap();
        cfg.method = method;
        cfg.rounds = rounds;
        cfg.devices_per_round = Some(2);
        cfg
    }

    fn prepare(method: Method, rounds: usize) -> ResolvedExperiment {
        ResolvedExperiment::prepare(test_config(method, rounds)).unwrap()
    }

    #[test]
    fn fedprox_zero_mu_matches_fedavg_bitwise() {
        let avg = run_fedavg(&prepare(Method::Fedavg, 4)).unwrap();
        let mut cfg = test_config(Method::Fedprox, 4);
        cfg.prox_mu = Some(0.0);
        let prox = run_fedprox(&ResolvedExperiment::prepare(cfg).unwrap(), 0.0).unwrap();
        assert_eq!(avg.final_model, prox.final_model);
        for (a, b) in avg.log.rows.iter().zip(&prox.log.rows) {
            assert_eq!(a.test_accuracy, b.test_accuracy);
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.bytes_up, b.bytes_up);
        }
    }

    #[test]
    fn huge_mu_pins_the_local_model() {
        let mut cfg = test_config(Method::Fedprox, 1);
        cfg.prox_mu = Some(1e6);
        cfg.learning_rate = 1e-7;
        cfg.momentum = 0.0;
        let exp = ResolvedExperiment::prepare(cfg).unwrap();
        let reports = run_device_sessions(
            &exp,
            0,
            &[0, 1],
            &exp.init_model,
            &Correction::Prox(1e6),
        )
        .unwrap();
        for r in &reports {
            assert!(
                r.delta.sq_norm().sqrt() <= 1e-3,
                "delta norm {} exceeds the proximal pin",
                r.delta.sq_norm().sqrt()
            );
        }
    }

    #[test]
    fn prox_gradient_matches_finite_differences() {
        let exp = prepare(Method::Fedavg, 1);
        let mu = 0.7;
        let anchor = exp.init_model.clone();
        let mut model = exp.init_model.clone();
        for (i, v) in model.values_mut().iter_mut().enumerate() {
            *v += (i as f64 * 0.37).sin() * 0.05;
        }
        let x = exp.train.rows(0, 6).to_vec();
        let y = exp.train.labels()[0..6].to_vec();
        let (_, grad) = prox_loss_and_grad(&model, &exp.spec, &x, &y, mu, &anchor).unwrap();
        let h = 1e-4;
        for k in (0..model.len()).step_by(7) {
            let mut plus = model.clone();
            plus.values_mut()[k] += h;
            let mut minus = model.clone();
            minus.values_mut()[k] -= h;
            let (lp, _) = prox_loss_and_grad(&plus, &exp.spec, &x, &y, mu, &anchor).unwrap();
            let (lm, _) = prox_loss_and_grad(&minus, &exp.spec, &x, &y, mu, &anchor).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let a = grad.values()[k];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() / denom <= 1e-3, "coord {k}: {a} vs {fd}");
        }
    }

    #[test]
    fn prox_zero_mu_is_exactly_base_loss() {
        let exp = prepare(Method::Fedavg, 1);
        let x = exp.train.rows(0, 5).to_vec();
        let y = exp.train.labels()[0..5].to_vec();
        let (l0, g0) = loss_and_grad(&exp.init_model, &exp.spec, &x, &y).unwrap();
        let (l1, g1) =
            prox_loss_and_grad(&exp.init_model, &exp.spec, &x, &y, 0.0, &exp.init_model).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn scaffold_first_round_matches_fedavg() {
        // Controls are all zero during round one, so the corrected path
        // must coincide with plain averaging.
        let avg = run_fedavg(&prepare(Method::Fedavg, 1)).unwrap();
        let sca = run_scaffold(&prepare(Method::Scaffold, 1)).unwrap();
        assert_eq!(avg.final_model, sca.final_model);
    }

    #[test]
    fn scaffold_bytes_are_twice_fedavg() {
        let avg = run_fedavg(&prepare(Method::Fedavg, 4)).unwrap();
        let sca = run_scaffold(&prepare(Method::Scaffold, 4)).unwrap();
        let (au, ad) = avg.log.total_bytes();
        let (su, sd) = sca.log.total_bytes();
        assert_eq!(su, 2 * au);
        assert_eq!(sd, 2 * ad);
    }

    #[test]
    fn scaffold_single_device_controls_agree() {
        let mut cfg = test_config(Method::Scaffold, 3);
        cfg.num_devices = 1;
        cfg.devices_per_round = Some(1);
        let exp = ResolvedExperiment::prepare(cfg).unwrap();
        // Re-run the loop manually to observe the controls.
        let mut global = exp.init_model.clone();
        let mut state = ScaffoldState::new(&exp.spec, 1);
        let lr = exp.config.learning_rate;
        for round in 0..3 {
            let corrections = vec![state.server_control.sub(&state.client_controls[0])];
            let reports =
                run_device_sessions(&exp, round, &[0], &global, &Correction::Control(&corrections))
                    .unwrap();
            let report = &reports[0];
            let scale = -1.0 / (report.steps as f64 * lr);
            let mut new_control = state.client_controls[0].clone();
            new_control.axpy(-1.0, &state.server_control);
            new_control.axpy(scale, &report.delta);
            let delta_c = new_control.sub(&state.client_controls[0]);
            state.client_controls[0] = new_control;
            state.server_control.add_assign(&delta_c);
            global = aggregate_locals(&global, &[0], &exp, &reports).unwrap();
            let drift = state.server_control.dist_sq(&state.client_controls[0]);
            assert!(drift <= 1e-24, "round {round}: control gap {drift}");
        }
    }

    #[test]
    fn identical_device_data_keeps_symmetry() {
        // Force every device to own the same index set and train full-batch
        // so the per-device shuffle only permutes summation order. Local
        // models then agree up to rounding and the weighted average must
        // equal any one of them.
        let mut cfg = test_config(Method::Fedavg, 1);
        cfg.momentum = 0.0;
        let mut exp = ResolvedExperiment::prepare(cfg).unwrap();
        let shared = exp.parts[0].indices.clone();
        for p in &mut exp.parts {
            p.indices = shared.clone();
        }
        exp.config.batch_size = shared.len();
        let selected = vec![0usize, 1];
        let reports =
            run_device_sessions(&exp, 0, &selected, &exp.init_model, &Correction::None).unwrap();
        let avg = aggregate_locals(&exp.init_model, &selected, &exp, &reports).unwrap();
        let mut local0 = exp.init_model.clone();
        local0.add_assign(&reports[0].delta);
        for (a, b) in avg.values().iter().zip(local0.values()) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}
