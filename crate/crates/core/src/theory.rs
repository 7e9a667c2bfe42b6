//! Convergence-bound evaluation and empirical probes of its assumption
//! constants.
//!
//! The bound itself is a closed-form expression over user-supplied
//! constants. The probes report Monte Carlo estimates of the gradient
//! moments and smoothness; they are diagnostics, not proofs. The bound's
//! premises include strong convexity, which the MLP does not satisfy — the
//! heterogeneity-gap probe therefore runs on a linear (no hidden layer)
//! model with an L2 term, for which they hold.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DeviceDataset};
use crate::error::{Result, SimError};
use crate::nn::{init_params, loss_and_grad, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{stream, StreamKind};

/// Constants feeding the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConstants {
    /// Smoothness constant L.
    pub smoothness: f64,
    /// Strong-convexity constant mu.
    pub strong_convexity: f64,
    /// Stochastic-gradient variance bound (beta squared).
    pub gradient_variance: f64,
    /// Squared-norm bound on stochastic gradients (G squared).
    pub gradient_norm_sq: f64,
    /// Heterogeneity gap Gamma between the global optimum and the weighted
    /// per-device optima.
    pub heterogeneity_gap: f64,
    /// Shift constant gamma in the 1/(gamma + t - 1) decay.
    pub gamma_shift: f64,
    pub num_devices: usize,
    pub devices_per_round: usize,
    pub local_epochs: usize,
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("smoothness", self.smoothness),
            ("strong_convexity", self.strong_convexity),
            ("gradient_variance", self.gradient_variance),
            ("gradient_norm_sq", self.gradient_norm_sq),
            ("heterogeneity_gap", self.heterogeneity_gap),
            ("gamma_shift", self.gamma_shift),
        ];
        for (field, value) in non_negative {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(SimError::config(field, "must be finite and non-negative"));
            }
        }
        if self.smoothness < self.strong_convexity {
            return Err(SimError::config(
                "strong_convexity",
                "cannot exceed the smoothness constant",
            ));
        }
        Ok(())
    }
}

/// The drift/noise aggregate
/// `B = (1/N) beta^2 + 6 L Gamma + 8 (K E - 1)^2 G^2`.
pub fn bound_b(c: &TheoryConstants) -> Result<f64> {
    if c.num_devices == 0 {
        return Err(SimError::config("num_devices", "must be at least 1"));
    }
    let ke = (c.devices_per_round * c.local_epochs) as f64;
    Ok(c.gradient_variance / c.num_devices as f64
        + 6.0 * c.smoothness * c.heterogeneity_gap
        + 8.0 * (ke - 1.0).powi(2) * c.gradient_norm_sq)
}

/// Right-hand side of the convergence bound after `t` aggregations:
/// `L / (mu (gamma + t - 1)) * (2B/mu + (mu gamma / 2) * D1)` where `D1`
/// is the squared distance of the first average iterate from the optimum.
pub fn bound_gap(c: &TheoryConstants, t: u64, init_dist_sq: f64) -> Result<f64> {
    if t < 1 {
        return Err(SimError::config("t", "must be at least 1"));
    }
    if !(c.strong_convexity > 0.0) {
        return Err(SimError::config(
            "strong_convexity",
            "the bound requires mu > 0",
        ));
    }
    if !(c.gamma_shift > 0.0) {
        return Err(SimError::config("gamma_shift", "must be positive"));
    }
    let b = bound_b(c)?;
    let mu = c.strong_convexity;
    let lead = c.smoothness / (mu * (c.gamma_shift + t as f64 - 1.0));
    Ok(lead * (2.0 * b / mu + 0.5 * mu * c.gamma_shift * init_dist_sq))
}

/// Bound curve over aggregation counts, for the JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub constants: TheoryConstants,
    pub b: f64,
    pub init_dist_sq: f64,
    pub curve: Vec<BoundPoint>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundPoint {
    pub t: u64,
    pub bound: f64,
}

pub fn bound_report(c: &TheoryConstants, init_dist_sq: f64, t_max: u64) -> Result<BoundReport> {
    c.validate()?;
    let b = bound_b(c)?;
    let mut ts: Vec<u64> = Vec::new();
    let mut t = 1u64;
    while t <= t_max {
        ts.push(t);
        // Dense start, geometric tail.
        t = if t < 10 { t + 1 } else { (t * 5 / 4).max(t + 1) };
    }
    if *ts.last().unwrap() != t_max {
        ts.push(t_max);
    }
    let curve = ts
        .into_iter()
        .map(|t| {
            bound_gap(c, t, init_dist_sq).map(|bound| BoundPoint { t, bound })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport {
        constants: *c,
        b,
        init_dist_sq,
        curve,
    })
}

/// Gradient moments of one device at one probe point: the full-batch
/// gradient plus `num_batches` stochastic gradients of `batch_size`
/// samples each.
#[derive(Debug, Clone, Copy)]
pub struct GradMoments {
    /// Squared norm of the full-batch gradient.
    pub full_sq: f64,
    /// Mean squared norm of the stochastic gradients.
    pub mean_stoch_sq: f64,
    /// Mean squared deviation of stochastic gradients from the full one.
    pub variance: f64,
    /// Squared norm of the sample-mean stochastic gradient.
    pub mean_grad_sq: f64,
    pub grad_evals: usize,
}

pub fn device_gradient_moments(
    spec: &ModelSpec,
    data: &Dataset,
    device: &DeviceDataset,
    model: &ParamVector,
    batch_size: usize,
    num_batches: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradMoments> {
    let n = device.n();
    if n == 0 {
        return Err(SimError::Data("probe on an empty device".into()));
    }
    let batch_size = batch_size.min(n);

    let gather = |picks: &[usize]| -> (Vec<f64>, Vec<u8>) {
        let mut x = Vec::with_capacity(picks.len() * data.dim());
        let mut y = Vec::with_capacity(picks.len());
        for &p in picks {
            let idx = device.indices[p] as usize;
            x.extend_from_slice(data.row(idx));
            y.push(data.labels()[idx]);
        }
        (x, y)
    };

    let all: Vec<usize> = (0..n).collect();
    let (fx, fy) = gather(&all);
    let (_, full_grad) = loss_and_grad(model, spec, &fx, &fy)?;

    let mut mean_stoch_sq = 0.0;
    let mut variance = 0.0;
    let mut mean_grad = ParamVector::zeros(model.layout().clone());
    for _ in 0..num_batches {
        // Ascending order inside the batch keeps the full-batch case
        // summation-identical to the reference gradient.
        let mut picks = rand::seq::index::sample(rng, n, batch_size).into_vec();
        picks.sort_unstable();
        let (bx, by) = gather(&picks);
        let (_, grad) = loss_and_grad(model, spec, &bx, &by)?;
        mean_stoch_sq += grad.sq_norm();
        variance += grad.dist_sq(&full_grad);
        mean_grad.add_assign(&grad);
    }
    mean_stoch_sq /= num_batches as f64;
    variance /= num_batches as f64;
    mean_grad.scale(1.0 / num_batches as f64);

    Ok(GradMoments {
        full_sq: full_grad.sq_norm(),
        mean_stoch_sq,
        variance,
        mean_grad_sq: mean_grad.sq_norm(),
        grad_evals: num_batches + 1,
    })
}

/// Monte Carlo estimates of the assumption constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeEstimates {
    /// Max over probed devices of the empirical gradient variance.
    pub gradient_variance: f64,
    /// Max over probed devices of the empirical squared gradient norm.
    pub gradient_norm_sq: f64,
    /// Max observed gradient-difference ratio over nearby model pairs.
    pub smoothness: f64,
    pub grad_evals: usize,
}

/// Probe beta^2, G^2 and L on a partitioned dataset.
///
/// `grad_budget` caps the number of gradient evaluations (minimum 100).
/// Estimates are maxima of per-device empirical moments at random probe
/// models, so they under-estimate the true suprema; they are meant to
/// sanity-check magnitudes, nothing stronger.
pub fn probe_constants(
    spec: &ModelSpec,
    data: &Dataset,
    parts: &[DeviceDataset],
    batch_size: usize,
    grad_budget: usize,
    seed: u64,
) -> Result<ProbeEstimates> {
    if grad_budget < 100 {
        return Err(SimError::config("grad_budget", "must be at least 100"));
    }
    let probe_points = 3usize;
    let devices: Vec<&DeviceDataset> = parts.iter().take(8).collect();
    if devices.is_empty() {
        return Err(SimError::Data("probe needs at least one device".into()));
    }
    // Split the budget: half on moments, half on smoothness pairs.
    let moment_budget = grad_budget / 2;
    let per_cell = (moment_budget / (probe_points * devices.len())).max(4);

    let mut gradient_variance = 0.0f64;
    let mut gradient_norm_sq = 0.0f64;
    let mut grad_evals = 0usize;

    for point in 0..probe_points {
        let model = init_params(spec, &mut stream(seed, StreamKind::Probe, point as u64, 0));
        for (d, device) in devices.iter().enumerate() {
            let mut rng = stream(seed, StreamKind::Probe, point as u64, 1 + d as u64);
            let moments =
                device_gradient_moments(spec, data, device, &model, batch_size, per_cell, &mut rng)?;
            gradient_variance = gradient_variance.max(moments.variance);
            gradient_norm_sq = gradient_norm_sq.max(moments.mean_stoch_sq);
            grad_evals += moments.grad_evals;
        }
    }

    // Smoothness: largest gradient-difference ratio reachable around a
    // fixed set of anchor models, estimated per device on full batches by
    // power iteration on the finite-difference Hessian-vector product. The
    // iterate converges to the local operator norm, so a larger budget
    // refines the estimate rather than inflating a max over random draws.
    let pair_budget = (grad_budget - grad_budget / 2) / 2;
    let anchors = probe_points;
    let iters_per_cell = (pair_budget / (devices.len() * anchors)).clamp(3, 50);
    let fd_step = 1e-4;
    let mut smoothness = 0.0f64;
    for (d, device) in devices.iter().enumerate() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &idx in &device.indices {
            x.extend_from_slice(data.row(idx as usize));
            y.push(data.labels()[idx as usize]);
        }
        for anchor in 0..anchors {
            let base = init_params(
                spec,
                &mut stream(seed, StreamKind::Probe, 200 + anchor as u64, 0),
            );
            let (_, g0) = loss_and_grad(&base, spec, &x, &y)?;
            grad_evals += 1;
            let mut rng = stream(seed, StreamKind::Probe, 300 + anchor as u64, d as u64);
            let mut direction = ParamVector::zeros(base.layout().clone());
            for v in direction.values_mut() {
                let u: f64 = rng.random();
                *v = 2.0 * u - 1.0;
            }
            let norm = direction.sq_norm().sqrt();
            direction.scale(1.0 / norm.max(1e-12));
            for _ in 0..iters_per_cell {
                let mut shifted = base.clone();
                shifted.axpy(fd_step, &direction);
                let (_, g1) = loss_and_grad(&shifted, spec, &x, &y)?;
                grad_evals += 1;
                let mut hv = g1.sub(&g0);
                hv.scale(1.0 / fd_step);
                let ratio = hv.sq_norm().sqrt();
                if ratio <= 1e-12 {
                    break;
                }
                smoothness = smoothness.max(ratio);
                hv.scale(1.0 / ratio);
                direction = hv;
            }
        }
    }

    Ok(ProbeEstimates {
        gradient_variance,
        gradient_norm_sq,
        smoothness,
        grad_evals,
    })
}

/// Result of the heterogeneity-gap probe on the convex surrogate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GammaProbe {
    /// `F* - sum_i p_i f_i*` on the regularized objective.
    pub heterogeneity_gap: f64,
    pub global_optimum: f64,
    pub weighted_device_optima: f64,
    pub converged: bool,
}

fn regularized_loss_grad(
    model: &ParamVector,
    spec: &ModelSpec,
    x: &[f64],
    y: &[u8],
    l2: f64,
) -> Result<(f64, ParamVector)> {
    let (mut loss, mut grad) = loss_and_grad(model, spec, x, y)?;
    loss += 0.5 * l2 * model.sq_norm();
    grad.axpy(l2, model);
    Ok((loss, grad))
}

// Plain gradient descent with an adaptive step, to a gradient-norm
// tolerance. Good enough for the small strongly convex surrogates the
// probe runs on.
fn minimize(
    spec: &ModelSpec,
    x: &[f64],
    y: &[u8],
    l2: f64,
    grad_tol: f64,
    max_iters: usize,
) -> Result<(ParamVector, f64, bool)> {
    let mut w = ParamVector::zeros(spec.layout());
    let (mut loss, mut grad) = regularized_loss_grad(&w, spec, x, y, l2)?;
    let mut lr = 1.0;
    for _ in 0..max_iters {
        if grad.sq_norm().sqrt() < grad_tol {
            return Ok((w, loss, true));
        }
        let mut candidate = w.clone();
        candidate.axpy(-lr, &grad);
        let (new_loss, new_grad) = regularized_loss_grad(&candidate, spec, x, y, l2)?;
        if new_loss.is_finite() && new_loss <= loss {
            w = candidate;
            loss = new_loss;
            grad = new_grad;
            lr = (lr * 1.1).min(1e3);
        } else {
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
    }
    let converged = grad.sq_norm().sqrt() < grad_tol;
    Ok((w, loss, converged))
}

/// Estimate the heterogeneity gap on an L2-regularized linear classifier
/// (the convex surrogate for which the bound's premises hold), optimizing
/// the global and per-device objectives to near-zero gradient norm.
pub fn probe_gamma(
    spec: &ModelSpec,
    data: &Dataset,
    parts: &[DeviceDataset],
    l2: f64,
    grad_tol: f64,
) -> Result<GammaProbe> {
    if !spec.hidden_layers.is_empty() {
        return Err(SimError::config(
            "model.hidden_layers",
            "the gap probe requires the linear surrogate (no hidden layers)",
        ));
    }
    if !(l2 > 0.0) {
        return Err(SimError::config("l2", "must be positive for strong convexity"));
    }
    let max_iters = 20_000;

    // Global objective: with p_i = n_i / n_total the weighted mean equals
    // the plain mean over all partitioned samples.
    let total: usize = parts.iter().map(DeviceDataset::n).sum();
    let mut gx = Vec::new();
    let mut gy = Vec::new();
    for part in parts {
        for &i in &part.indices {
            gx.extend_from_slice(data.row(i as usize));
            gy.push(data.labels()[i as usize]);
        }
    }
    let (_, global_optimum, g_conv) = minimize(spec, &gx, &gy, l2, grad_tol, max_iters)?;

    let mut weighted_device_optima = 0.0;
    let mut converged = g_conv;
    for part in parts {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &i in &part.indices {
            x.extend_from_slice(data.row(i as usize));
            y.push(data.labels()[i as usize]);
        }
        let (_, f_star, c) = minimize(spec, &x, &y, l2, grad_tol, max_iters)?;
        converged = converged && c;
        weighted_device_optima += part.n() as f64 / total as f64 * f_star;
    }

    Ok(GammaProbe {
        heterogeneity_gap: global_optimum - weighted_device_optima,
        global_optimum,
        weighted_device_optima,
        converged,
    })
}
