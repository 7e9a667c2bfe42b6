//! The concatenated-training server state machine: cycles of model
//! duplication, rotating dispatch across the selected devices, and
//! data-size-weighted aggregation.

use rayon::prelude::*;

use crate::config::Method;
use crate::data::{uniform_k_of_n, Dataset, DeviceDataset};
use crate::error::{Result, SimError};
use crate::metrics::Recorder;
use crate::nn::{local_train, ModelSpec, TrainOptions};
use crate::params::{weighted_mean, ParamVector};
use crate::rng::{stream, StreamKind};
use crate::runner::{ResolvedExperiment, RunOutput};
use crate::selection::{regroup, select_devices, CountTable, GroupAssignment, TraceRow};

/// Which slot (1-based) copy `copy` visits in round `round_in_cycle`
/// (1-based) of a cycle with `k` slots.
///
/// For fixed `copy` the map over rounds is a permutation of `1..=k`, and
/// vice versa, so each copy meets each selected slot exactly once per
/// cycle.
pub fn dispatch_target(copy: usize, round_in_cycle: usize, k: usize) -> usize {
    assert!(k >= 1, "cycle needs at least one slot");
    assert!(
        (1..=k).contains(&copy) && (1..=k).contains(&round_in_cycle),
        "dispatch indices out of range: copy {copy}, round {round_in_cycle}, k {k}"
    );
    ((copy + round_in_cycle - 2) % k) + 1
}

/// One traveling model copy and the sample count it has accumulated.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCopy {
    pub model: ParamVector,
    pub data_size: u64,
}

/// The per-cycle server state: the copy list plus the round offset within
/// the cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleState {
    pub copies: Vec<ModelCopy>,
    pub offset: usize,
    /// Training iterations per cycle; equals the copy count except for the
    /// per-round-aggregation ablation, which completes after one.
    pub length: usize,
}

impl CycleState {
    /// `k` fresh copies of the global model, zero accumulated data.
    pub fn fresh(global: &ParamVector, k: usize, length: usize) -> Self {
        assert!(k >= 1 && (1..=k).contains(&length));
        CycleState {
            copies: (0..k)
                .map(|_| ModelCopy {
                    model: global.clone(),
                    data_size: 0,
                })
                .collect(),
            offset: 0,
            length,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.offset == self.length
    }
}

/// Duplicate the global model into a fresh cycle. Errors when called
/// mid-cycle (`round` not a multiple of `k`).
pub fn begin_cycle(round: usize, global: &ParamVector, k: usize) -> Result<CycleState> {
    if !round.is_multiple_of(k) {
        return Err(SimError::Protocol(format!(
            "cycle start requested at round {round}, which is mid-cycle for k={k}"
        )));
    }
    Ok(CycleState::fresh(global, k, k))
}

/// Everything one training iteration needs besides the cycle itself.
pub struct TrainIterContext<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub parts: &'a [DeviceDataset],
    pub opts: TrainOptions,
    pub seed: u64,
    /// Absolute round index; keys the per-device training streams.
    pub round: usize,
}

/// Run one training iteration: each copy visits its dispatch slot's device,
/// trains there, and absorbs the returned delta and sample count.
///
/// Copies are independent (disjoint state, pre-derived streams), so the
/// parallel execution below is bit-identical to a sequential pass.
pub fn train_iter(
    cycle: &mut CycleState,
    selected: &[usize],
    ctx: &TrainIterContext<'_>,
) -> Result<()> {
    let k = cycle.copies.len();
    if selected.len() != k {
        return Err(SimError::Protocol(format!(
            "{} selected devices for {k} copies",
            selected.len()
        )));
    }
    if cycle.offset >= cycle.length {
        return Err(SimError::Protocol(
            "training iteration on a completed cycle".into(),
        ));
    }
    for &dev in selected {
        if ctx.parts[dev].indices.is_empty() {
            return Err(SimError::Protocol(format!(
                "selected device {dev} has no data"
            )));
        }
    }

    let offset = cycle.offset;
    let reports = cycle
        .copies
        .par_iter()
        .enumerate()
        .map(|(copy_idx, copy)| {
            let slot = (copy_idx + offset) % k;
            let device = selected[slot];
            let mut rng = stream(ctx.seed, StreamKind::Training, ctx.round as u64, device as u64);
            local_train(
                &copy.model,
                ctx.spec,
                ctx.data,
                &ctx.parts[device].indices,
                &ctx.opts,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    for (copy_idx, report) in reports.into_iter().enumerate() {
        let slot = (copy_idx + offset) % k;
        let device = selected[slot];
        let copy = &mut cycle.copies[copy_idx];
        copy.model.add_assign(&report.delta);
        copy.data_size += ctx.parts[device].n() as u64;
    }
    cycle.offset += 1;
    Ok(())
}

/// Collapse a completed cycle into the new global model, weighting each
/// copy by its accumulated data size.
pub fn aggregate(cycle: &CycleState) -> Result<ParamVector> {
    if !cycle.is_complete() {
        return Err(SimError::Protocol(format!(
            "aggregation at offset {} of a length-{} cycle",
            cycle.offset, cycle.length
        )));
    }
    let models: Vec<ParamVector> = cycle.copies.iter().map(|c| c.model.clone()).collect();
    let weights: Vec<f64> = cycle.copies.iter().map(|c| c.data_size as f64).collect();
    weighted_mean(&models, &weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    /// Concatenated cycles with grouped, count-based selection.
    Full,
    /// Grouped, count-based selection but aggregation every round.
    SelectionOnly,
    /// Concatenated cycles with plain uniform selection.
    ConcatenationOnly,
}

/// Run the full protocol (or one of its two ablations, chosen by the
/// configured method) and return the metrics log, final global model and
/// the selection trace.
pub fn run_fedcat(exp: &ResolvedExperiment) -> Result<RunOutput> {
    let cfg = &exp.config;
    let variant = match cfg.method {
        Method::Fedcat => Variant::Full,
        Method::FedcatGc => Variant::SelectionOnly,
        Method::FedcatDc => Variant::ConcatenationOnly,
        other => {
            return Err(SimError::config(
                "method",
                format!("engine cannot run {}", other.name()),
            ))
        }
    };

    let k = cfg.devices_per_round();
    let n = cfg.num_devices;
    let seed = cfg.seed;
    let param_count = exp.spec.param_count();
    let opts = exp.train_options();
    let device_ids: Vec<usize> = (0..n).collect();

    let mut table = CountTable::new(n, k);
    let mut groups: Option<GroupAssignment> = None;
    let mut cycle: Option<CycleState> = None;
    let mut global = exp.init_model.clone();
    let mut trace: Vec<TraceRow> = Vec::new();

    let mut recorder = Recorder::new(
        cfg.method,
        cfg.eval_every,
        cfg.record_wall_time,
        &exp.train,
        &exp.eval,
        &exp.spec,
        exp.header_json(),
    );
    recorder.record_initial(&global)?;

    for round in 0..cfg.rounds {
        let selected: Vec<usize> = if variant == Variant::ConcatenationOnly {
            uniform_k_of_n(&mut stream(seed, StreamKind::Selection, round as u64, 0), n, k)
        } else {
            if round % (cfg.regroup_cycles * k) == 0 {
                groups = Some(regroup(
                    &device_ids,
                    k,
                    &mut stream(seed, StreamKind::Grouping, round as u64, 0),
                    round,
                )?);
            }
            let picks = select_devices(
                groups.as_ref().expect("groups formed at round 0"),
                &mut table,
                round,
                cfg.greedy_epsilon,
                &mut stream(seed, StreamKind::Selection, round as u64, 0),
            );
            let chosen = picks.iter().map(|p| p.device).collect();
            trace.extend(picks);
            chosen
        };

        let state = match cycle.take() {
            Some(c) => c,
            None => match variant {
                Variant::SelectionOnly => CycleState::fresh(&global, k, 1),
                _ => begin_cycle(round, &global, k)?,
            },
        };
        let mut state = state;
        let ctx = TrainIterContext {
            spec: &exp.spec,
            data: &exp.train,
            parts: &exp.parts,
            opts,
            seed,
            round,
        };
        train_iter(&mut state, &selected, &ctx)?;
        if state.is_complete() {
            global = aggregate(&state)?;
        } else {
            cycle = Some(state);
        }

        recorder.round_done(round + 1, param_count, k, &global)?;
    }

    Ok(RunOutput {
        log: recorder.finish(),
        final_model: global,
        trace,
    })
}
