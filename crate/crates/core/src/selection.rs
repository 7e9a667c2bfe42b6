//! Grouping- and count-based device selection.
//!
//! Devices are randomly regrouped every `regroup_cycles * K` rounds, and at
//! every round one device is chosen per group. Choice weights come from an
//! inverse-square-root participation count, so rarely selected devices are
//! preferred: with probability `epsilon` the maximum-weight device is taken
//! (note: epsilon here is the GREEDY probability, not the exploration
//! probability of classic epsilon-greedy), otherwise the device is sampled
//! proportionally to its weight. Never-selected devices carry infinite
//! weight and are picked uniformly among themselves first.

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SimError};

/// Participation counts per device and cycle slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    devices: usize,
    slots: usize,
    counts: Vec<u64>,
}

impl CountTable {
    pub fn new(devices: usize, slots: usize) -> Self {
        CountTable {
            devices,
            slots,
            counts: vec![0; devices * slots],
        }
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn get(&self, device: usize, slot: usize) -> u64 {
        self.counts[device * self.slots + slot]
    }

    pub fn increment(&mut self, device: usize, slot: usize) {
        self.counts[device * self.slots + slot] += 1;
    }

    /// For tests: total selections recorded so far.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Disjoint device groups formed at some round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub groups: Vec<Vec<usize>>,
    pub formed_at_round: usize,
}

/// Selection hyperparameters, fixed for an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    /// Probability of taking the argmax-weight device.
    pub epsilon: f64,
    /// Regroup every `regroup_cycles * K` rounds.
    pub regroup_cycles: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            epsilon: 0.5,
            regroup_cycles: 1,
        }
    }
}

/// One selection event, for the optional audit trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRow {
    pub round: usize,
    pub slot: usize,
    pub group_index: usize,
    pub device: usize,
    pub greedy: bool,
}

/// Uniformly permute the devices and slice them into `k` near-equal groups
/// (sizes differ by at most one).
pub fn regroup(
    device_ids: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
    round: usize,
) -> Result<GroupAssignment> {
    let n = device_ids.len();
    if k == 0 {
        return Err(SimError::config("devices_per_round", "must be at least 1"));
    }
    if k > n {
        return Err(SimError::config(
            "devices_per_round",
            format!("cannot form {k} groups from {n} devices"),
        ));
    }
    let mut shuffled = device_ids.to_vec();
    shuffled.shuffle(rng);
    let base = n / k;
    let extra = n % k;
    let mut groups = Vec::with_capacity(k);
    let mut cursor = 0;
    for g in 0..k {
        let size = base + usize::from(g < extra);
        groups.push(shuffled[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(GroupAssignment {
        groups,
        formed_at_round: round,
    })
}

/// Inverse-square-root participation weight; a zero count maps to the
/// infinity sentinel so never-selected devices dominate.
pub fn mbie_weight(count: u64) -> f64 {
    if count == 0 {
        f64::INFINITY
    } else {
        1.0 / (count as f64).sqrt()
    }
}

/// Pick one device from each group and record the participation.
///
/// `slot` is `round % K`. With probability `policy_epsilon` the
/// maximum-weight device is taken (ties to the lowest device id); otherwise
/// a device is sampled with probability proportional to its weight. If any
/// group member has never been selected for this slot, the proportional
/// path collapses to a uniform choice among those members.
pub fn select_devices(
    groups: &GroupAssignment,
    table: &mut CountTable,
    round: usize,
    policy_epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<TraceRow> {
    let k = groups.groups.len();
    assert_eq!(k, table.slots(), "group count must match table slots");
    let slot = round % k;
    let mut picks = Vec::with_capacity(k);
    for (group_index, group) in groups.groups.iter().enumerate() {
        assert!(!group.is_empty(), "selection group is empty");
        let draw: f64 = rng.random();
        let greedy = !(draw > policy_epsilon);
        let device = if greedy {
            greedy_pick(group, table, slot)
        } else {
            proportional_pick(group, table, slot, rng)
        };
        table.increment(device, slot);
        picks.push(TraceRow {
            round,
            slot,
            group_index,
            device,
            greedy,
        });
    }
    picks
}

fn greedy_pick(group: &[usize], table: &CountTable, slot: usize) -> usize {
    let mut best = group[0];
    let mut best_weight = mbie_weight(table.get(best, slot));
    for &dev in &group[1..] {
        let w = mbie_weight(table.get(dev, slot));
        if w > best_weight || (w == best_weight && dev < best) {
            best = dev;
            best_weight = w;
        }
    }
    best
}

fn proportional_pick(
    group: &[usize],
    table: &CountTable,
    slot: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let weights: Vec<f64> = group
        .iter()
        .map(|&dev| mbie_weight(table.get(dev, slot)))
        .collect();
    let unvisited: Vec<usize> = group
        .iter()
        .zip(&weights)
        .filter(|(_, w)| w.is_infinite())
        .map(|(&dev, _)| dev)
        .collect();
    if !unvisited.is_empty() {
        return unvisited[rng.random_range(0..unvisited.len())];
    }
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (&dev, &w) in group.iter().zip(&weights) {
        if target < w {
            return dev;
        }
        target -= w;
    }
    *group.last().unwrap()
}
