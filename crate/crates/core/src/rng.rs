//! Named, independent RNG streams derived from one master seed.
//!
//! Every source of randomness in an experiment (model init, partitioning,
//! grouping, selection, per-device training, ...) draws from its own
//! ChaCha8 stream keyed by `(master seed, stream kind, a, b)`. Changing how
//! one component consumes randomness never shifts the draws seen by any
//! other component, and parallel execution can hand each task its stream
//! up front so results match sequential execution bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The named stream families. The integer payloads `a`/`b` carried by
/// [`stream`] disambiguate instances within a family (round, device, split).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Model weight initialization.
    Init,
    /// Dirichlet partitioning of the training set.
    Partition,
    /// Class means of the synthetic dataset.
    SynthMeans,
    /// Per-split sample noise of the synthetic dataset (`a` = split id).
    SynthNoise,
    /// Device regrouping at round `a`.
    Grouping,
    /// Device selection at round `a`.
    Selection,
    /// Local training at round `a` on device `b`.
    Training,
    /// Gradient sampling in the theory probes (`a` = draw index).
    Probe,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Init => 1,
            StreamKind::Partition => 2,
            StreamKind::SynthMeans => 3,
            StreamKind::SynthNoise => 4,
            StreamKind::Grouping => 5,
            StreamKind::Selection => 6,
            StreamKind::Training => 7,
            StreamKind::Probe => 8,
        }
    }
}

// SplitMix64 finalizer; distinct inputs map to well-spread 64-bit words.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for `(seed, kind, a, b)`. Distinct keys give
/// independent streams; equal keys give identical streams.
pub fn stream(seed: u64, kind: StreamKind, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let words = [
        mix(seed),
        mix(seed ^ mix(kind.tag())),
        mix(kind.tag() ^ mix(a)),
        mix(a ^ mix(b).rotate_left(17) ^ kind.tag().wrapping_mul(0x9E37_79B9)),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
