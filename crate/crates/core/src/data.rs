//! Dataset ingestion (MNIST IDX, synthetic blobs) and heterogeneous
//! partitioning across devices.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SimError};
use crate::rng::{stream, StreamKind};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled samples with features normalized to `[0, 1]` (row-major).
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<u8>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<u8>, num_classes: usize) -> Self {
        assert_eq!(features.len(), labels.len() * dim, "feature/label mismatch");
        assert!(
            labels.iter().all(|&l| (l as usize) < num_classes),
            "label out of range"
        );
        Dataset {
            features,
            dim,
            labels,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Contiguous feature block for rows `[start, end)`.
    pub fn rows(&self, start: usize, end: usize) -> &[f64] {
        &self.features[start * self.dim..end * self.dim]
    }
}

/// One device's share of the training set, as indices into the parent
/// [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceDataset {
    pub device_id: usize,
    pub indices: Vec<u32>,
}

impl DeviceDataset {
    pub fn n(&self) -> usize {
        self.indices.len()
    }
}

/// Parameters of a Dirichlet partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_devices: usize,
    pub alpha: f64,
    pub seed: u64,
}

fn read_idx_header(
    reader: &mut impl Read,
    expected_magic: u32,
    path: &Path,
) -> Result<u32> {
    let magic = reader
        .read_u32::<BigEndian>()
        .map_err(|_| SimError::Format(format!("{}: truncated IDX header", path.display())))?;
    if magic != expected_magic {
        return Err(SimError::Format(format!(
            "{}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}",
            path.display()
        )));
    }
    reader
        .read_u32::<BigEndian>()
        .map_err(|_| SimError::Format(format!("{}: truncated IDX header", path.display())))
}

/// Load an MNIST-style IDX image/label file pair.
///
/// Pixels are scaled by 1/255 into `[0, 1]`. Fails on wrong magic numbers,
/// truncated payloads, or mismatched sample counts.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let count = read_idx_header(&mut images, IDX_IMAGES_MAGIC, images_path)? as usize;
    let rows = images
        .read_u32::<BigEndian>()
        .map_err(|_| SimError::Format(format!("{}: truncated IDX header", images_path.display())))?
        as usize;
    let cols = images
        .read_u32::<BigEndian>()
        .map_err(|_| SimError::Format(format!("{}: truncated IDX header", images_path.display())))?
        as usize;
    let dim = rows * cols;

    let mut pixels = vec![0u8; count * dim];
    images.read_exact(&mut pixels).map_err(|_| {
        SimError::Format(format!("{}: truncated image payload", images_path.display()))
    })?;
    let features: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();

    let mut labels_file = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let label_count = read_idx_header(&mut labels_file, IDX_LABELS_MAGIC, labels_path)? as usize;
    if label_count != count {
        return Err(SimError::Format(format!(
            "image count {count} does not match label count {label_count}"
        )));
    }
    let mut labels = vec![0u8; label_count];
    labels_file.read_exact(&mut labels).map_err(|_| {
        SimError::Format(format!("{}: truncated label payload", labels_path.display()))
    })?;
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(SimError::Format(format!("label {bad} out of range 0-9")));
    }

    Ok(Dataset::new(features, dim, labels, 10))
}

/// Shape of the synthetic Gaussian-blob dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

fn synth_means(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..spec.num_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            v
        })
        .collect()
}

fn synth_samples(
    spec: &SynthSpec,
    means: &[Vec<f64>],
    samples_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let total = spec.num_classes * samples_per_class;
    let mut features = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &m in mean {
                let noise: f64 = StandardNormal.sample(rng);
                features.push(m + spec.spread * noise);
            }
            labels.push(class as u8);
        }
    }
    Dataset::new(features, spec.dim, labels, spec.num_classes)
}

/// Gaussian blobs with one unit-sphere mean per class; deterministic in
/// `seed`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Dataset {
    assert!(spec.num_classes >= 1 && spec.samples_per_class >= 1 && spec.dim >= 1);
    let means = synth_means(spec, &mut stream(seed, StreamKind::SynthMeans, 0, 0));
    synth_samples(
        spec,
        &means,
        spec.samples_per_class,
        &mut stream(seed, StreamKind::SynthNoise, 0, 0),
    )
}

/// Train/test pair drawn around the same class means, with independent
/// noise streams.
pub fn synth_train_test(spec: &SynthSpec, test_per_class: usize, seed: u64) -> (Dataset, Dataset) {
    let means = synth_means(spec, &mut stream(seed, StreamKind::SynthMeans, 0, 0));
    let train = synth_samples(
        spec,
        &means,
        spec.samples_per_class,
        &mut stream(seed, StreamKind::SynthNoise, 0, 0),
    );
    let test = synth_samples(
        spec,
        &means,
        test_per_class,
        &mut stream(seed, StreamKind::SynthNoise, 1, 0),
    );
    (train, test)
}

/// Per-class Dirichlet split: for each class, proportions over devices are
/// drawn from `Dir(alpha)` and the class's indices are divided by
/// largest-remainder rounding. Devices left empty steal one sample from the
/// currently largest device, so every device ends up with at least one
/// sample.
pub fn dirichlet_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<DeviceDataset>> {
    if spec.num_devices < 1 {
        return Err(SimError::config("num_devices", "must be at least 1"));
    }
    if !(spec.alpha > 0.0) {
        return Err(SimError::config("alpha", "must be positive"));
    }
    if data.num_classes() < 2 {
        return Err(SimError::config("num_classes", "partition needs >= 2 classes"));
    }
    if spec.num_devices > data.len() {
        return Err(SimError::config(
            "num_devices",
            format!(
                "{} devices exceed {} total samples",
                spec.num_devices,
                data.len()
            ),
        ));
    }

    let mut rng = stream(spec.seed, StreamKind::Partition, 0, 0);
    let n_dev = spec.num_devices;

    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); data.num_classes()];
    for (i, &label) in data.labels().iter().enumerate() {
        by_class[label as usize].push(i as u32);
    }

    let mut device_indices: Vec<Vec<u32>> = vec![Vec::new(); n_dev];
    for class_indices in &by_class {
        if class_indices.is_empty() {
            continue;
        }
        let proportions = dirichlet_proportions(spec.alpha, n_dev, &mut rng);
        let counts = largest_remainder(&proportions, class_indices.len());
        let mut cursor = 0;
        for (dev, &count) in counts.iter().enumerate() {
            device_indices[dev].extend_from_slice(&class_indices[cursor..cursor + count]);
            cursor += count;
        }
    }

    repair_empty_devices(&mut device_indices);

    Ok(device_indices
        .into_iter()
        .enumerate()
        .map(|(device_id, indices)| DeviceDataset { device_id, indices })
        .collect())
}

/// One draw of device proportions: normalized Gamma(alpha, 1) samples.
fn dirichlet_proportions(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0 checked by caller");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        // Underflowed to all zeros; fall back to the uniform split.
        return vec![1.0 / n as f64; n];
    }
    for d in &mut draws {
        *d /= total;
    }
    draws
}

/// Integer apportionment of `total` by `proportions`, largest remainder
/// first, ties to the lower index.
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &dev in order.iter().take(total - assigned) {
        counts[dev] += 1;
    }
    counts
}

fn repair_empty_devices(device_indices: &mut [Vec<u32>]) {
    for empty in 0..device_indices.len() {
        while device_indices[empty].is_empty() {
            let donor = device_indices
                .iter()
                .enumerate()
                .max_by(|(ai, a), (bi, b)| a.len().cmp(&b.len()).then(bi.cmp(ai)))
                .map(|(i, _)| i)
                .expect("at least one device");
            assert!(
                device_indices[donor].len() >= 2,
                "cannot repair empty device: too few samples"
            );
            let moved = device_indices[donor].pop().expect("donor non-empty");
            device_indices[empty].push(moved);
        }
    }
}

/// Pinned partition, serializable so runs can share an exact split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionCache {
    pub seed: u64,
    pub alpha: f64,
    pub num_devices: usize,
    pub indices: Vec<Vec<u32>>,
}

impl PartitionCache {
    pub fn from_parts(spec: &PartitionSpec, parts: &[DeviceDataset]) -> Self {
        PartitionCache {
            seed: spec.seed,
            alpha: spec.alpha,
            num_devices: spec.num_devices,
            indices: parts.iter().map(|p| p.indices.clone()).collect(),
        }
    }

    pub fn to_parts(&self) -> Vec<DeviceDataset> {
        self.indices
            .iter()
            .cloned()
            .enumerate()
            .map(|(device_id, indices)| DeviceDataset { device_id, indices })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        crate::metrics::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Stable content hash of the partition (hex, 16 chars).
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.alpha.to_le_bytes());
        hasher.update((self.num_devices as u64).to_le_bytes());
        for dev in &self.indices {
            hasher.update((dev.len() as u64).to_le_bytes());
            for &i in dev {
                hasher.update(i.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Natural-log entropy of one device's label distribution.
pub fn label_entropy(data: &Dataset, device: &DeviceDataset) -> f64 {
    let mut counts = vec![0usize; data.num_classes()];
    for &i in &device.indices {
        counts[data.labels()[i as usize] as usize] += 1;
    }
    let n = device.n() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mean per-device label entropy of a partition.
pub fn mean_label_entropy(data: &Dataset, parts: &[DeviceDataset]) -> f64 {
    parts.iter().map(|p| label_entropy(data, p)).sum::<f64>() / parts.len() as f64
}

// Deterministic uniform sample of `k` distinct device ids out of `n`.
// Shared by the uniform-selection baselines so equal streams give equal
// picks.
pub fn uniform_k_of_n(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot select {k} of {n}");
    rand::seq::index::sample(rng, n, k).into_vec()
}
