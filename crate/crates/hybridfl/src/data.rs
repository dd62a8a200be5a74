//! Dataset generation, non-IID partitioning, per-round server resampling and
//! IDX-format loading.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A feature matrix with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::InvalidSize(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidSize(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows selected by index, in the order given.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset {
            features,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Concatenates datasets row-wise. All parts must agree on shape.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let dim = first.input_dim();
        let num_classes = first.num_classes;
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut features = Array2::zeros((total, dim));
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for part in parts {
            if part.input_dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: part.input_dim(),
                });
            }
            for i in 0..part.len() {
                features.row_mut(row).assign(&part.features.row(i));
                row += 1;
            }
            labels.extend_from_slice(&part.labels);
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Widens the label range (labels themselves are unchanged).
    pub fn expand_classes(mut self, num_classes: usize) -> Result<Self> {
        if num_classes < self.num_classes {
            return Err(Error::InvalidSize(format!(
                "cannot shrink class count from {} to {num_classes}",
                self.num_classes
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }
}

/// One client's local data. Shards produced by [`dirichlet_partition`] are
/// disjoint index sets over the source population.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub data: LabeledDataset,
}

impl ClientShard {
    pub fn num_samples(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerSource {
    ResamplePerRound,
    Fixed,
}

/// The server's small dataset for one round.
#[derive(Debug, Clone)]
pub struct ServerDataset {
    pub round: usize,
    pub data: LabeledDataset,
    pub source: ServerSource,
}

impl ServerDataset {
    pub fn fixed(round: usize, data: LabeledDataset) -> Self {
        ServerDataset {
            round,
            data,
            source: ServerSource::Fixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardSize {
    Fixed(usize),
    /// `population / num_clients`, rounded down.
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub shard_size: ShardSize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidSize("number of clients must be >= 1".into()));
        }
        if let PartitionScheme::Dirichlet { alpha } = self.scheme {
            if !(alpha > 0.0) {
                return Err(Error::InvalidSize(format!(
                    "dirichlet alpha must be positive, got {alpha}"
                )));
            }
        }
        Ok(())
    }
}

/// Gaussian-mixture classification data: class means lie on a sphere of
/// radius `class_separation`, samples have unit covariance around their
/// class mean, and labels are balanced up to rounding.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    n: usize,
    class_separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::InvalidSize(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if input_dim == 0 {
        return Err(Error::InvalidSize("input_dim must be positive".into()));
    }
    if n < num_classes {
        return Err(Error::InvalidSize(format!(
            "need at least {num_classes} samples for {num_classes} classes, got {n}"
        )));
    }
    if !(class_separation >= 0.0) {
        return Err(Error::InvalidSize(format!(
            "class_separation must be nonnegative, got {class_separation}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Array2::zeros((num_classes, input_dim));
    for c in 0..num_classes {
        let mut direction: Array1<f64> = Array1::zeros(input_dim);
        let mut norm = 0.0;
        while norm < 1e-12 {
            for v in direction.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            norm = direction.dot(&direction).sqrt();
        }
        means
            .row_mut(c)
            .assign(&(direction * (class_separation / norm)));
    }

    let mut features = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        labels.push(label);
        for (j, v) in features.row_mut(i).iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = means[[label, j]] + noise;
        }
    }
    LabeledDataset::new(features, labels, num_classes)
}

fn shard_samples(data: &LabeledDataset, spec: &PartitionSpec) -> Result<usize> {
    let per_client = match spec.shard_size {
        ShardSize::Fixed(m) => m,
        ShardSize::Proportional => data.len() / spec.num_clients,
    };
    if per_client == 0 {
        return Err(Error::InfeasiblePartition(
            "shard size resolves to zero samples per client".into(),
        ));
    }
    let needed = per_client * spec.num_clients;
    if needed > data.len() {
        let hist = data.class_histogram();
        return Err(Error::InfeasiblePartition(format!(
            "need {needed} samples ({} clients x {per_client}) but population has {} \
             (per-class counts: {hist:?})",
            spec.num_clients,
            data.len()
        )));
    }
    Ok(per_client)
}

/// Splits `data` into equal-sized disjoint client shards.
///
/// Under `Dirichlet{alpha}` each client draws its own class-proportion
/// vector from Dirichlet(alpha * 1) and fills its shard by categorical
/// draws from the remaining per-class pools; whenever a class pool runs
/// dry the remaining class masses are renormalized, so the procedure is
/// deterministic and always terminates.
pub fn dirichlet_partition(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_client = shard_samples(data, spec)?;
    let mut rng = rng::stream(spec.seed, &[rng::STREAM_PARTITION]);

    let assignments: Vec<Vec<usize>> = match spec.scheme {
        PartitionScheme::Iid => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            shuffle(&mut order, &mut rng);
            (0..spec.num_clients)
                .map(|c| order[c * per_client..(c + 1) * per_client].to_vec())
                .collect()
        }
        PartitionScheme::Dirichlet { alpha } => {
            let num_classes = data.num_classes();
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for (i, &label) in data.labels().iter().enumerate() {
                pools[label].push(i);
            }
            for pool in pools.iter_mut() {
                shuffle(pool, &mut rng);
            }
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| Error::InvalidSize(format!("dirichlet({alpha}): {e}")))?;
            let mut shards = Vec::with_capacity(spec.num_clients);
            for _ in 0..spec.num_clients {
                let proportions = sample_dirichlet(num_classes, &gamma, &mut rng);
                let quotas = capped_quotas(&proportions, &pools, per_client);
                let mut indices = Vec::with_capacity(per_client);
                for (class, quota) in quotas.into_iter().enumerate() {
                    for _ in 0..quota {
                        indices.push(pools[class].pop().expect("quota within pool"));
                    }
                }
                shards.push(indices);
            }
            shards
        }
    };

    Ok(assignments
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientShard {
                client_id,
                data: data.subset(&indices),
            }
        })
        .collect())
}

/// Symmetric Dirichlet draw via normalized Gamma variates (works for any
/// runtime class count). Retries the astronomically unlikely all-zero draw.
fn sample_dirichlet(num_classes: usize, gamma: &Gamma<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..num_classes).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|v| v / sum).collect();
        }
    }
}

/// Turns a proportion vector into integer per-class take counts summing to
/// `total`, never exceeding the pool capacities. Proportions are rounded
/// by largest remainder; when a class pool caps out, its leftover demand is
/// redistributed over the remaining classes with masses renormalized.
fn capped_quotas(proportions: &[f64], pools: &[Vec<usize>], total: usize) -> Vec<usize> {
    let num_classes = proportions.len();
    let mut quotas = vec![0usize; num_classes];
    let mut need = total;
    while need > 0 {
        let capacity: Vec<usize> = (0..num_classes)
            .map(|c| pools[c].len() - quotas[c])
            .collect();
        let active: Vec<usize> = (0..num_classes).filter(|&c| capacity[c] > 0).collect();
        assert!(!active.is_empty(), "total feasibility checked up front");
        let mass: f64 = active.iter().map(|&c| proportions[c]).sum();
        // real-valued targets over the classes that still have room
        let targets: Vec<(usize, f64)> = active
            .iter()
            .map(|&c| {
                let share = if mass > 0.0 {
                    proportions[c] / mass
                } else {
                    1.0 / active.len() as f64
                };
                (c, need as f64 * share)
            })
            .collect();
        let mut assigned = 0usize;
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(targets.len());
        for &(c, target) in &targets {
            let take = (target.floor() as usize).min(capacity[c]);
            quotas[c] += take;
            assigned += take;
            if capacity[c] > take {
                remainders.push((c, target - target.floor()));
            }
        }
        // largest fractional remainders get the leftover units
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (c, _) in remainders {
            if assigned >= need {
                break;
            }
            quotas[c] += 1;
            assigned += 1;
        }
        if assigned == 0 {
            // all rounded targets were capped to zero; force progress on
            // the heaviest class with room
            let &c = active
                .iter()
                .max_by(|&&a, &&b| {
                    proportions[a]
                        .partial_cmp(&proportions[b])
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .expect("non-empty active set");
            quotas[c] += 1;
            assigned = 1;
        }
        need -= assigned.min(need);
    }
    quotas
}

/// Fisher-Yates with the supplied generator.
fn shuffle(items: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Uniform sample of `m_s` rows without replacement, seeded by
/// `(master_seed, round)`, so the draw for any round can be reproduced
/// without storing it.
pub fn draw_server_dataset(
    population: &LabeledDataset,
    m_s: usize,
    round: usize,
    master_seed: u64,
) -> Result<ServerDataset> {
    if m_s == 0 {
        return Err(Error::InvalidSize("server dataset size must be >= 1".into()));
    }
    if m_s > population.len() {
        return Err(Error::SampleTooLarge {
            requested: m_s,
            available: population.len(),
        });
    }
    let mut rng = rng::stream(master_seed, &[rng::STREAM_SERVER_DRAW, round as u64]);
    let mut indices = rand::seq::index::sample(&mut rng, population.len(), m_s).into_vec();
    indices.sort_unstable();
    Ok(ServerDataset {
        round,
        data: population.subset(&indices),
        source: ServerSource::ResamplePerRound,
    })
}

fn read_be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Loads an IDX image/label file pair (big-endian headers, magic
/// 0x00000803 for images and 0x00000801 for labels). Pixels are scaled
/// to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)
        .map_err(|e| Error::io(format!("reading {}", images_path.display()), e))?;
    let labels = std::fs::read(labels_path)
        .map_err(|e| Error::io(format!("reading {}", labels_path.display()), e))?;

    if images.len() < 16 {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            needed: 16,
            actual: images.len(),
        });
    }
    let magic = read_be_u32(&images, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_be_u32(&images, 4) as usize;
    let rows = read_be_u32(&images, 8) as usize;
    let cols = read_be_u32(&images, 12) as usize;
    let pixels = rows * cols;
    let needed = 16 + count * pixels;
    if images.len() < needed {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            needed,
            actual: images.len(),
        });
    }

    if labels.len() < 8 {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            needed: 8,
            actual: labels.len(),
        });
    }
    let magic = read_be_u32(&labels, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let label_count = read_be_u32(&labels, 4) as usize;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let needed = 8 + count;
    if labels.len() < needed {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            needed,
            actual: labels.len(),
        });
    }

    let mut features = Array2::zeros((count, pixels));
    for i in 0..count {
        for j in 0..pixels {
            features[[i, j]] = f64::from(images[16 + i * pixels + j]) / 255.0;
        }
    }
    let label_values: Vec<usize> = labels[8..8 + count].iter().map(|&b| b as usize).collect();
    let num_classes = label_values.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(features, label_values, num_classes)
}

/// Per-coordinate standardization. Mean and scale are computed on `train`
/// and applied to every dataset, so held-out data never leaks into the
/// statistics.
pub fn standardize(
    train: &LabeledDataset,
    others: &[&LabeledDataset],
) -> (LabeledDataset, Vec<LabeledDataset>) {
    let n = train.len() as f64;
    let dim = train.input_dim();
    let mut mean = Array1::zeros(dim);
    for row in train.features.rows() {
        mean = mean + &row;
    }
    mean /= n;
    let mut var = Array1::zeros(dim);
    for row in train.features.rows() {
        let centered = &row - &mean;
        var = var + &centered * &centered;
    }
    var /= n;
    let scale = var.mapv(|v: f64| v.sqrt().max(1e-12));

    let apply = |ds: &LabeledDataset| {
        let mut features = ds.features.clone();
        for mut row in features.rows_mut() {
            row -= &mean;
            row /= &scale;
        }
        LabeledDataset {
            features,
            labels: ds.labels.clone(),
            num_classes: ds.num_classes,
        }
    };
    (apply(train), others.iter().map(|ds| apply(ds)).collect())
}
