//! Data settings: synthetic grouped distributions, the three partition
//! schemes (IID, pathological two-class, practical dominating-class), and the
//! IDX binary format for real desk-scale subsets.
//!
//! The practical setting groups clients and gives every client 80% of its
//! samples from its group's dominating classes and 20% from the rest, with a
//! test split drawn from the same distribution. Count rounding is
//! deterministic: the dominating share is `round(dominance * n)` and within a
//! class set counts split evenly with the remainder going to classes in
//! ascending order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::fmath;
use crate::models::{ClientDataset, LabeledDataset};
use crate::rng::{run_stream, StreamKind};
use crate::{Error, Result};

/// Synthetic grouped Gaussian-mixture specification. Clients in one group
/// share per-class feature means; groups draw their means independently, so
/// the same label looks different across groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub clients_per_group: usize,
    pub classes: usize,
    pub feature_dim: usize,
    /// Std-dev of the per-(group, class) mean draw.
    pub mean_shift: f64,
    /// Std-dev of the per-sample noise around the class mean.
    pub noise_std: f64,
    /// Fraction of each client's samples from its group's dominating classes.
    pub dominance: f64,
    /// Train samples per client, one entry per group.
    pub train_per_client: Vec<usize>,
    pub test_per_client: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            groups: 3,
            clients_per_group: 5,
            classes: 6,
            feature_dim: 8,
            mean_shift: 1.0,
            noise_std: 0.5,
            dominance: 0.8,
            train_per_client: vec![200, 200, 200],
            test_per_client: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs >= 2 classes".into()));
        }
        if self.groups == 0 || self.clients_per_group == 0 {
            return Err(Error::Config("need at least one group and client".into()));
        }
        if self.groups > self.classes {
            return Err(Error::Config(format!(
                "cannot split {} classes into {} dominating sets",
                self.classes, self.groups
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if !(self.dominance > 0.0 && self.dominance <= 1.0) {
            return Err(Error::Config(format!(
                "dominance must lie in (0, 1], got {}",
                self.dominance
            )));
        }
        if self.train_per_client.len() != self.groups {
            return Err(Error::Config(format!(
                "train_per_client needs one entry per group ({}), got {}",
                self.groups,
                self.train_per_client.len()
            )));
        }
        if self.train_per_client.contains(&0) || self.test_per_client == 0 {
            return Err(Error::Config("per-client sample counts must be positive".into()));
        }
        if !(self.mean_shift.is_finite() && self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("invalid mean shift / noise std".into()));
        }
        Ok(())
    }

    /// Contiguous dominating-class blocks, one per group, covering all
    /// classes (earlier groups take the remainder).
    pub fn dominating_classes(&self) -> Vec<Vec<usize>> {
        split_evenly(self.classes, self.groups)
            .into_iter()
            .scan(0usize, |start, len| {
                let block = (*start..*start + len).collect();
                *start += len;
                Some(block)
            })
            .collect()
    }
}

/// Splits `total` items into `parts` near-equal counts, remainder first.
fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts)
        .map(|i| base + usize::from(i < extra))
        .collect()
}

/// Exact per-class counts for `n` samples over `classes`, even with the
/// remainder assigned in ascending class order.
fn class_counts(n: usize, classes: &[usize]) -> Vec<(usize, usize)> {
    classes
        .iter()
        .copied()
        .zip(split_evenly(n, classes.len()))
        .collect()
}

fn rounded_split(n: usize, dominance: f64) -> (usize, usize) {
    let dom = fmath::round(dominance * n as f64) as usize;
    let dom = dom.min(n);
    (dom, n - dom)
}

/// Generates one dataset per client from the grouped Gaussian mixture.
/// Deterministic in `spec.seed`.
#[allow(clippy::needless_range_loop)]
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let mut rng = run_stream(spec.seed, StreamKind::Data);
    let r = spec.feature_dim;

    // Shared per-(group, class) means, drawn in fixed order.
    let mut means = Vec::with_capacity(spec.groups * spec.classes);
    for _ in 0..spec.groups * spec.classes {
        let mean: Vec<f64> = (0..r)
            .map(|_| spec.mean_shift * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        means.push(mean);
    }

    let blocks = spec.dominating_classes();
    let mut clients = Vec::with_capacity(spec.groups * spec.clients_per_group);
    for g in 0..spec.groups {
        let dominating = &blocks[g];
        let others: Vec<usize> = (0..spec.classes)
            .filter(|c| !dominating.contains(c))
            .collect();
        for _ in 0..spec.clients_per_group {
            let train = sample_mixture(
                spec,
                g,
                &means,
                dominating,
                &others,
                spec.train_per_client[g],
                &mut rng,
            )?;
            let test = sample_mixture(
                spec,
                g,
                &means,
                dominating,
                &others,
                spec.test_per_client,
                &mut rng,
            )?;
            clients.push(ClientDataset::new(train, test, g)?);
        }
    }
    Ok(clients)
}

fn sample_mixture(
    spec: &SyntheticSpec,
    group: usize,
    means: &[Vec<f64>],
    dominating: &[usize],
    others: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    let (dom_n, other_n) = rounded_split(n, spec.dominance);
    let mut labels = Vec::with_capacity(n);
    for (class, count) in class_counts(dom_n, dominating) {
        labels.extend(core::iter::repeat_n(class, count));
    }
    if other_n > 0 {
        if others.is_empty() {
            // dominance < 1 but the group dominates every class; fall back to
            // drawing the remainder from the dominating set itself.
            for (class, count) in class_counts(other_n, dominating) {
                labels.extend(core::iter::repeat_n(class, count));
            }
        } else {
            for (class, count) in class_counts(other_n, others) {
                labels.extend(core::iter::repeat_n(class, count));
            }
        }
    }
    labels.shuffle(rng);

    let r = spec.feature_dim;
    let mut features = Vec::with_capacity(n * r);
    for &label in &labels {
        let mean = &means[group * spec.classes + label];
        for mu in mean {
            let noise: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            features.push(mu + spec.noise_std * noise);
        }
    }
    LabeledDataset::new(features, labels, r, spec.classes)
}

/// Uniformly shards a pool across `m` clients (shard sizes differ by at most
/// one); each shard reserves `test_per_client` samples as the test split.
/// Every pool row is used exactly once.
pub fn partition_iid(
    pool: &LabeledDataset,
    m: usize,
    test_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if m == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if test_per_client == 0 {
        return Err(Error::Config("every client needs a test split".into()));
    }
    let n = pool.len();
    if n < m * (test_per_client + 1) {
        return Err(Error::Config(format!(
            "pool of {n} cannot give {m} clients {test_per_client} test + 1 train samples"
        )));
    }
    let mut rng = run_stream(seed, StreamKind::Data);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);

    let sizes = split_evenly(n, m);
    let mut clients = Vec::with_capacity(m);
    let mut cursor = 0;
    for size in sizes {
        let shard = &indices[cursor..cursor + size];
        cursor += size;
        let (test_idx, train_idx) = shard.split_at(test_per_client);
        let train = pool.select(train_idx)?;
        let test = pool.select(test_idx)?;
        clients.push(ClientDataset::new(train, test, 0)?);
    }
    Ok(clients)
}

/// Label-sorted shards such that every client holds exactly two classes.
/// Client `i` receives classes `2i mod C` and `(2i+1) mod C`; each class's
/// samples are split evenly among the clients that receive it. Requires
/// `2m >= C` so every class is placed.
pub fn partition_pathological(
    pool: &LabeledDataset,
    m: usize,
    test_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    let classes = pool.classes();
    if classes < 2 {
        return Err(Error::Config(
            "pathological sharding needs at least 2 classes".into(),
        ));
    }
    if m == 0 || 2 * m < classes {
        return Err(Error::Config(format!(
            "cannot cover {classes} classes with {m} two-class clients"
        )));
    }
    if test_per_client == 0 {
        return Err(Error::Config("every client needs a test split".into()));
    }
    let mut rng = run_stream(seed, StreamKind::Data);

    // Per-class sample index lists, shuffled.
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..pool.len() {
        per_class[pool.label(i)].push(i);
    }
    for list in per_class.iter_mut() {
        list.shuffle(&mut rng);
    }

    // Slot k (k = 0..2m) takes class k mod C; the j-th slot of a class gets
    // the j-th even chunk of that class's samples.
    let slots_per_class: Vec<usize> = (0..classes)
        .map(|c| (0..2 * m).filter(|k| k % classes == c).count())
        .collect();
    let mut chunk_offsets: Vec<usize> = vec![0; classes];
    let mut chunks: Vec<Vec<usize>> = Vec::with_capacity(2 * m);
    for k in 0..2 * m {
        let class = k % classes;
        let chunk_index = k / classes;
        let sizes = split_evenly(per_class[class].len(), slots_per_class[class]);
        let start = chunk_offsets[class];
        let len = sizes[chunk_index];
        chunk_offsets[class] = start + len;
        chunks.push(per_class[class][start..start + len].to_vec());
    }

    let mut clients = Vec::with_capacity(m);
    for i in 0..m {
        let mut shard = chunks[2 * i].clone();
        shard.extend_from_slice(&chunks[2 * i + 1]);
        shard.shuffle(&mut rng);
        if shard.len() <= test_per_client {
            return Err(Error::Config(format!(
                "client {i} has only {} samples, cannot reserve {test_per_client} for test",
                shard.len()
            )));
        }
        let (test_idx, train_idx) = shard.split_at(test_per_client);
        let train = pool.select(train_idx)?;
        let distinct = train.label_histogram().iter().filter(|&&c| c > 0).count();
        if distinct != 2 {
            return Err(Error::Config(format!(
                "client {i} ended with {distinct} classes; pool too skewed for two-class sharding"
            )));
        }
        let test = pool.select(test_idx)?;
        clients.push(ClientDataset::new(train, test, i)?);
    }
    Ok(clients)
}

/// One group in a practical non-IID layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub clients: usize,
    pub train_per_client: usize,
    pub dominating_classes: Vec<usize>,
}

/// A fixed practical non-IID layout: group sizes, per-client sample
/// counts, and dominating classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPreset {
    pub name: String,
    pub classes: usize,
    pub test_per_client: usize,
    pub groups: Vec<GroupSpec>,
}

impl PartitionPreset {
    /// 62 clients in three groups (digits / upper case / lower case) with
    /// 1000/700/400 train samples per client.
    pub fn emnist62() -> Self {
        Self {
            name: "emnist62".into(),
            classes: 62,
            test_per_client: 100,
            groups: vec![
                GroupSpec {
                    clients: 10,
                    train_per_client: 1000,
                    dominating_classes: (0..10).collect(),
                },
                GroupSpec {
                    clients: 26,
                    train_per_client: 700,
                    dominating_classes: (10..36).collect(),
                },
                GroupSpec {
                    clients: 26,
                    train_per_client: 400,
                    dominating_classes: (36..62).collect(),
                },
            ],
        }
    }

    /// 100 clients in 5 groups of 20, two dominating digit classes per
    /// group, 500/400/300/200/100 train samples per client.
    pub fn mnist100() -> Self {
        Self {
            name: "mnist100".into(),
            classes: 10,
            test_per_client: 100,
            groups: (0..5)
                .map(|g| GroupSpec {
                    clients: 20,
                    train_per_client: 500 - 100 * g,
                    dominating_classes: vec![2 * g, 2 * g + 1],
                })
                .collect(),
        }
    }

    /// Same layout as `mnist100` with 600/500/400/300/200 train samples.
    pub fn fmnist100() -> Self {
        let mut preset = Self::mnist100();
        preset.name = "fmnist100".into();
        for (g, group) in preset.groups.iter_mut().enumerate() {
            group.train_per_client = 600 - 100 * g;
        }
        preset
    }

    /// 100 clients in 20 groups of 5; each group's dominating classes are
    /// one superclass (given as `superclass_of[class] -> group`), and train
    /// counts drop 500/400/300/200/100 per 20-client band.
    pub fn cifar100_100(superclass_of: &[usize]) -> Result<Self> {
        if superclass_of.len() != 100 {
            return Err(Error::Config(format!(
                "superclass table needs 100 entries, got {}",
                superclass_of.len()
            )));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); 20];
        for (class, &sc) in superclass_of.iter().enumerate() {
            if sc >= 20 {
                return Err(Error::Config(format!(
                    "superclass {sc} of class {class} out of range (0..20)"
                )));
            }
            members[sc].push(class);
        }
        if let Some(empty) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::Config(format!("superclass {empty} has no classes")));
        }
        Ok(Self {
            name: "cifar100-100".into(),
            classes: 100,
            test_per_client: 100,
            groups: (0..20)
                .map(|g| GroupSpec {
                    clients: 5,
                    train_per_client: 500 - 100 * (g / 4),
                    dominating_classes: members[g].clone(),
                })
                .collect(),
        })
    }

    pub fn total_clients(&self) -> usize {
        self.groups.iter().map(|g| g.clients).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("preset has no groups".into()));
        }
        for (g, group) in self.groups.iter().enumerate() {
            if group.clients == 0 || group.train_per_client == 0 {
                return Err(Error::Config(format!("group {g} is empty")));
            }
            if group.dominating_classes.is_empty() {
                return Err(Error::Config(format!("group {g} dominates no classes")));
            }
            if group.dominating_classes.len() >= self.classes {
                return Err(Error::Config(format!(
                    "group {g} dominates every class; no 20% remainder exists"
                )));
            }
            if group
                .dominating_classes
                .iter()
                .any(|&c| c >= self.classes)
            {
                return Err(Error::Config(format!("group {g} lists an unknown class")));
            }
        }
        Ok(())
    }
}

const PRACTICAL_DOMINANCE: f64 = 0.8;

/// Practical non-IID partition: per client, 80% of samples from its group's
/// dominating classes and 20% from the rest, drawn without replacement from
/// the pool; the test split follows the same 80/20 distribution.
pub fn partition_practical(
    pool: &LabeledDataset,
    preset: &PartitionPreset,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    preset.validate()?;
    if pool.classes() != preset.classes {
        return Err(Error::Config(format!(
            "preset {} expects {} classes, pool has {}",
            preset.name,
            preset.classes,
            pool.classes()
        )));
    }
    let mut rng = run_stream(seed, StreamKind::Data);

    // Shuffled per-class pools, consumed front to back.
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); preset.classes];
    for i in 0..pool.len() {
        per_class[pool.label(i)].push(i);
    }
    for list in per_class.iter_mut() {
        list.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; preset.classes];
    let mut take = |class: usize, count: usize, out: &mut Vec<usize>| -> Result<()> {
        let available = per_class[class].len() - cursors[class];
        if available < count {
            return Err(Error::Config(format!(
                "pool exhausted: class {class} needs {count} more samples, has {available}"
            )));
        }
        out.extend_from_slice(&per_class[class][cursors[class]..cursors[class] + count]);
        cursors[class] += count;
        Ok(())
    };

    let mut clients = Vec::with_capacity(preset.total_clients());
    for (group_id, group) in preset.groups.iter().enumerate() {
        let others: Vec<usize> = (0..preset.classes)
            .filter(|c| !group.dominating_classes.contains(c))
            .collect();
        for _ in 0..group.clients {
            let mut train_idx = Vec::with_capacity(group.train_per_client);
            let mut test_idx = Vec::with_capacity(preset.test_per_client);
            for (idx, n) in [
                (&mut train_idx, group.train_per_client),
                (&mut test_idx, preset.test_per_client),
            ] {
                let (dom_n, other_n) = rounded_split(n, PRACTICAL_DOMINANCE);
                for (class, count) in class_counts(dom_n, &group.dominating_classes) {
                    take(class, count, idx)?;
                }
                for (class, count) in class_counts(other_n, &others) {
                    take(class, count, idx)?;
                }
            }
            train_idx.shuffle(&mut rng);
            let train = pool.select(&train_idx)?;
            let test = pool.select(&test_idx)?;
            clients.push(ClientDataset::new(train, test, group_id)?);
        }
    }
    Ok(clients)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One half of an IDX-format dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxFile {
    /// `n` images of `rows x cols` u8 pixels, scaled into `[0, 1]`.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f64>,
    },
    /// `n` u8 labels.
    Labels(Vec<usize>),
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "truncated header: expected {end} bytes, got {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX byte stream (big-endian headers, u8 payload).
pub fn read_idx(bytes: &[u8]) -> Result<IdxFile> {
    let magic = read_be_u32(bytes, 0)?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let count = read_be_u32(bytes, 4)? as usize;
            let rows = read_be_u32(bytes, 8)? as usize;
            let cols = read_be_u32(bytes, 12)? as usize;
            let expected = 16 + count * rows * cols;
            if bytes.len() != expected {
                return Err(Error::Format(format!(
                    "image payload: expected {expected} bytes, got {}",
                    bytes.len()
                )));
            }
            let pixels = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(IdxFile::Images {
                count,
                rows,
                cols,
                pixels,
            })
        }
        IDX_LABELS_MAGIC => {
            let count = read_be_u32(bytes, 4)? as usize;
            let expected = 8 + count;
            if bytes.len() != expected {
                return Err(Error::Format(format!(
                    "label payload: expected {expected} bytes, got {}",
                    bytes.len()
                )));
            }
            Ok(IdxFile::Labels(
                bytes[8..].iter().map(|&b| b as usize).collect(),
            ))
        }
        other => Err(Error::Format(format!(
            "bad magic 0x{other:08x}; expected images (0x{IDX_IMAGES_MAGIC:08x}) or labels (0x{IDX_LABELS_MAGIC:08x})"
        ))),
    }
}

/// Pairs parsed IDX images and labels into a dataset with `classes` classes.
pub fn assemble_idx(images: IdxFile, labels: IdxFile, classes: usize) -> Result<LabeledDataset> {
    let (count, rows, cols, pixels) = match images {
        IdxFile::Images {
            count,
            rows,
            cols,
            pixels,
        } => (count, rows, cols, pixels),
        IdxFile::Labels(_) => {
            return Err(Error::Format("expected an images file first".into()))
        }
    };
    let labels = match labels {
        IdxFile::Labels(l) => l,
        IdxFile::Images { .. } => {
            return Err(Error::Format("expected a labels file second".into()))
        }
    };
    if labels.len() != count {
        return Err(Error::Format(format!(
            "pairing error: {count} images vs {} labels",
            labels.len()
        )));
    }
    LabeledDataset::new(pixels, labels, rows * cols, classes)
}

/// Uniform integer in `[lo, hi]` (inclusive); used for epoch jitter.
pub(crate) fn uniform_inclusive(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}
