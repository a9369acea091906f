//! Dataset generation, augmentation, rotation transforms, and client
//! partitioning.
//!
//! Client heterogeneity is controlled by a symmetric Dirichlet draw per
//! client over class proportions; small concentration values produce shards
//! dominated by one class, large values produce near-uniform shards.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::DenseMatrix;
use crate::rng::{Purpose, StreamRng};
use crate::ROTATION_CLASSES;

/// Physical layout of one sample vector; selects the rotation transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLayout {
    /// Plain feature vector; rotation is a cyclic block shift.
    Flat,
    /// 32x32x3 image stored as three row-major color planes; rotation is a
    /// true 90-degree spatial rotation.
    Image32x32x3,
}

/// A labeled dataset held as one feature matrix (rows are samples).
#[derive(Debug, Clone)]
pub struct Dataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    n_classes: usize,
    pub layout: InputLayout,
}

impl Dataset {
    /// Validates label range and the minimum usable size of two samples.
    pub fn new(features: DenseMatrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() < 2 {
            return Err(Error::Config(format!(
                "dataset needs at least 2 samples, got {}",
                features.rows()
            )));
        }
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if n_classes == 0 {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Format(format!(
                "label {bad} outside 0..{n_classes}"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
            layout: InputLayout::Flat,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Copies the given sample rows into a new batch matrix.
    pub fn gather(&self, ids: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(ids.len(), self.dim());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.features.row(id));
        }
        out
    }
}

/// One client's slice of the dataset, stored as sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub sample_ids: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Stochastic augmentation: additive Gaussian jitter followed by a uniform
/// scale of the whole vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub jitter_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_sigma: 0.1,
            scale_lo: 0.9,
            scale_hi: 1.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.jitter_sigma.is_finite() || self.jitter_sigma < 0.0 {
            return Err(Error::Config(format!(
                "jitter sigma {} must be >= 0",
                self.jitter_sigma
            )));
        }
        if !self.scale_lo.is_finite()
            || !self.scale_hi.is_finite()
            || self.scale_lo <= 0.0
            || self.scale_lo > self.scale_hi
        {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must satisfy 0 < lo <= hi",
                self.scale_lo, self.scale_hi
            )));
        }
        Ok(())
    }
}

/// Draws `s * (x + jitter)`: per-coordinate jitter first, then one scale.
pub fn augment(x: &[f64], cfg: &AugmentConfig, rng: &mut StreamRng) -> Vec<f64> {
    let mut out: Vec<f64> = x
        .iter()
        .map(|&v| v + cfg.jitter_sigma * rng.normal())
        .collect();
    let s = rng.next_in(cfg.scale_lo, cfg.scale_hi);
    for v in &mut out {
        *v *= s;
    }
    out
}

/// Augments every row of a batch, top to bottom, from one stream.
pub fn augment_batch(batch: &DenseMatrix, cfg: &AugmentConfig, rng: &mut StreamRng) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(batch.rows(), batch.cols());
    for r in 0..batch.rows() {
        out.row_mut(r).copy_from_slice(&augment(batch.row(r), cfg, rng));
    }
    out
}

/// Cyclic block shift by `idx * len / 4` positions; the flat-vector analogue
/// of a quarter rotation. Shifts compose additively mod `len`.
pub fn rotate(x: &[f64], idx: usize) -> Result<Vec<f64>> {
    if !x.len().is_multiple_of(ROTATION_CLASSES) || x.is_empty() {
        return Err(Error::Config(format!(
            "vector length {} is not a positive multiple of {ROTATION_CLASSES}",
            x.len()
        )));
    }
    if idx >= ROTATION_CLASSES {
        return Err(Error::Range(format!(
            "rotation index {idx} outside 0..{ROTATION_CLASSES}"
        )));
    }
    let len = x.len();
    let shift = idx * (len / ROTATION_CLASSES);
    let mut out = vec![0.0; len];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = x[(i + len - shift) % len];
    }
    Ok(out)
}

const IMAGE_SIDE: usize = 32;
const IMAGE_PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;
const IMAGE_LEN: usize = 3 * IMAGE_PLANE;

/// One 90-degree counterclockwise rotation of a row-major square plane.
fn rot90_ccw(plane: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; IMAGE_PLANE];
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            out[r * IMAGE_SIDE + c] = plane[c * IMAGE_SIDE + (IMAGE_SIDE - 1 - r)];
        }
    }
    out
}

/// True spatial rotation by `idx * 90` degrees of a 32x32x3 planar image.
pub fn rotate_image32(x: &[f64], idx: usize) -> Result<Vec<f64>> {
    if x.len() != IMAGE_LEN {
        return Err(Error::Shape(format!(
            "image vector length {} vs expected {IMAGE_LEN}",
            x.len()
        )));
    }
    if idx >= ROTATION_CLASSES {
        return Err(Error::Range(format!(
            "rotation index {idx} outside 0..{ROTATION_CLASSES}"
        )));
    }
    let mut out = x.to_vec();
    for _ in 0..idx {
        for plane in 0..3 {
            let start = plane * IMAGE_PLANE;
            let rotated = rot90_ccw(&out[start..start + IMAGE_PLANE]);
            out[start..start + IMAGE_PLANE].copy_from_slice(&rotated);
        }
    }
    Ok(out)
}

/// Rotation dispatch on the sample layout.
pub fn rotate_sample(x: &[f64], idx: usize, layout: InputLayout) -> Result<Vec<f64>> {
    match layout {
        InputLayout::Flat => rotate(x, idx),
        InputLayout::Image32x32x3 => rotate_image32(x, idx),
    }
}

/// Synthetic Gaussian mixture: class means drawn uniformly on the sphere of
/// radius `class_sep`, samples jittered by `within_std`. Samples are grouped
/// class-major, `per_class` each. `dim` must be a multiple of 4 so rotation
/// prediction stays well defined.
pub fn gen_mixture(
    classes: usize,
    dim: usize,
    per_class: usize,
    class_sep: f64,
    within_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 {
        return Err(Error::Config(
            "mixture needs at least one class and one sample per class".into(),
        ));
    }
    if dim == 0 || !dim.is_multiple_of(ROTATION_CLASSES) {
        return Err(Error::Config(format!(
            "feature dim {dim} must be a positive multiple of {ROTATION_CLASSES}"
        )));
    }
    if !class_sep.is_finite() || class_sep < 0.0 || !within_std.is_finite() || within_std < 0.0 {
        return Err(Error::Config(
            "class separation and within-class deviation must be >= 0".into(),
        ));
    }
    let mut rng = StreamRng::for_purpose(seed, Purpose::Data);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                means.push(v.into_iter().map(|x| class_sep * x / norm).collect::<Vec<_>>());
                break;
            }
        }
    }
    let n = classes * per_class;
    let mut features = DenseMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for (m, mean) in means.iter().enumerate() {
        for j in 0..per_class {
            let row = features.row_mut(m * per_class + j);
            for (slot, &mu) in row.iter_mut().zip(mean) {
                *slot = mu + within_std * rng.normal();
            }
            labels.push(m);
        }
    }
    Dataset::new(features, labels, classes)
}

/// Maximum redraw attempts before the partition gives up.
const MAX_PARTITION_ATTEMPTS: u64 = 100;

/// Splits sample indices across `n_clients` shards with per-client class
/// proportions drawn from a symmetric Dirichlet with concentration `alpha`.
///
/// Client totals are as equal as integers allow. Within a client, class
/// quotas use largest-remainder rounding of the drawn proportions; quotas a
/// class pool cannot cover are left over and handed out one at a time to the
/// currently smallest shard (ties to the lowest client id). If any shard ends
/// up below `min_shard_size`, the whole draw is retried with a derived seed,
/// up to 100 times.
pub fn dirichlet_partition(
    dataset: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
    min_shard_size: usize,
) -> Result<Vec<ClientShard>> {
    if n_clients == 0 {
        return Err(Error::Config("partition needs at least one client".into()));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Config(format!(
            "concentration {alpha} must be positive"
        )));
    }
    let n = dataset.len();
    if n_clients * min_shard_size > n {
        return Err(Error::Partition(format!(
            "{n_clients} shards of at least {min_shard_size} need more than {n} samples"
        )));
    }
    let m = dataset.n_classes();
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = StreamRng::new(seed, Purpose::Partition, attempt, 0);
        let shards = partition_attempt(dataset, n_clients, alpha, m, &mut rng);
        if shards.iter().all(|s| s.len() >= min_shard_size) {
            return Ok(shards);
        }
    }
    Err(Error::Partition(format!(
        "no draw satisfied min shard size {min_shard_size} in {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

fn partition_attempt(
    dataset: &Dataset,
    n_clients: usize,
    alpha: f64,
    m: usize,
    rng: &mut StreamRng,
) -> Vec<ClientShard> {
    let n = dataset.len();
    // Per-client class proportions; log-space keeps tiny alpha well defined.
    let proportions: Vec<Vec<f64>> = (0..n_clients)
        .map(|_| {
            let logs: Vec<f64> = (0..m).map(|_| rng.log_gamma_sample(alpha)).collect();
            let max = logs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut p: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
            let sum: f64 = p.iter().sum();
            for v in &mut p {
                *v /= sum;
            }
            p
        })
        .collect();

    // Class pools in seeded order; quota fulfillment pops from the front.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &label) in dataset.labels().iter().enumerate() {
        pools[label].push(i);
    }
    for pool in &mut pools {
        rng.shuffle(pool);
    }

    // Equal client totals up to the remainder, assigned to the lowest ids.
    let base = n / n_clients;
    let rem = n % n_clients;
    let totals: Vec<usize> = (0..n_clients)
        .map(|k| base + usize::from(k < rem))
        .collect();

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let mut cursors = vec![0usize; m];
    for k in 0..n_clients {
        let quotas = largest_remainder(&proportions[k], totals[k]);
        for (class, &want) in quotas.iter().enumerate() {
            let available = pools[class].len() - cursors[class];
            let take = want.min(available);
            let start = cursors[class];
            shards[k].extend_from_slice(&pools[class][start..start + take]);
            cursors[class] += take;
        }
    }

    // Unfulfilled quota mass shows up as leftover samples; hand them to the
    // smallest shard, one at a time, lowest client id on ties.
    for class in 0..m {
        while cursors[class] < pools[class].len() {
            let smallest = (0..n_clients)
                .min_by_key(|&k| (shards[k].len(), k))
                .expect("at least one client");
            shards[smallest].push(pools[class][cursors[class]]);
            cursors[class] += 1;
        }
    }

    shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut sample_ids)| {
            sample_ids.sort_unstable();
            ClientShard {
                client_id,
                sample_ids,
            }
        })
        .collect()
}

/// Integer quotas summing to `total`, proportional to `weights` with
/// largest-remainder rounding (ties to the lower index).
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let mut quotas: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let exact = w * total as f64;
        let floor = exact.floor() as usize;
        quotas.push(floor);
        assigned += floor;
        remainders.push((exact - floor as f64, i));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(total.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    quotas
}

/// Counting rule for [`avg_classes_per_client`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountRule {
    /// A class counts if the shard holds at least one of its samples.
    AtLeastOne,
    /// A class counts if it makes up at least 1% of the shard.
    AtLeastOnePercent,
}

/// Mean over clients of the number of classes present in each shard.
pub fn avg_classes_per_client(
    shards: &[ClientShard],
    labels: &[usize],
    n_classes: usize,
    rule: CountRule,
) -> Result<f64> {
    if shards.is_empty() {
        return Err(Error::Config("no shards to average over".into()));
    }
    let mut total = 0.0;
    for shard in shards {
        if shard.is_empty() {
            return Err(Error::Partition(format!(
                "client {} holds an empty shard",
                shard.client_id
            )));
        }
        let mut counts = vec![0usize; n_classes];
        for &id in &shard.sample_ids {
            let label = *labels.get(id).ok_or_else(|| {
                Error::Range(format!("sample id {id} outside the label table"))
            })?;
            counts[label] += 1;
        }
        let present = counts
            .iter()
            .filter(|&&c| match rule {
                CountRule::AtLeastOne => c >= 1,
                CountRule::AtLeastOnePercent => c >= 1 && 100 * c >= shard.len(),
            })
            .count();
        total += present as f64;
    }
    Ok(total / shards.len() as f64)
}

/// Classes in the fixed binary image format.
pub const CIFAR_CLASSES: usize = 10;
const CIFAR_RECORD_BYTES: usize = 1 + IMAGE_LEN;

/// Parses records of one label byte followed by 3072 pixel bytes (three
/// row-major 32x32 color planes); pixels are scaled to `[0, 1]` by `/255`.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(DenseMatrix, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "file length {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut features = DenseMatrix::zeros(n, IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!(
                "record {i}: label {label} outside 0..{CIFAR_CLASSES}"
            )));
        }
        labels.push(label);
        let row = features.row_mut(i);
        for (slot, &b) in row.iter_mut().zip(&record[1..]) {
            *slot = b as f64 / 255.0;
        }
    }
    Ok((features, labels))
}

/// Loads a binary image file as a dataset (at least two records required).
pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let (features, labels) = parse_cifar_records(&bytes)?;
    let mut dataset = Dataset::new(features, labels, CIFAR_CLASSES)?;
    dataset.layout = InputLayout::Image32x32x3;
    Ok(dataset)
}

/// Writes `label,f0,...,f{d-1}` rows with round-trip float formatting.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "label")?;
    for c in 0..dataset.dim() {
        write!(out, ",f{c}")?;
    }
    writeln!(out)?;
    for i in 0..dataset.len() {
        write!(out, "{}", dataset.labels()[i])?;
        for &v in dataset.sample(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the CSV format written by [`write_csv`]. The class count is inferred
/// as `max label + 1`.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Format(
            "CSV header must start with 'label' followed by feature columns".into(),
        ));
    }
    let dim = cols.len() - 1;
    for (c, name) in cols[1..].iter().enumerate() {
        if *name != format!("f{c}") {
            return Err(Error::Format(format!(
                "unexpected column name '{name}' at position {}",
                c + 1
            )));
        }
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad label", lineno + 2)))?;
        labels.push(label);
        let mut count = 0;
        for field in fields {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad float", lineno + 2)))?;
            rows.push(v);
            count += 1;
        }
        if count != dim {
            return Err(Error::Format(format!(
                "row {}: {count} features, expected {dim}",
                lineno + 2
            )));
        }
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let features = DenseMatrix::new(labels.len(), dim, rows)?;
    Dataset::new(features, labels, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_shapes_and_labels() {
        let ds = gen_mixture(3, 8, 4, 2.0, 0.1, 7).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.dim(), 8);
        assert_eq!(ds.labels(), &[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert!(gen_mixture(3, 7, 4, 2.0, 0.1, 7).is_err(), "dim not mult of 4");
    }

    #[test]
    fn zero_spread_collapses_to_class_means() {
        let ds = gen_mixture(2, 4, 3, 1.5, 0.0, 3).unwrap();
        for class in 0..2 {
            let first = ds.sample(class * 3).to_vec();
            for j in 1..3 {
                assert_eq!(ds.sample(class * 3 + j), &first[..]);
            }
        }
    }

    #[test]
    fn separated_mixture_is_nearest_neighbor_pure() {
        let ds = gen_mixture(4, 8, 16, 10.0, 0.1, 11).unwrap();
        for i in 0..ds.len() {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..ds.len() {
                if i == j {
                    continue;
                }
                let d: f64 = ds
                    .sample(i)
                    .iter()
                    .zip(ds.sample(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            assert_eq!(ds.labels()[i], ds.labels()[best.1]);
        }
    }

    #[test]
    fn augment_identity_and_pure_scale() {
        let cfg_id = AugmentConfig {
            jitter_sigma: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        };
        let mut rng = StreamRng::for_purpose(1, Purpose::ClientRound);
        let x = vec![1.0, -2.0, 3.0];
        assert_eq!(augment(&x, &cfg_id, &mut rng), x);
        let cfg_double = AugmentConfig {
            jitter_sigma: 0.0,
            scale_lo: 2.0,
            scale_hi: 2.0,
        };
        assert_eq!(augment(&x, &cfg_double, &mut rng), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn augment_jitter_mean_is_centered() {
        let cfg = AugmentConfig {
            jitter_sigma: 0.5,
            scale_lo: 1.0,
            scale_hi: 1.0,
        };
        let mut rng = StreamRng::for_purpose(2, Purpose::ClientRound);
        let x = vec![0.0; 4];
        let reps = 10_000;
        let mut mean = vec![0.0; 4];
        for _ in 0..reps {
            for (m, v) in mean.iter_mut().zip(augment(&x, &cfg, &mut rng)) {
                *m += v / reps as f64;
            }
        }
        for m in mean {
            assert!(m.abs() < 3.0 * cfg.jitter_sigma / (reps as f64).sqrt() * 3.0);
        }
    }

    #[test]
    fn block_shift_examples_and_group_law() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(rotate(&x, 0).unwrap(), x);
        assert_eq!(rotate(&x, 1).unwrap(), vec![4.0, 1.0, 2.0, 3.0]);
        let back = rotate(&rotate(&x, 1).unwrap(), 3).unwrap();
        assert_eq!(back, x);
        assert!(rotate(&x, 4).is_err());
        assert!(rotate(&[1.0; 6], 1).is_err());
    }

    #[test]
    fn image_rotation_group_law_and_identity() {
        let mut rng = StreamRng::for_purpose(5, Purpose::Data);
        let x: Vec<f64> = (0..IMAGE_LEN).map(|_| rng.next_f64()).collect();
        assert_eq!(rotate_image32(&x, 0).unwrap(), x);
        for a in 0..4 {
            for b in 0..4 {
                let two = rotate_image32(&rotate_image32(&x, a).unwrap(), b).unwrap();
                let one = rotate_image32(&x, (a + b) % 4).unwrap();
                assert_eq!(two, one, "rotations {a} then {b}");
            }
        }
        // A quarter turn moves the R-plane top-right pixel to top-left.
        let mut img = vec![0.0; IMAGE_LEN];
        img[IMAGE_SIDE - 1] = 1.0;
        let turned = rotate_image32(&img, 1).unwrap();
        assert_eq!(turned[0], 1.0);
    }

    #[test]
    fn single_client_takes_everything() {
        let ds = gen_mixture(3, 4, 10, 2.0, 0.5, 1).unwrap();
        let shards = dirichlet_partition(&ds, 1, 1e-3, 9, 1).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].sample_ids, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let ds = gen_mixture(5, 4, 40, 2.0, 0.5, 2).unwrap();
        for &alpha in &[1e5, 0.1, 1e-3] {
            let shards = dirichlet_partition(&ds, 7, alpha, 3, 1).unwrap();
            let mut seen = vec![false; ds.len()];
            for shard in &shards {
                for &id in &shard.sample_ids {
                    assert!(!seen[id], "sample {id} assigned twice at alpha {alpha}");
                    seen[id] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "missing samples at alpha {alpha}");
        }
    }

    #[test]
    fn huge_alpha_gives_near_uniform_histograms() {
        let ds = gen_mixture(10, 4, 100, 2.0, 0.5, 3).unwrap();
        let mut deviations = Vec::new();
        for seed in 0..5u64 {
            let shards = dirichlet_partition(&ds, 10, 1e5, seed, 1).unwrap();
            let mut worst: f64 = 0.0;
            for shard in &shards {
                let mut counts = vec![0usize; 10];
                for &id in &shard.sample_ids {
                    counts[ds.labels()[id]] += 1;
                }
                let uniform = shard.len() as f64 / 10.0;
                for &c in &counts {
                    worst = worst.max((c as f64 - uniform).abs() / uniform);
                }
            }
            deviations.push(worst);
        }
        deviations.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            deviations[2] <= 0.2,
            "median worst deviation {} above 20%",
            deviations[2]
        );
    }

    #[test]
    fn tiny_alpha_concentrates_shards() {
        let ds = gen_mixture(10, 4, 50, 2.0, 0.5, 4).unwrap();
        let mut medians = Vec::new();
        for seed in 0..5u64 {
            let shards = dirichlet_partition(&ds, 100, 1e-3, seed, 1).unwrap();
            let mut per_client: Vec<usize> = shards
                .iter()
                .map(|s| {
                    let mut counts = [0usize; 10];
                    for &id in &s.sample_ids {
                        counts[ds.labels()[id]] += 1;
                    }
                    counts.iter().filter(|&&c| c > 0).count()
                })
                .collect();
            per_client.sort_unstable();
            medians.push(per_client[per_client.len() / 2]);
        }
        medians.sort_unstable();
        assert!(medians[2] <= 2, "median classes per client {:?}", medians);
    }

    #[test]
    fn min_shard_size_is_enforced_or_fails() {
        let ds = gen_mixture(2, 4, 10, 2.0, 0.5, 5).unwrap();
        let err = dirichlet_partition(&ds, 5, 0.1, 1, 10).unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
        let ok = dirichlet_partition(&ds, 5, 0.1, 1, 4).unwrap();
        assert!(ok.iter().all(|s| s.len() >= 4));
    }

    #[test]
    fn class_counting_rules() {
        let labels = vec![0, 0, 0, 1, 2, 2];
        let shards = vec![ClientShard {
            client_id: 0,
            sample_ids: (0..6).collect(),
        }];
        let one =
            avg_classes_per_client(&shards, &labels, 3, CountRule::AtLeastOne).unwrap();
        assert_eq!(one, 3.0);
        let single_each: Vec<ClientShard> = (0..3)
            .map(|k| ClientShard {
                client_id: k,
                sample_ids: vec![k],
            })
            .collect();
        let avg =
            avg_classes_per_client(&single_each, &labels, 3, CountRule::AtLeastOne).unwrap();
        assert_eq!(avg, 1.0);
        let empty = vec![ClientShard {
            client_id: 0,
            sample_ids: vec![],
        }];
        assert!(avg_classes_per_client(&empty, &labels, 3, CountRule::AtLeastOne).is_err());
    }

    #[test]
    fn percent_rule_is_no_looser_than_presence_rule() {
        let ds = gen_mixture(6, 4, 60, 2.0, 0.5, 8).unwrap();
        let shards = dirichlet_partition(&ds, 3, 0.5, 2, 1).unwrap();
        let one =
            avg_classes_per_client(&shards, ds.labels(), 6, CountRule::AtLeastOne).unwrap();
        let pct =
            avg_classes_per_client(&shards, ds.labels(), 6, CountRule::AtLeastOnePercent).unwrap();
        assert!(pct <= one);
    }

    #[test]
    fn cifar_single_record_and_bad_lengths() {
        let mut record = vec![7u8];
        record.extend(std::iter::repeat_n(255u8, IMAGE_LEN));
        let (features, labels) = parse_cifar_records(&record).unwrap();
        assert_eq!(features.rows(), 1);
        assert_eq!(labels, vec![7]);
        assert!(features.row(0).iter().all(|&v| v == 1.0));

        assert!(parse_cifar_records(&record[..100]).is_err());
        let mut bad = record.clone();
        bad[0] = 10;
        assert!(parse_cifar_records(&bad).is_err());
    }

    #[test]
    fn cifar_loader_requires_two_records() {
        let dir = std::env::temp_dir().join("orchestra-core-cifar-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("single.bin");
        let mut record = vec![3u8];
        record.extend(std::iter::repeat_n(9u8, IMAGE_LEN));
        std::fs::write(&path, &record).unwrap();
        assert!(load_cifar_binary(&path).is_err());

        let path2 = dir.join("double.bin");
        let mut two = record.clone();
        two.extend_from_slice(&record);
        std::fs::write(&path2, &two).unwrap();
        let ds = load_cifar_binary(&path2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.layout, InputLayout::Image32x32x3);
        assert!((ds.sample(0)[0] - 9.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = gen_mixture(3, 4, 3, 1.7, 0.9, 13).unwrap();
        let dir = std::env::temp_dir().join("orchestra-core-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.csv");
        write_csv(&ds, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.features(), ds.features());
    }
}
