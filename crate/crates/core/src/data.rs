//! MNIST IDX and CIFAR binary readers, stratified subsampling and
//! per-channel normalization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::perturb::{check_unit_range, image_seed, Perturbation};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Environment variable naming the directory that holds the datasets.
pub const DATA_ROOT_ENV: &str = "PUSHPULL_DATA_ROOT";

/// Per-channel affine map `(x - mean) / std` recorded on a normalized dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Normalization {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar10() -> Self {
        Normalization {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    pub fn cifar100() -> Self {
        Normalization {
            mean: vec![0.5071, 0.4865, 0.4409],
            std: vec![0.2673, 0.2564, 0.2762],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, C, H, W)`, in `[0, 1]` unless `normalization` is set.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub name: String,
    pub class_count: usize,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, name: impl Into<String>, class_count: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4("Dataset")?;
        if labels.len() != n {
            return Err(Error::shape(
                "Dataset",
                format!("{n} images but {} labels", labels.len()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Label {
                index,
                label,
                classes: class_count,
            });
        }
        Ok(Dataset {
            images,
            labels,
            name: name.into(),
            class_count,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
            class_count: self.class_count,
            normalization: self.normalization.clone(),
        })
    }

    /// Hex SHA-256 over shape, labels and pixel bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Corrupts every image; image `i` uses the seed derived from
    /// `(master_seed, perturbation, i)`. Fails on a normalized dataset.
    pub fn perturb(&self, perturbation: &Perturbation, master_seed: u64) -> Result<Dataset> {
        if self.normalization.is_some() {
            return Err(Error::domain(
                "perturb",
                format!("{} is already normalized; corrupt images before normalizing", self.name),
            ));
        }
        perturbation.validate()?;
        check_unit_range(&self.images, "perturb")?;
        let [c, h, w] = self.item_shape();
        let item = c * h * w;
        let mut data = Vec::with_capacity(self.images.len());
        for (i, pixels) in self.images.data().chunks(item).enumerate() {
            let img = Tensor::new(vec![item], pixels.to_vec())?;
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed(master_seed, perturbation, i));
            data.extend_from_slice(perturbation.apply(&img, &mut rng)?.data());
        }
        Ok(Dataset {
            images: Tensor::new(self.images.shape().to_vec(), data)?,
            ..self.clone()
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, bytes.len(), "file ends inside the header"))
}

fn idx_payload<'a>(bytes: &'a [u8], path: &Path, magic: u32, dims: &[usize]) -> Result<&'a [u8]> {
    let header = 4 + 4 * dims.len();
    let expected: usize = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(path, expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    debug_assert_eq!(be_u32(bytes, 0, path).ok(), Some(magic));
    Ok(&bytes[header..])
}

/// Reads an MNIST image/label IDX pair. Pixels are scaled by 1/255.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read_file(ip)?;
    let lb = read_file(lp)?;

    let magic = be_u32(&ib, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(ip, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&ib, 4, ip)? as usize;
    let rows = be_u32(&ib, 8, ip)? as usize;
    let cols = be_u32(&ib, 12, ip)? as usize;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(format_err(ip, 8, format!("images are {rows}x{cols}, expected 28x28")));
    }
    let pixels = idx_payload(&ib, ip, IDX_IMAGES_MAGIC, &[n, rows, cols])?;

    let magic = be_u32(&lb, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(lp, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let nl = be_u32(&lb, 4, lp)? as usize;
    if nl != n {
        return Err(format_err(lp, 4, format!("{nl} labels but {} holds {n} images", ip.display())));
    }
    let labels = idx_payload(&lb, lp, IDX_LABELS_MAGIC, &[n])?;
    if let Some(i) = labels.iter().position(|&l| l >= 10) {
        return Err(format_err(lp, 8 + i, format!("label {} is not a digit", labels[i])));
    }
    if n == 0 {
        return Err(format_err(ip, 4, "file holds no images"));
    }

    let images = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    )?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), "mnist", 10)
}

/// Reads CIFAR binary batches. `class_count` 10 selects 3073-byte records
/// (label, pixels); 100 selects 3074-byte records (coarse, fine, pixels) and
/// keeps the fine label.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], class_count: usize) -> Result<Dataset> {
    let label_bytes = match class_count {
        10 => 1,
        100 => 2,
        other => {
            return Err(Error::Config(format!(
                "CIFAR class count must be 10 or 100, got {other}"
            )))
        }
    };
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR batch files given".into()));
    }
    let record = label_bytes + CIFAR_PIXELS;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(format_err(
                path,
                bytes.len() - bytes.len() % record,
                format!("length {} is not a positive multiple of the {record}-byte record", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks(record).enumerate() {
            let label = rec[label_bytes - 1] as usize;
            if label >= class_count {
                return Err(format_err(
                    path,
                    r * record + label_bytes - 1,
                    format!("label {label} exceeds class count {class_count}"),
                ));
            }
            labels.push(label);
            pixels.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    let name = if class_count == 10 { "cifar10" } else { "cifar100" };
    Dataset::new(
        Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
        labels,
        name,
        class_count,
    )
}

/// Indices of a stratified sample with exactly `n_per_class` items per
/// class, in a seed-determined order.
pub fn subsample_indices(labels: &[usize], class_count: usize, n_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    if n_per_class == 0 {
        return Err(Error::Config("n-per-class must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..class_count).map(|c| (c, Vec::new())).collect();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n_per_class * class_count);
    for (class, mut idx) in by_class {
        if idx.len() < n_per_class {
            return Err(Error::Config(format!(
                "class {class} has {} examples, fewer than the requested {n_per_class}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..n_per_class]);
    }
    chosen.shuffle(&mut rng);
    Ok(chosen)
}

pub fn subsample(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let idx = subsample_indices(&ds.labels, ds.class_count, n_per_class, seed)?;
    ds.select(&idx)
}

fn per_channel(ds: &Dataset, f: impl Fn(usize, f32) -> f32) -> Result<Tensor<f32>> {
    let [c, h, w] = ds.item_shape();
    let area = h * w;
    let mut out = ds.images.clone();
    for (i, plane) in out.data_mut().chunks_mut(area).enumerate() {
        let ch = i % c;
        plane.iter_mut().for_each(|v| *v = f(ch, *v));
    }
    Ok(out)
}

/// `(pixel - mean[c]) / std[c]` per channel.
pub fn normalize(ds: &Dataset, norm: &Normalization) -> Result<Dataset> {
    let [c, _, _] = ds.item_shape();
    if norm.mean.len() != c || norm.std.len() != c {
        return Err(Error::shape(
            "normalize",
            format!(
                "{c} channels but {} means and {} standard deviations",
                norm.mean.len(),
                norm.std.len()
            ),
        ));
    }
    if let Some(s) = norm.std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Config(format!("standard deviation must be positive, got {s}")));
    }
    if ds.normalization.is_some() {
        return Err(Error::domain("normalize", format!("{} is already normalized", ds.name)));
    }
    let images = per_channel(ds, |ch, v| ((v as f64 - norm.mean[ch]) / norm.std[ch]) as f32)?;
    Ok(Dataset {
        images,
        normalization: Some(norm.clone()),
        ..ds.clone()
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(ds: &Dataset) -> Result<Dataset> {
    let norm = ds
        .normalization
        .clone()
        .ok_or_else(|| Error::domain("denormalize", format!("{} is not normalized", ds.name)))?;
    let images = per_channel(ds, |ch, v| (v as f64 * norm.std[ch] + norm.mean[ch]) as f32)?;
    Ok(Dataset {
        images,
        normalization: None,
        ..ds.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        })
    }
}

impl DatasetKind {
    pub fn class_count(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    pub fn default_normalization(self) -> Normalization {
        match self {
            DatasetKind::Mnist => Normalization::mnist(),
            DatasetKind::Cifar10 => Normalization::cifar10(),
            DatasetKind::Cifar100 => Normalization::cifar100(),
        }
    }

    /// Directory under the data root that holds this dataset's files.
    pub fn subdir(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Cifar100 => "cifar-100-binary",
        }
    }

    /// Standard file names of a split, relative to the dataset directory.
    pub fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (DatasetKind::Mnist, Split::Train) => vec!["train-images-idx3-ubyte", "train-labels-idx1-ubyte"],
            (DatasetKind::Mnist, Split::Test) => vec!["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"],
            (DatasetKind::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (DatasetKind::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (DatasetKind::Cifar100, Split::Train) => vec!["train.bin"],
            (DatasetKind::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }

    /// Loads a split from `dir`, which is either the dataset directory itself
    /// or a data root containing [`DatasetKind::subdir`].
    pub fn load(self, dir: &Path, split: Split) -> Result<Dataset> {
        let names = self.files(split);
        let nested = dir.join(self.subdir());
        let base = if nested.join(names[0]).exists() { nested } else { dir.to_path_buf() };
        let paths: Vec<PathBuf> = names.iter().map(|n| base.join(n)).collect();
        match self {
            DatasetKind::Mnist => load_mnist_idx(&paths[0], &paths[1]),
            _ => load_cifar_binary(&paths, self.class_count()),
        }
    }
}

/// Data root from an explicit path, else the environment variable, else `./data`.
pub fn resolve_data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}
