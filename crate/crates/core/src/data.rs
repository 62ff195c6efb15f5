//! Dataset ingestion: IDX and CIFAR-10 binary formats, synthetic blobs,
//! and stratified subsetting. All inputs live in `[0,1]`.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::{Element, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_LEN: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled inputs in `[0,1]^D`.
#[derive(Debug, Clone)]
pub struct Dataset<E> {
    name: String,
    split: Split,
    num_classes: usize,
    inputs: Vec<Tensor<E>>,
    labels: Vec<usize>,
}

impl<E: Element> Dataset<E> {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        num_classes: usize,
        inputs: Vec<Tensor<E>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Format(format!(
                "dataset has {} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        for t in &inputs {
            let ok = t
                .data()
                .iter()
                .all(|&v| v >= E::zero() && v <= E::one());
            if !ok {
                return Err(Error::Input("dataset input outside [0,1]".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input(&self, i: usize) -> &Tensor<E> {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs[0].shape()
    }

    /// Stacks samples `idx` into a `[B, ...input_shape]` batch tensor.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<E>, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let shape = self.input_shape().to_vec();
        let per = self.inputs[0].numel();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.inputs[i].data());
            labels.push(self.labels[i]);
        }
        let mut bs = vec![idx.len()];
        bs.extend_from_slice(&shape);
        Ok((Tensor::new(bs, data)?, labels))
    }
}

fn read_u32s(cur: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(cur.read_u32::<BigEndian>()?);
    }
    Ok(out)
}

/// Loads an IDX image/label file pair (the Fashion-MNIST distribution
/// format). Pixels are scaled by 1/255 into `[0,1]`.
pub fn load_idx<E: Element>(images_path: &Path, labels_path: &Path) -> Result<Dataset<E>> {
    let img_bytes = std::fs::read(images_path)?;
    let lab_bytes = std::fs::read(labels_path)?;

    let mut cur = Cursor::new(img_bytes.as_slice());
    let magic = cur.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let dims = read_u32s(&mut cur, 3)?;
    let (n, rows, cols) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let mut pixels = vec![0u8; n * rows * cols];
    cur.read_exact(&mut pixels)?;

    let mut cur = Cursor::new(lab_bytes.as_slice());
    let magic = cur.read_u32::<BigEndian>()?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let n_labels = cur.read_u32::<BigEndian>()? as usize;
    if n_labels != n {
        return Err(Error::Format(format!(
            "count mismatch: {n} images vs {n_labels} labels"
        )));
    }
    let mut labels_raw = vec![0u8; n_labels];
    cur.read_exact(&mut labels_raw)?;

    let scale = E::from_f64(1.0 / 255.0);
    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let data = pixels[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&b| E::from_f64(b as f64) * scale)
            .collect();
        inputs.push(Tensor::new(vec![1, rows, cols], data)?);
    }
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1).max(2);
    let split = if images_path.to_string_lossy().contains("train") {
        Split::Train
    } else {
        Split::Test
    };
    Dataset::new("idx", split, num_classes, inputs, labels)
}

/// Writes a dataset back to the IDX pair format (u8 pixels). Values are
/// quantized by `round(v * 255)`; datasets loaded from IDX round-trip
/// bitwise.
pub fn write_idx<E: Element>(
    dataset: &Dataset<E>,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let shape = dataset.input_shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Input(format!(
            "IDX export expects [1,rows,cols] inputs, got {shape:?}"
        )));
    }
    let (rows, cols) = (shape[1], shape[2]);
    let mut img = Vec::with_capacity(16 + dataset.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for i in 0..dataset.len() {
        for &v in dataset.input(i).data() {
            img.push((v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for i in 0..dataset.len() {
        lab.push(dataset.label(i) as u8);
    }
    fsutil::write_atomic(images_path, &img)?;
    fsutil::write_atomic(labels_path, &lab)
}

/// Loads a CIFAR-10 binary batch file: 3073-byte records of one label byte
/// followed by 3x32x32 channel-major pixels.
pub fn load_cifar10_bin<E: Element>(path: &Path) -> Result<Dataset<E>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let scale = E::from_f64(1.0 / 255.0);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("CIFAR-10 label byte {label} > 9")));
        }
        labels.push(label);
        let data = rec[1..]
            .iter()
            .map(|&b| E::from_f64(b as f64) * scale)
            .collect();
        inputs.push(Tensor::new(vec![3, 32, 32], data)?);
    }
    let split = if path.to_string_lossy().contains("test") {
        Split::Test
    } else {
        Split::Train
    };
    Dataset::new("cifar10", split, 10, inputs, labels)
}

/// Seeded Gaussian blobs with class-dependent means, min-max rescaled into
/// `[0,1]^dim`. Larger `separation` spreads the class means further apart
/// relative to the unit noise.
pub fn synthetic_blobs<E: Element>(
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset<E>> {
    if num_classes < 2 {
        return Err(Error::Config("blobs need at least 2 classes".into()));
    }
    if dim < 2 {
        return Err(Error::Config("blobs need dim >= 2".into()));
    }
    if n_per_class == 0 {
        return Err(Error::Config("blobs need n_per_class >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * num_classes;
    let mut raw = vec![0.0f64; n * dim];
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
        for i in 0..n_per_class {
            let row = c * n_per_class + i;
            labels.push(c);
            for d in 0..dim {
                let mean = match d {
                    0 => separation * angle.cos(),
                    1 => separation * angle.sin(),
                    _ => 0.0,
                };
                let noise: f64 = rng.sample(StandardNormal);
                raw[row * dim + d] = mean + noise;
            }
        }
    }
    // Per-dimension min-max rescale into [0,1].
    for d in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in 0..n {
            let v = raw[row * dim + d];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for row in 0..n {
            let v = &mut raw[row * dim + d];
            *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
            *v = v.clamp(0.0, 1.0);
        }
    }
    let inputs = (0..n)
        .map(|row| Tensor::from_f64_slice(&[dim], &raw[row * dim..(row + 1) * dim]))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        format!("blobs(k={num_classes},dim={dim},sep={separation})"),
        Split::Train,
        num_classes,
        inputs,
        labels,
    )
}

/// Deterministic stratified sample without replacement; per-class counts are
/// proportional with largest-remainder rounding.
pub fn subset<E: Element>(dataset: &Dataset<E>, n: usize, seed: u64) -> Result<Dataset<E>> {
    if n > dataset.len() {
        return Err(Error::Input(format!(
            "subset of {n} from dataset of {}",
            dataset.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.len() {
        by_class.entry(dataset.label(i)).or_default().push(i);
    }
    let total = dataset.len() as f64;
    let mut quotas: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(&c, idxs)| {
            let exact = n as f64 * idxs.len() as f64 / total;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
    // Hand out the remainder by largest fractional part, class index as a
    // deterministic tie-break.
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        quotas[b]
            .2
            .partial_cmp(&quotas[a].2)
            .unwrap()
            .then(quotas[a].0.cmp(&quotas[b].0))
    });
    let mut oi = 0;
    while assigned < n {
        let qi = order[oi % order.len()];
        let cap = by_class[&quotas[qi].0].len();
        if quotas[qi].1 < cap {
            quotas[qi].1 += 1;
            assigned += 1;
        }
        oi += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n);
    for (c, take, _) in &quotas {
        let mut idxs = by_class[c].clone();
        idxs.shuffle(&mut rng);
        picked.extend_from_slice(&idxs[..*take]);
    }
    picked.shuffle(&mut rng);

    let inputs = picked.iter().map(|&i| dataset.input(i).clone()).collect();
    let labels = picked.iter().map(|&i| dataset.label(i)).collect();
    Dataset::new(
        dataset.name().to_string(),
        dataset.split(),
        dataset.num_classes(),
        inputs,
        labels,
    )
}

/// Parses a dataset specification string:
///
/// - `blobs:n=<per class>,classes=<k>,dim=<d>,sep=<s>,seed=<u64>`
/// - `idx:<images path>,<labels path>`
/// - a `.bin` file path (CIFAR-10 batch)
/// - a directory containing Fashion-MNIST style IDX files (prefers the
///   test split when both are present)
pub fn parse_spec<E: Element>(spec: &str) -> Result<Dataset<E>> {
    if let Some(rest) = spec.strip_prefix("blobs:") {
        let mut n = 100usize;
        let mut classes = 3usize;
        let mut dim = 8usize;
        let mut sep = 4.0f64;
        let mut seed = 0u64;
        for kv in rest.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad blobs parameter {kv:?}")))?;
            match k {
                "n" => n = parse_num(v)?,
                "classes" => classes = parse_num(v)?,
                "dim" => dim = parse_num(v)?,
                "sep" => {
                    sep = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad blobs sep {v:?}")))?
                }
                "seed" => seed = parse_num(v)?,
                other => return Err(Error::Config(format!("unknown blobs key {other:?}"))),
            }
        }
        return synthetic_blobs(n, classes, dim, sep, seed);
    }
    if let Some(rest) = spec.strip_prefix("idx:") {
        let (img, lab) = rest
            .split_once(',')
            .ok_or_else(|| Error::Config("idx spec needs <images>,<labels>".into()))?;
        return load_idx(Path::new(img), Path::new(lab));
    }
    let path = Path::new(spec);
    if path.is_dir() {
        for (img, lab) in [
            ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
            ("test-images-idx3-ubyte", "test-labels-idx1-ubyte"),
            ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ] {
            let ip = path.join(img);
            let lp = path.join(lab);
            if ip.is_file() && lp.is_file() {
                return load_idx(&ip, &lp);
            }
        }
        return Err(Error::Input(format!(
            "no recognized dataset files in {}",
            path.display()
        )));
    }
    if spec.ends_with(".bin") {
        return load_cifar10_bin(path);
    }
    Err(Error::Config(format!("unrecognized dataset spec {spec:?}")))
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad numeric value {v:?}")))
}
