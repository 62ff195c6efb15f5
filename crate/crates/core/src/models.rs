//! Classifier architectures, seeded initialization, and checkpoint I/O.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::{Dtype, Element, Tape, Tensor, Var};

/// One layer of a sequential classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    MaxPool2,
    Flatten,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

fn default_conv_channels() -> [usize; 2] {
    [8, 16]
}

fn default_fc_dim() -> usize {
    64
}

/// Named architecture preset plus width overrides. Presets resolve
/// deterministically to a layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// "mlp" or "lenet-small".
    pub preset: String,
    /// Shape of a single input, e.g. `[16]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Hidden widths for the mlp preset.
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    /// Channel widths of the two conv blocks in lenet-small.
    #[serde(default = "default_conv_channels")]
    pub conv_channels: [usize; 2],
    /// Width of the penultimate dense layer in lenet-small.
    #[serde(default = "default_fc_dim")]
    pub fc_dim: usize,
}

impl ArchitectureConfig {
    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ArchitectureConfig {
            preset: "mlp".into(),
            input_shape: vec![input_dim],
            num_classes,
            hidden_dims,
            conv_channels: default_conv_channels(),
            fc_dim: default_fc_dim(),
        }
    }

    pub fn lenet_small(input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchitectureConfig {
            preset: "lenet-small".into(),
            input_shape: input_shape.to_vec(),
            num_classes,
            hidden_dims: default_hidden(),
            conv_channels: default_conv_channels(),
            fc_dim: default_fc_dim(),
        }
    }

    pub fn resolve_layers(&self) -> Result<Vec<LayerSpec>> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        match self.preset.as_str() {
            "mlp" => {
                let d: usize = self.input_shape.iter().product();
                let mut layers = vec![LayerSpec::Flatten];
                let mut prev = d;
                for &h in &self.hidden_dims {
                    if h == 0 {
                        return Err(Error::Config("hidden width must be positive".into()));
                    }
                    layers.push(LayerSpec::Dense { in_dim: prev, out_dim: h });
                    layers.push(LayerSpec::Relu);
                    prev = h;
                }
                layers.push(LayerSpec::Dense { in_dim: prev, out_dim: self.num_classes });
                Ok(layers)
            }
            "lenet-small" => {
                if self.input_shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "lenet-small expects a [C,H,W] input shape, got {:?}",
                        self.input_shape
                    )));
                }
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                if h < 4 || w < 4 {
                    return Err(Error::Config(format!(
                        "lenet-small needs spatial dims >= 4, got {h}x{w}"
                    )));
                }
                let [c1, c2] = self.conv_channels;
                if c1 == 0 || c2 == 0 || self.fc_dim == 0 {
                    return Err(Error::Config("layer widths must be positive".into()));
                }
                // 5x5 convs with pad 2 keep spatial dims; each pool halves them.
                let (ph, pw) = (h / 2 / 2, w / 2 / 2);
                Ok(vec![
                    LayerSpec::Conv { in_ch: c, out_ch: c1, kernel: 5, stride: 1, pad: 2 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2,
                    LayerSpec::Conv { in_ch: c1, out_ch: c2, kernel: 5, stride: 1, pad: 2 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { in_dim: c2 * ph * pw, out_dim: self.fc_dim },
                    LayerSpec::Relu,
                    LayerSpec::Dense { in_dim: self.fc_dim, out_dim: self.num_classes },
                ])
            }
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Names and shapes of all parameters, in creation order.
    pub fn parameter_layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        for (i, layer) in self.resolve_layers()?.iter().enumerate() {
            match layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    out.push((format!("layer{i}.weight"), vec![*in_dim, *out_dim]));
                    out.push((format!("layer{i}.bias"), vec![*out_dim]));
                }
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                    out.push((
                        format!("layer{i}.weight"),
                        vec![*out_ch, *in_ch, *kernel, *kernel],
                    ));
                    out.push((format!("layer{i}.bias"), vec![*out_ch]));
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct NamedParam<E> {
    pub name: String,
    pub tensor: Tensor<E>,
}

/// A sequential classifier producing `num_classes` logits.
#[derive(Debug, Clone)]
pub struct Model<E> {
    arch: ArchitectureConfig,
    layers: Vec<LayerSpec>,
    params: Vec<NamedParam<E>>,
}

impl<E: Element> Model<E> {
    /// Builds a model with seeded He-uniform weights and zero biases.
    /// Identical config and seed give bitwise-identical parameters.
    pub fn build(arch: &ArchitectureConfig, seed: u64) -> Result<Self> {
        let layers = arch.resolve_layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, shape) in arch.parameter_layout()? {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1] * shape[2] * shape[3]
                };
                let limit = (6.0 / fan_in as f64).sqrt();
                let numel: usize = shape.iter().product();
                let data = (0..numel)
                    .map(|_| E::from_f64(rng.gen_range(-limit..limit)))
                    .collect();
                Tensor::new(shape, data)?
            };
            params.push(NamedParam { name, tensor });
        }
        Ok(Model {
            arch: arch.clone(),
            layers,
            params,
        })
    }

    /// Reassembles a model from stored parameters, validating the layout.
    pub fn from_parts(arch: ArchitectureConfig, params: Vec<NamedParam<E>>) -> Result<Self> {
        let layout = arch.parameter_layout()?;
        if layout.len() != params.len() {
            return Err(Error::Corrupt(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if name != &p.name || shape != p.tensor.shape() {
                return Err(Error::Corrupt(format!(
                    "parameter {} has unexpected name/shape ({} {:?})",
                    name,
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        let layers = arch.resolve_layers()?;
        Ok(Model { arch, layers, params })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &[NamedParam<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<E>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }

    /// SHA-256 over the little-endian bytes of all parameters, in order.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.extend_from_slice(&p.tensor.to_le_bytes());
        }
        fsutil::sha256_hex(&bytes)
    }

    /// Registers the parameters on a tape for a forward pass.
    pub fn trace(&self, tape: &Tape<E>, train_params: bool) -> TracedModel<E> {
        let param_vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), train_params))
            .collect();
        TracedModel {
            layers: self.layers.clone(),
            input_shape: self.arch.input_shape.clone(),
            param_vars,
        }
    }

    /// Logits for a batch, without gradient tracking.
    pub fn forward_logits(&self, batch: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let logits = self.trace(&tape, false).logits(&x)?.value();
        if !logits.all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Logits for a single sample of `input_shape`.
    pub fn logits_single(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut bs = vec![1];
        bs.extend_from_slice(x.shape());
        let out = self.forward_logits(&x.reshaped(&bs)?)?;
        out.reshaped(&[self.num_classes()])
    }

    /// Argmax predictions for a batch; ties break toward the lower index.
    pub fn predict(&self, batch: &Tensor<E>) -> Result<Vec<usize>> {
        let logits = self.forward_logits(batch)?;
        let k = self.num_classes();
        let b = logits.numel() / k;
        let data = logits.data();
        Ok((0..b)
            .map(|i| {
                let row = &data[i * k..(i + 1) * k];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn predict_single(&self, x: &Tensor<E>) -> Result<usize> {
        let mut bs = vec![1];
        bs.extend_from_slice(x.shape());
        Ok(self.predict(&x.reshaped(&bs)?)?[0])
    }
}

/// A model's parameters registered on a tape, ready to produce logits.
pub struct TracedModel<E> {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    param_vars: Vec<Var<E>>,
}

impl<E: Element> TracedModel<E> {
    pub fn param_vars(&self) -> &[Var<E>] {
        &self.param_vars
    }

    /// Applies the layer stack to a `[B, ...input_shape]` batch.
    pub fn logits(&self, x: &Var<E>) -> Result<Var<E>> {
        let s = x.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match input shape {:?}",
                s, self.input_shape
            )));
        }
        let batch = s[0];
        let mut cur = x.clone();
        let mut pi = 0;
        for layer in &self.layers {
            match layer {
                LayerSpec::Flatten => {
                    let numel: usize = cur.shape().iter().skip(1).product();
                    cur = cur.reshape(&[batch, numel])?;
                }
                LayerSpec::Dense { out_dim, .. } => {
                    let w = &self.param_vars[pi];
                    let b = &self.param_vars[pi + 1];
                    pi += 2;
                    cur = cur.matmul(w)?.add(&b.expand_axis(0, batch)?)?;
                    debug_assert_eq!(cur.shape()[1], *out_dim);
                }
                LayerSpec::Conv { stride, pad, .. } => {
                    let k = &self.param_vars[pi];
                    let b = &self.param_vars[pi + 1];
                    pi += 2;
                    cur = cur.conv2d(k, *stride, *pad)?;
                    let cs = cur.shape();
                    let bias = b
                        .expand_axis(1, cs[2])?
                        .expand_axis(2, cs[3])?
                        .expand_axis(0, batch)?;
                    cur = cur.add(&bias)?;
                }
                LayerSpec::Relu => cur = cur.relu(),
                LayerSpec::MaxPool2 => cur = cur.maxpool2()?,
            }
        }
        Ok(cur)
    }
}

// --- Checkpoint container -------------------------------------------------
//
// Layout: magic "FSCP" | u32 version | u64 header length | header JSON |
// raw little-endian parameter buffers. The header carries the architecture,
// dtype, and a manifest of (name, shape, offset, length, sha256) per
// parameter plus a checksum over all parameter bytes.

const CKPT_MAGIC: &[u8; 4] = b"FSCP";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    arch: ArchitectureConfig,
    dtype: String,
    params: Vec<ParamEntry>,
    model_sha256: String,
}

/// A model loaded from disk, in whichever precision it was stored.
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

pub fn save_checkpoint<E: Element>(model: &Model<E>, path: &Path) -> Result<()> {
    let mut data = Vec::new();
    let mut entries = Vec::new();
    for p in model.params() {
        let bytes = p.tensor.to_le_bytes();
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: data.len() as u64,
            byte_len: bytes.len() as u64,
            sha256: fsutil::sha256_hex(&bytes),
        });
        data.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        schema_version: crate::SCHEMA_VERSION,
        arch: model.arch().clone(),
        dtype: E::DTYPE.as_str().to_string(),
        params: entries,
        model_sha256: fsutil::sha256_hex(&data),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header encode: {e}")))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + data.len());
    out.extend_from_slice(CKPT_MAGIC);
    let mut buf4 = [0u8; 4];
    LittleEndian::write_u32(&mut buf4, CKPT_VERSION);
    out.extend_from_slice(&buf4);
    let mut buf8 = [0u8; 8];
    LittleEndian::write_u64(&mut buf8, header_json.len() as u64);
    out.extend_from_slice(&buf8);
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);
    fsutil::write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = LittleEndian::read_u64(&bytes[8..16]) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Format(format!("checkpoint header decode: {e}")))?;
    let data = &bytes[16 + header_len..];
    if fsutil::sha256_hex(data) != header.model_sha256 {
        return Err(Error::Corrupt("model checksum mismatch".into()));
    }
    match Dtype::parse(&header.dtype)? {
        Dtype::F32 => Ok(AnyModel::F32(decode_params::<f32>(&header, data)?)),
        Dtype::F64 => Ok(AnyModel::F64(decode_params::<f64>(&header, data)?)),
    }
}

fn decode_params<E: Element>(header: &CheckpointHeader, data: &[u8]) -> Result<Model<E>> {
    let mut params = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let (start, len) = (entry.offset as usize, entry.byte_len as usize);
        if start + len > data.len() {
            return Err(Error::Format(format!(
                "parameter {} overruns checkpoint data",
                entry.name
            )));
        }
        let buf = &data[start..start + len];
        if fsutil::sha256_hex(buf) != entry.sha256 {
            return Err(Error::Corrupt(format!(
                "parameter {} checksum mismatch",
                entry.name
            )));
        }
        params.push(NamedParam {
            name: entry.name.clone(),
            tensor: Tensor::from_le_bytes(&entry.shape, buf)?,
        });
    }
    Model::from_parts(header.arch.clone(), params)
}
