//! Versioned binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MOB1" | u32 version | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u8 dtype | u8 rank | u64 dims[rank] | u64 offset
//! raw little-endian tensor data, offsets relative to the start of this section
//! ```
//!
//! The model structure travels in a `u8` tensor named [`DESCRIPTOR_TENSOR`]
//! holding JSON. A `.json` sidecar mirrors the descriptor and tensor table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{Layer, Model, ModelMode};
use crate::block::{
    BlockActivation, BlockKind, ConvBn, InferenceBlock, InferenceStage, StageGeometry, TrainBlock,
    TrainStage,
};
use crate::error::{Error, Result};
use crate::ops::{BnParams, ConvSpec, Linear, SeParams, SE_RATIO};
use crate::tensor::{DType, Scalar, Tensor4};

pub const MAGIC: &[u8; 4] = b"MOB1";
pub const VERSION: u32 = 1;
pub const DESCRIPTOR_TENSOR: &str = "__model__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Trainable.
    Param,
    /// Running statistics and constants.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDesc {
    pub geometry: StageGeometry,
    pub k: usize,
    pub scale: bool,
    pub skip: bool,
    pub se_hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceStageDesc {
    pub geometry: StageGeometry,
    pub se_hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDesc {
    TrainBlock {
        kind: BlockKind,
        activation: BlockActivation,
        stages: Vec<StageDesc>,
    },
    InferenceBlock {
        kind: BlockKind,
        activation: BlockActivation,
        stages: Vec<InferenceStageDesc>,
    },
    Avgpool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDesc {
    pub name: String,
    pub mode: ModelMode,
    pub input_resolution: usize,
    pub dtype: DType,
    pub layers: Vec<LayerDesc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub magic: String,
    pub version: u32,
    pub model: ModelDesc,
    pub tensors: Vec<TensorEntry>,
}

fn conv_geometry<T: Scalar>(c: &ConvSpec<T>) -> StageGeometry {
    StageGeometry {
        in_channels: c.in_channels(),
        out_channels: c.out_channels(),
        kernel: c.kernel(),
        stride: c.stride,
        groups: c.groups,
    }
}

pub fn describe<T: Scalar>(model: &Model<T>) -> ModelDesc {
    let layers = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Train(b) => LayerDesc::TrainBlock {
                kind: b.kind,
                activation: b.activation,
                stages: b
                    .stages
                    .iter()
                    .map(|s| StageDesc {
                        geometry: s.geometry,
                        k: s.branches.len(),
                        scale: s.scale.is_some(),
                        skip: s.skip.is_some(),
                        se_hidden: s.se.as_ref().map(SeParams::hidden),
                    })
                    .collect(),
            },
            Layer::Inference(b) => LayerDesc::InferenceBlock {
                kind: b.kind,
                activation: b.activation,
                stages: b
                    .stages
                    .iter()
                    .map(|s| InferenceStageDesc {
                        geometry: conv_geometry(&s.conv),
                        se_hidden: s.se.as_ref().map(SeParams::hidden),
                    })
                    .collect(),
            },
            Layer::AvgPool => LayerDesc::Avgpool,
            Layer::Linear(lin) => LayerDesc::Linear {
                in_features: lin.in_features,
                out_features: lin.out_features,
            },
        })
        .collect();
    ModelDesc {
        name: model.name.clone(),
        mode: model.mode,
        input_resolution: model.input_resolution,
        dtype: T::DTYPE,
        layers,
    }
}

fn zero_conv<T: Scalar>(c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize) -> ConvSpec<T> {
    ConvSpec {
        weight: Tensor4::zeros([c_out, c_in / groups.max(1), kernel, kernel]),
        bias: vec![T::zero(); c_out],
        stride,
        padding: kernel.saturating_sub(1) / 2,
        groups,
    }
}

fn zero_se<T: Scalar>(channels: usize, hidden: usize) -> SeParams<T> {
    SeParams {
        reduce: zero_conv(channels, hidden, 1, 1, 1),
        expand: zero_conv(hidden, channels, 1, 1, 1),
        ratio: SE_RATIO,
    }
}

/// Zero-filled model with the described structure.
pub fn skeleton<T: Scalar>(desc: &ModelDesc) -> Result<Model<T>> {
    let eps = T::of(crate::ops::BN_EPS);
    let layers = desc
        .layers
        .iter()
        .map(|l| {
            Ok(match l {
                LayerDesc::TrainBlock {
                    kind,
                    activation,
                    stages,
                } => {
                    let stages = stages
                        .iter()
                        .map(|s| {
                            let g = s.geometry;
                            let branch = |kernel: usize| ConvBn {
                                conv: zero_conv(g.in_channels, g.out_channels, kernel, g.stride, g.groups),
                                bn: BnParams::identity(g.out_channels, eps),
                            };
                            TrainStage::new(
                                g,
                                (0..s.k).map(|_| branch(g.kernel)).collect(),
                                s.scale.then(|| branch(1)),
                                s.skip.then(|| BnParams::identity(g.out_channels, eps)),
                                s.se_hidden.map(|h| zero_se(g.out_channels, h)),
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Layer::Train(TrainBlock::new(*kind, stages, *activation)?)
                }
                LayerDesc::InferenceBlock {
                    kind,
                    activation,
                    stages,
                } => Layer::Inference(InferenceBlock {
                    kind: *kind,
                    activation: *activation,
                    stages: stages
                        .iter()
                        .map(|s| {
                            let g = s.geometry;
                            InferenceStage {
                                conv: zero_conv(g.in_channels, g.out_channels, g.kernel, g.stride, g.groups),
                                se: s.se_hidden.map(|h| zero_se(g.out_channels, h)),
                            }
                        })
                        .collect(),
                }),
                LayerDesc::Avgpool => Layer::AvgPool,
                LayerDesc::Linear {
                    in_features,
                    out_features,
                } => Layer::Linear(Linear {
                    weight: vec![T::zero(); in_features * out_features],
                    bias: vec![T::zero(); *out_features],
                    in_features: *in_features,
                    out_features: *out_features,
                }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model {
        name: desc.name.clone(),
        mode: desc.mode,
        input_resolution: desc.input_resolution,
        layers,
    };
    model.validate()?;
    Ok(model)
}

/// A named, mutable view of one stored tensor.
pub struct Slot<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [T],
    pub role: TensorRole,
}

fn push_bn<'a, T: Scalar>(out: &mut Vec<Slot<'a, T>>, prefix: &str, bn: &'a mut BnParams<T>) {
    let n = bn.gamma.len();
    let mut slot = |name: &str, data: &'a mut [T], dims: Vec<usize>, role| {
        out.push(Slot {
            name: format!("{prefix}.{name}"),
            dims,
            data,
            role,
        })
    };
    slot("mu", &mut bn.mu, vec![n], TensorRole::Buffer);
    slot("sigma", &mut bn.sigma, vec![n], TensorRole::Buffer);
    slot("gamma", &mut bn.gamma, vec![n], TensorRole::Param);
    slot("beta", &mut bn.beta, vec![n], TensorRole::Param);
    slot("eps", std::slice::from_mut(&mut bn.eps), vec![1], TensorRole::Buffer);
}

fn push_conv<'a, T: Scalar>(out: &mut Vec<Slot<'a, T>>, prefix: &str, conv: &'a mut ConvSpec<T>, bias: bool) {
    let dims = conv.weight.shape().to_vec();
    let n = conv.bias.len();
    out.push(Slot {
        name: format!("{prefix}.weight"),
        dims,
        data: conv.weight.data_mut(),
        role: TensorRole::Param,
    });
    if bias {
        out.push(Slot {
            name: format!("{prefix}.bias"),
            dims: vec![n],
            data: &mut conv.bias,
            role: TensorRole::Param,
        });
    }
}

fn push_se<'a, T: Scalar>(out: &mut Vec<Slot<'a, T>>, prefix: &str, se: &'a mut SeParams<T>) {
    push_conv(out, &format!("{prefix}.reduce"), &mut se.reduce, true);
    push_conv(out, &format!("{prefix}.expand"), &mut se.expand, true);
}

/// Every stored tensor of `model` in a fixed order with its canonical name.
/// Bias-free branch convs contribute only their weight.
pub fn tensor_slots<T: Scalar>(model: &mut Model<T>) -> Vec<Slot<'_, T>> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let p = format!("layers.{i}");
        match layer {
            Layer::Train(b) => {
                for (j, s) in b.stages.iter_mut().enumerate() {
                    let sp = format!("{p}.stages.{j}");
                    for (bi, br) in s.branches.iter_mut().enumerate() {
                        push_conv(&mut out, &format!("{sp}.branches.{bi}.conv"), &mut br.conv, false);
                        push_bn(&mut out, &format!("{sp}.branches.{bi}.bn"), &mut br.bn);
                    }
                    if let Some(sc) = &mut s.scale {
                        push_conv(&mut out, &format!("{sp}.scale.conv"), &mut sc.conv, false);
                        push_bn(&mut out, &format!("{sp}.scale.bn"), &mut sc.bn);
                    }
                    if let Some(sk) = &mut s.skip {
                        push_bn(&mut out, &format!("{sp}.skip.bn"), sk);
                    }
                    if let Some(se) = &mut s.se {
                        push_se(&mut out, &format!("{sp}.se"), se);
                    }
                }
            }
            Layer::Inference(b) => {
                for (j, s) in b.stages.iter_mut().enumerate() {
                    let sp = format!("{p}.stages.{j}");
                    push_conv(&mut out, &format!("{sp}.conv"), &mut s.conv, true);
                    if let Some(se) = &mut s.se {
                        push_se(&mut out, &format!("{sp}.se"), se);
                    }
                }
            }
            Layer::AvgPool => {}
            Layer::Linear(lin) => {
                let dims = vec![lin.out_features, lin.in_features];
                let n = lin.bias.len();
                out.push(Slot {
                    name: format!("{p}.weight"),
                    dims,
                    data: &mut lin.weight,
                    role: TensorRole::Param,
                });
                out.push(Slot {
                    name: format!("{p}.bias"),
                    dims: vec![n],
                    data: &mut lin.bias,
                    role: TensorRole::Param,
                });
            }
        }
    }
    out
}

/// Owned copy of every stored tensor, in traversal order.
pub fn tensor_table<T: Scalar>(model: &Model<T>) -> Vec<(String, Vec<usize>, Vec<T>, TensorRole)> {
    let mut copy = model.clone();
    tensor_slots(&mut copy)
        .into_iter()
        .map(|s| (s.name, s.dims, s.data.to_vec(), s.role))
        .collect()
}

pub(crate) fn cast_model<T: Scalar, U: Scalar>(model: &Model<T>) -> Model<U> {
    let mut desc = describe(model);
    desc.dtype = U::DTYPE;
    let mut out: Model<U> = skeleton(&desc).expect("structure of a valid model");
    let table = tensor_table(model);
    for (slot, (_, _, data, _)) in tensor_slots(&mut out).into_iter().zip(table) {
        for (d, v) in slot.data.iter_mut().zip(data) {
            *d = U::of(v.as_f64());
        }
    }
    out
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Serializes `model` to container bytes and the sidecar metadata.
pub fn encode<T: Scalar>(model: &Model<T>) -> Result<(Vec<u8>, Sidecar)> {
    model.validate()?;
    let desc = describe(model);
    let desc_json = serde_json::to_vec(&desc)?;
    let table = tensor_table(model);

    let mut entries = Vec::with_capacity(table.len() + 1);
    let mut data = Vec::new();
    entries.push(TensorEntry {
        name: DESCRIPTOR_TENSOR.into(),
        dtype: DType::U8,
        dims: vec![desc_json.len() as u64],
        offset: 0,
    });
    data.extend_from_slice(&desc_json);
    for (name, dims, values, _) in &table {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE,
            dims: dims.iter().map(|&d| d as u64).collect(),
            offset: data.len() as u64,
        });
        for &v in values {
            v.write_le(&mut data);
        }
    }

    let mut out = Vec::with_capacity(data.len() + 64 * entries.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype.tag());
        out.push(e.dims.len() as u8);
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&e.offset.to_le_bytes());
    }
    out.extend_from_slice(&data);
    Ok((
        out,
        Sidecar {
            magic: String::from_utf8_lossy(MAGIC).into_owned(),
            version: VERSION,
            model: desc,
            tensors: entries,
        },
    ))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses the header, returning the tensor table and the data section.
pub fn parse_header(bytes: &[u8]) -> Result<(Vec<TensorEntry>, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected MOB1".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("tensor `{name}` has unknown dtype {tag}")))?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<_>>>()?;
        let offset = r.u64("offset")?;
        entries.push(TensorEntry { name, dtype, dims, offset });
    }
    let data = &bytes[r.pos..];
    for e in &entries {
        let n = e
            .dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(e.dtype.size() as u64))
            .ok_or_else(|| Error::Format(format!("tensor `{}` size overflows", e.name)))?;
        if e.offset.checked_add(n).is_none_or(|end| end > data.len() as u64) {
            return Err(Error::Format(format!("tensor `{}` runs past the end of the data section", e.name)));
        }
    }
    Ok((entries, data))
}

fn entry_bytes<'a>(e: &TensorEntry, data: &'a [u8]) -> &'a [u8] {
    let n: u64 = e.dims.iter().product::<u64>() * e.dtype.size() as u64;
    &data[e.offset as usize..(e.offset + n) as usize]
}

/// Rebuilds a model from container bytes. Nothing is returned unless every
/// tensor is present with the expected shape.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (entries, data) = parse_header(bytes)?;
    let by_name: BTreeMap<&str, &TensorEntry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != entries.len() {
        return Err(Error::Format("duplicate tensor names".into()));
    }
    let desc_entry = by_name
        .get(DESCRIPTOR_TENSOR)
        .ok_or_else(|| Error::Format(format!("missing `{DESCRIPTOR_TENSOR}` tensor")))?;
    if desc_entry.dtype != DType::U8 {
        return Err(Error::Format("model descriptor must be a u8 tensor".into()));
    }
    let desc: ModelDesc = serde_json::from_slice(entry_bytes(desc_entry, data))
        .map_err(|e| Error::Format(format!("model descriptor: {e}")))?;
    let mut model: Model<T> = skeleton(&desc).map_err(|e| Error::Format(format!("model descriptor: {e}")))?;
    let mut seen = 1;
    for slot in tensor_slots(&mut model) {
        let e = by_name
            .get(slot.name.as_str())
            .ok_or_else(|| Error::Format(format!("missing tensor `{}`", slot.name)))?;
        let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
        if dims != slot.dims {
            return Err(Error::Format(format!(
                "tensor `{}` has dims {:?}, expected {:?}",
                slot.name, dims, slot.dims
            )));
        }
        let raw = entry_bytes(e, data);
        match e.dtype {
            DType::F32 => {
                for (d, c) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
                    *d = T::of(f32::read_le(c) as f64);
                }
            }
            DType::F64 => {
                for (d, c) in slot.data.iter_mut().zip(raw.chunks_exact(8)) {
                    *d = T::of(f64::read_le(c));
                }
            }
            DType::U8 => {
                return Err(Error::Format(format!("tensor `{}` has dtype u8", slot.name)));
            }
        }
        seen += 1;
    }
    if seen != entries.len() {
        return Err(Error::Format(format!(
            "container holds {} tensors but the model uses {seen}",
            entries.len()
        )));
    }
    model.validate()?;
    Ok(model)
}

/// Writes the container to `path` and the JSON sidecar next to it.
pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (bytes, sidecar) = encode(model)?;
    std::fs::write(path, bytes)?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    decode(&std::fs::read(path)?)
}

/// Element type stored in a container file.
pub fn stored_dtype(bytes: &[u8]) -> Result<DType> {
    let (entries, _) = parse_header(bytes)?;
    Ok(entries
        .iter()
        .find(|e| e.name != DESCRIPTOR_TENSOR)
        .map_or(DType::F32, |e| e.dtype))
}
