//! Binary model file.
//!
//! Little-endian layout:
//!
//! ```text
//! "FORG" | version u8 = 1 | layer count u32
//! per layer: type u8 | kernel u32 | stride u32 | channels u32 | padding u32
//! tensor count u32
//! per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | f64 * product(dims)
//! ```
//!
//! The network input shape is stored as a rank-1 tensor named
//! [`INPUT_SHAPE_TENSOR`] holding `(channels, height, width)`; the class count
//! is implied by the shape chain. Attribution maps use the same container
//! with zero layers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::layer::{LayerSpec, Padding};
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FORG";
pub const VERSION: u8 = 1;
pub const INPUT_SHAPE_TENSOR: &str = "meta.input_shape";

fn layer_code(spec: &LayerSpec) -> (u8, [u32; 4]) {
    let u = |v: usize| v as u32;
    match *spec {
        LayerSpec::Conv2D {
            kernel,
            stride,
            channels_out,
            padding,
        } => (
            0,
            [u(kernel), u(stride), u(channels_out), (padding == Padding::Same) as u32],
        ),
        LayerSpec::Dense { units } => (1, [0, 0, u(units), 0]),
        LayerSpec::ReLU => (2, [0; 4]),
        LayerSpec::MaxPool2D { kernel, stride } => (3, [u(kernel), u(stride), 0, 0]),
        LayerSpec::AvgPool2D { kernel, stride } => (4, [u(kernel), u(stride), 0, 0]),
        LayerSpec::Flatten => (5, [0; 4]),
        LayerSpec::Softmax => (6, [0; 4]),
    }
}

fn layer_from_code(code: u8, h: [u32; 4]) -> Result<LayerSpec> {
    let [kernel, stride, channels, padding] = h.map(|v| v as usize);
    Ok(match code {
        0 => LayerSpec::Conv2D {
            kernel,
            stride,
            channels_out: channels,
            padding: match padding {
                0 => Padding::Valid,
                1 => Padding::Same,
                p => return Err(Error::Format(format!("bad padding flag {p}"))),
            },
        },
        1 => LayerSpec::Dense { units: channels },
        2 => LayerSpec::ReLU,
        3 => LayerSpec::MaxPool2D { kernel, stride },
        4 => LayerSpec::AvgPool2D { kernel, stride },
        5 => LayerSpec::Flatten,
        6 => LayerSpec::Softmax,
        c => return Err(Error::Format(format!("unknown layer type {c}"))),
    })
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes layers and named tensors into the container format.
pub fn encode(layers: &[LayerSpec], tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for spec in layers {
        let (code, hyper) = layer_code(spec);
        out.push(code);
        for v in hyper {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        write_tensor(&mut out, name, t);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses the container into layers and named tensors.
pub fn decode(bytes: &[u8]) -> Result<(Vec<LayerSpec>, BTreeMap<String, Tensor>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("missing magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let code = r.u8()?;
        let hyper = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        layers.push(layer_from_code(code, hyper)?);
    }
    let n_tensors = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor too large".into()))?;
        if count.saturating_mul(8) > bytes.len() - r.pos {
            return Err(Error::Format(format!("truncated tensor {name}")));
        }
        let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((layers, tensors))
}

pub fn model_to_bytes(net: &Network) -> Vec<u8> {
    let mut tensors = net.params().clone();
    let [c, h, w] = net.input_shape();
    tensors.insert(
        INPUT_SHAPE_TENSOR.to_string(),
        Tensor::new(vec![3], vec![c as f64, h as f64, w as f64]).expect("3 values"),
    );
    encode(net.layers(), &tensors)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network> {
    let (layers, mut tensors) = decode(bytes)?;
    let meta = tensors
        .remove(INPUT_SHAPE_TENSOR)
        .ok_or_else(|| Error::Format(format!("missing {INPUT_SHAPE_TENSOR}")))?;
    let dims: Vec<usize> = meta
        .data()
        .iter()
        .map(|&v| {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Validation(format!("bad input dimension {v}")))
            }
        })
        .collect::<Result<_>>()?;
    let input_shape: [usize; 3] = dims
        .try_into()
        .map_err(|_| Error::Validation("input shape must have 3 entries".into()))?;
    let num_classes = classes_of(&layers, input_shape)?;
    Network::new(layers, input_shape, num_classes, tensors)
}

fn classes_of(layers: &[LayerSpec], input_shape: [usize; 3]) -> Result<usize> {
    let mut shape = input_shape.to_vec();
    let end = match layers.last() {
        Some(LayerSpec::Softmax) => layers.len() - 1,
        _ => layers.len(),
    };
    for spec in &layers[..end] {
        shape = spec.output_shape(&shape)?;
    }
    match shape.as_slice() {
        [n] => Ok(*n),
        other => Err(Error::Validation(format!(
            "network output {other:?} is not a class vector"
        ))),
    }
}

/// Hex SHA-256 of the serialized model.
pub fn model_hash(net: &Network) -> String {
    hex_digest(&model_to_bytes(net))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(net))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    model_from_bytes(&fs::read(path)?)
}

pub fn save_tensor(t: &Tensor, name: &str, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors = BTreeMap::new();
    tensors.insert(name.to_string(), t.clone());
    fs::write(path, encode(&[], &tensors))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<(String, Tensor)> {
    let (layers, tensors) = decode(&fs::read(path)?)?;
    if !layers.is_empty() || tensors.len() != 1 {
        return Err(Error::Format("expected a single-tensor file".into()));
    }
    Ok(tensors.into_iter().next().expect("one tensor"))
}
