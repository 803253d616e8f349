//! Versioned checkpoint container: named entries, little-endian 32-bit
//! reals, length-prefixed names. Save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::layers::{arch_from_string, arch_to_string, Network};
use crate::nn::optim::Adam;
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"N2UQCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor { shape: Vec<usize>, data: Vec<f32> },
    U64(u64),
    Text(String),
}

/// Ordered named-entry table. Entry order is the write order, so a loaded
/// checkpoint re-serializes to the same bytes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::contract(format!("checkpoint has no entry '{name}'")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn put_tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        self.entries.push((
            name.to_string(),
            Entry::Tensor {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v.as_f64() as f32).collect(),
            },
        ));
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.entries.push((name.to_string(), Entry::U64(v)));
    }

    pub fn put_text(&mut self, name: &str, v: &str) {
        self.entries.push((name.to_string(), Entry::Text(v.to_string())));
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        match self.get(name)? {
            Entry::Tensor { shape, data } => Tensor::new(
                shape.clone(),
                data.iter().map(|&v| T::from_f64(v as f64)).collect(),
            ),
            _ => Err(Error::contract(format!("entry '{name}' is not a tensor"))),
        }
    }

    pub fn u64_value(&self, name: &str) -> Result<u64> {
        match self.get(name)? {
            Entry::U64(v) => Ok(*v),
            _ => Err(Error::contract(format!("entry '{name}' is not a u64"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Entry::Text(v) => Ok(v),
            _ => Err(Error::contract(format!("entry '{name}' is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor { shape, data } => {
                    out.push(0);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &d in shape {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Entry::Text(v) => {
                    out.push(2);
                    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    out.extend_from_slice(v.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader { bytes, offset: 0 };
        let magic = r.take(8)?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format { offset: 0, message: "bad checkpoint magic".into() });
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format {
                offset: 8,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.u8()?;
            let entry = match tag {
                0 => {
                    let rank = r.u32()? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(r.u32()? as usize);
                    }
                    let numel: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        data.push(r.f32()?);
                    }
                    Entry::Tensor { shape, data }
                }
                1 => Entry::U64(r.u64()?),
                2 => Entry::Text(r.string()?),
                other => {
                    return Err(Error::Format {
                        offset: r.offset as u64 - 1,
                        message: format!("unknown entry tag {other}"),
                    })
                }
            };
            entries.push((name, entry));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) struct LeReader<'a> {
    pub bytes: &'a [u8],
    pub offset: usize,
}

impl<'a> LeReader<'a> {
    pub fn take(&mut self, count: usize) -> Result<&'a [u8]> {
        if self.offset + count > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                message: format!("truncated: wanted {count} more bytes"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + count];
        self.offset += count;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.offset as u64;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format { offset: at, message: "invalid utf-8".into() })
    }
}

fn layer_tensor_names(i: usize, layer: &crate::nn::layers::Layer<impl Real>) -> Vec<String> {
    let mut names = vec![format!("layer{i}.weight"), format!("layer{i}.bias")];
    if layer.act.is_some() {
        for f in ["act.start", "act.widths", "act.beta1", "act.beta2"] {
            names.push(format!("layer{i}.{f}"));
        }
    }
    if layer.wq_scalars.is_some() {
        names.push(format!("layer{i}.wq.scalars"));
    }
    if layer.rprelu.is_some() {
        for f in ["rprelu.shift_in", "rprelu.slope", "rprelu.shift_out"] {
            names.push(format!("layer{i}.{f}"));
        }
    }
    names
}

/// Bundles network weights, quantizer parameters, optimizer state, the RNG
/// seed, and a config echo into one checkpoint.
pub fn network_to_checkpoint<T: Real>(
    net: &Network<T>,
    optim: Option<&Adam<T>>,
    seed: u64,
    config_echo: &str,
) -> Checkpoint {
    let mut ck = Checkpoint::new();
    let specs: Vec<_> = net.layers.iter().map(|l| l.spec).collect();
    ck.put_text("arch", &arch_to_string(&specs));
    ck.put_text(
        "input_shape",
        &net.input_shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    ck.put_u64("num_classes", net.num_classes as u64);
    ck.put_text("act_scheme", net.act_scheme_name());
    ck.put_text("weight_scheme", net.weight_scheme_name());
    ck.put_u64("rng.seed", seed);
    ck.put_text("config", config_echo);
    for (i, layer) in net.layers.iter().enumerate() {
        ck.put_tensor(&format!("layer{i}.weight"), &layer.weight);
        ck.put_tensor(&format!("layer{i}.bias"), &layer.bias);
        if let Some(a) = &layer.act {
            ck.put_tensor(&format!("layer{i}.act.start"), &a.start);
            ck.put_tensor(&format!("layer{i}.act.widths"), &a.widths);
            ck.put_tensor(&format!("layer{i}.act.beta1"), &a.beta1);
            ck.put_tensor(&format!("layer{i}.act.beta2"), &a.beta2);
        }
        if let Some(s) = &layer.wq_scalars {
            ck.put_tensor(&format!("layer{i}.wq.scalars"), s);
        }
        if let Some(r) = &layer.rprelu {
            ck.put_tensor(&format!("layer{i}.rprelu.shift_in"), &r.shift_in);
            ck.put_tensor(&format!("layer{i}.rprelu.slope"), &r.slope);
            ck.put_tensor(&format!("layer{i}.rprelu.shift_out"), &r.shift_out);
        }
    }
    if let Some(adam) = optim {
        ck.put_u64("optim.step", adam.step_count());
        for (name, m, v) in adam.states() {
            ck.put_tensor(&format!("optim.m.{name}"), m);
            ck.put_tensor(&format!("optim.v.{name}"), v);
        }
    }
    ck
}

/// Rebuilds a network (at any precision) from a checkpoint.
pub fn network_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<Network<T>> {
    let specs = arch_from_string(ck.text("arch")?)?;
    let input_shape: Vec<usize> = ck
        .text("input_shape")?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Parse("bad input_shape".into())))
        .collect::<Result<_>>()?;
    let num_classes = ck.u64_value("num_classes")? as usize;
    let mut net = Network::<T>::new(
        specs,
        input_shape,
        num_classes,
        ck.text("act_scheme")?,
        ck.text("weight_scheme")?,
        &mut SplitMix64::new(0),
    )?;
    let names: Vec<Vec<String>> = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| layer_tensor_names(i, l))
        .collect();
    for layer_names in names {
        for name in layer_names {
            let stored = ck.tensor::<T>(&name)?;
            let slot = net.param_mut(&name)?;
            if slot.shape() != stored.shape() {
                return Err(Error::contract(format!(
                    "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored;
        }
    }
    Ok(net)
}

/// Restores optimizer state saved alongside a network, if present.
pub fn optimizer_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<Option<Adam<T>>> {
    if !ck.has("optim.step") {
        return Ok(None);
    }
    let step = ck.u64_value("optim.step")?;
    let mut states = Vec::new();
    for name in ck.names().map(str::to_string).collect::<Vec<_>>() {
        if let Some(param) = name.strip_prefix("optim.m.") {
            let m = ck.tensor::<T>(&name)?;
            let v = ck.tensor::<T>(&format!("optim.v.{param}"))?;
            states.push((param.to_string(), m, v));
        }
    }
    let mut adam = Adam::new();
    adam.restore(step, states);
    Ok(Some(adam))
}
