//! Self-describing, resumable checkpoints.
//!
//! Layout: ASCII magic `CKP1`, a `u32` format version, a `u64` JSON length,
//! a UTF-8 JSON header (model kind, full training config, per-net
//! architecture, RNG state, loss history), then named little-endian
//! 32-bit-float arrays with explicit shapes, in a fixed order per net:
//! parameters, buffers, Adam first moments, Adam second moments.

use crate::config::{ModelKind, TrainConfig};
use crate::optim::AdamState;
use crate::trace::TraceRow;
use crate::{PipelineError, Result};
use cranio_model::nets::{
    Critic, CriticConfig, EncoderConfig, Generator, GeneratorConfig, NetworkParameters,
    VNet, VNetConfig, VaeEncoder,
};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CKP1";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable ChaCha8 state: seed, word position and stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub word_pos: String,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            word_pos: rng.get_word_pos().to_string(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed_bytes = hex::decode(&self.seed)
            .map_err(|e| PipelineError::Checkpoint(format!("bad rng seed hex: {e}")))?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| PipelineError::Checkpoint("rng seed is not 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| PipelineError::Checkpoint(format!("bad rng word position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Architecture description, enough to rebuild the network builder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "cfg", rename_all = "snake_case")]
pub enum ArchConfig {
    Critic(CriticConfig),
    Generator(GeneratorConfig),
    Encoder(EncoderConfig),
    Vnet(VNetConfig),
}

/// A builder reconstructed from an [`ArchConfig`].
pub enum BuiltNet {
    Critic(Critic),
    Generator(Generator),
    Encoder(VaeEncoder),
    Vnet(VNet),
}

impl ArchConfig {
    pub fn build(&self) -> Result<BuiltNet> {
        Ok(match self {
            ArchConfig::Critic(c) => BuiltNet::Critic(Critic::new(c.clone())?),
            ArchConfig::Generator(c) => BuiltNet::Generator(Generator::new(c.clone())?),
            ArchConfig::Encoder(c) => BuiltNet::Encoder(VaeEncoder::new(c.clone())?),
            ArchConfig::Vnet(c) => BuiltNet::Vnet(VNet::new(c.clone())?),
        })
    }
}

impl BuiltNet {
    pub fn init(&self, seed: u64) -> NetworkParameters<f32> {
        match self {
            BuiltNet::Critic(n) => n.init(seed),
            BuiltNet::Generator(n) => n.init(seed),
            BuiltNet::Encoder(n) => n.init(seed),
            BuiltNet::Vnet(n) => n.init(seed),
        }
    }
}

/// One network with its optimizer state.
#[derive(Debug, Clone)]
pub struct NetState {
    pub name: String,
    pub arch: ArchConfig,
    pub params: NetworkParameters<f32>,
    pub adam: AdamState<f32>,
}

impl NetState {
    pub fn fresh(name: &str, arch: ArchConfig, seed: u64) -> Result<Self> {
        let built = arch.build()?;
        let params = built.init(seed);
        let adam = AdamState::new_like(&params.params);
        Ok(Self {
            name: name.to_string(),
            arch,
            params,
            adam,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_kind: ModelKind,
    pub config: TrainConfig,
    /// Completed epochs; resume continues at this epoch index.
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub history: Vec<TraceRow>,
    pub nets: Vec<NetState>,
}

#[derive(Serialize, Deserialize)]
struct MetaJson {
    format_version: u32,
    model_kind: ModelKind,
    config: TrainConfig,
    epoch: usize,
    step: u64,
    rng: RngState,
    nets: Vec<NetMeta>,
    history: Vec<TraceRow>,
}

#[derive(Serialize, Deserialize)]
struct NetMeta {
    name: String,
    arch: ArchConfig,
    adam_t: u64,
}

fn write_array(out: &mut Vec<u8>, name: &str, a: &ArrayD<f32>) {
    let name_bytes = name.as_bytes();
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(a.ndim() as u8);
    for &d in a.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in a.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct ArrayReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ArrayReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PipelineError::Checkpoint(format!(
                "corrupt payload: truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_array(&mut self, expect_name: &str) -> Result<ArrayD<f32>> {
        let len = u16::from_le_bytes(self.take(2, "array name length")?.try_into().unwrap());
        let name = std::str::from_utf8(self.take(len as usize, "array name")?)
            .map_err(|_| PipelineError::Checkpoint("array name is not UTF-8".into()))?;
        if name != expect_name {
            return Err(PipelineError::Checkpoint(format!(
                "corrupt payload: expected array {expect_name:?}, found {name:?}"
            )));
        }
        let ndim = self.take(1, "array rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = u32::from_le_bytes(self.take(4, "array shape")?.try_into().unwrap());
            shape.push(d as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count * 4, "array data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| PipelineError::Checkpoint(format!("bad array shape: {e}")))
    }
}

impl Checkpoint {
    pub fn find_net(&self, name: &str) -> Option<&NetState> {
        self.nets.iter().find(|n| n.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = MetaJson {
            format_version: FORMAT_VERSION,
            model_kind: self.model_kind,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            nets: self
                .nets
                .iter()
                .map(|n| NetMeta {
                    name: n.name.clone(),
                    arch: n.arch.clone(),
                    adam_t: n.adam.t,
                })
                .collect(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint meta serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for net in &self.nets {
            for p in &net.params.params {
                write_array(&mut out, &format!("{}.{}", net.name, p.name), &p.array);
            }
            for b in &net.params.buffers {
                write_array(&mut out, &format!("{}.buffer.{}", net.name, b.name), &b.array);
            }
            for (p, m) in net.params.params.iter().zip(&net.adam.m) {
                write_array(&mut out, &format!("{}.adam_m.{}", net.name, p.name), m);
            }
            for (p, v) in net.params.params.iter().zip(&net.adam.v) {
                write_array(&mut out, &format!("{}.adam_v.{}", net.name, p.name), v);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(PipelineError::Checkpoint("bad magic".into()));
        }
        if bytes.len() < 16 {
            return Err(PipelineError::Checkpoint("truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(PipelineError::Checkpoint(format!(
                "version mismatch: file has {version}, reader expects {FORMAT_VERSION}"
            )));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + json_len {
            return Err(PipelineError::Checkpoint(
                "corrupt payload: truncated JSON header".into(),
            ));
        }
        let meta: MetaJson = serde_json::from_slice(&bytes[16..16 + json_len])
            .map_err(|e| PipelineError::Checkpoint(format!("bad JSON header: {e}")))?;

        let mut reader = ArrayReader {
            bytes,
            pos: 16 + json_len,
        };
        let mut nets = Vec::with_capacity(meta.nets.len());
        for nm in &meta.nets {
            let built = nm.arch.build()?;
            // template defines array order and shapes; file contents replace it
            let mut params = built.init(0);
            for p in &mut params.params {
                let a = reader.read_array(&format!("{}.{}", nm.name, p.name))?;
                if a.shape() != p.array.shape() {
                    return Err(PipelineError::Checkpoint(format!(
                        "array {} has shape {:?}, architecture requires {:?}",
                        p.name,
                        a.shape(),
                        p.array.shape()
                    )));
                }
                p.array = a;
            }
            for b in &mut params.buffers {
                b.array = reader.read_array(&format!("{}.buffer.{}", nm.name, b.name))?;
            }
            let mut adam = AdamState::new_like(&params.params);
            adam.t = nm.adam_t;
            for (p, m) in params.params.iter().zip(adam.m.iter_mut()) {
                *m = reader.read_array(&format!("{}.adam_m.{}", nm.name, p.name))?;
            }
            for (p, v) in params.params.iter().zip(adam.v.iter_mut()) {
                *v = reader.read_array(&format!("{}.adam_v.{}", nm.name, p.name))?;
            }
            nets.push(NetState {
                name: nm.name.clone(),
                arch: nm.arch.clone(),
                params,
                adam,
            });
        }
        if reader.pos != bytes.len() {
            return Err(PipelineError::Checkpoint(format!(
                "corrupt payload: {} trailing bytes",
                bytes.len() - reader.pos
            )));
        }
        Ok(Checkpoint {
            model_kind: meta.model_kind,
            config: meta.config,
            epoch: meta.epoch,
            step: meta.step,
            rng: meta.rng,
            history: meta.history,
            nets,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }

    /// Hash of the encoded bytes, recorded in synthetic-dataset manifests.
    pub fn sha256_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encode());
        hex::encode(h.finalize())
    }
}
