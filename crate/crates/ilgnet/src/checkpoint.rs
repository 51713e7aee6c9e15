//! Checkpoint persistence: a human-readable text manifest describing every
//! blob (name, shape, dtype, byte offset) followed by the raw little-endian
//! `f32` payload. Round-trips are bit-exact; any structural damage is
//! rejected with a description of what is wrong.
//!
//! File layout:
//!
//! ```text
//! "ILGC"            4 bytes magic
//! version           u32 little-endian
//! manifest length   u32 little-endian
//! manifest          UTF-8 text, `manifest length` bytes
//! payload           concatenated f32 little-endian blobs
//! ```
//!
//! The manifest carries one record per line: the architecture fields, the
//! iteration counter, the preprocessing channel means, an echo of the
//! training configuration, and one `blob` line per tensor. Blobs appear in
//! parameter-registry order followed by the batch-norm running statistics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{assemble, ArchConfig, Network, Variant};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ILGC";
pub const VERSION: u32 = 1;

/// One named tensor captured from (or destined for) a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A network's full persistent state, decoupled from any live graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub width_multiplier: f32,
    pub input_side: usize,
    pub iteration: u64,
    /// Per-channel RGB means subtracted during preprocessing.
    pub channel_means: [f32; 3],
    /// The training configuration that produced this state, as `key=value`
    /// pairs. Informational only; loading does not interpret it.
    pub config_echo: Vec<(String, String)>,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            variant: self.variant,
            width_multiplier: self.width_multiplier,
            input_side: self.input_side,
        }
    }

    /// Captures every parameter (registry order) and then the batch-norm
    /// running statistics from a live network.
    pub fn from_network(
        net: &Network,
        channel_means: [f32; 3],
        config_echo: &[(String, String)],
    ) -> Checkpoint {
        let mut blobs = Vec::new();
        for param in net.store().iter() {
            blobs.push(Blob {
                name: param.name.clone(),
                shape: param.value.shape().to_vec(),
                data: param.value.data().to_vec(),
            });
        }
        for (name, tensor) in net.state_tensors() {
            blobs.push(Blob {
                name,
                shape: tensor.shape().to_vec(),
                data: tensor.data().to_vec(),
            });
        }
        let arch = net.arch();
        Checkpoint {
            variant: arch.variant,
            width_multiplier: arch.width_multiplier,
            input_side: arch.input_side,
            iteration: net.iteration,
            channel_means,
            config_echo: config_echo.to_vec(),
            blobs,
        }
    }

    /// Copies every blob into a compatible network. The network must expose
    /// exactly the same tensor names with exactly the same shapes; the first
    /// mismatch aborts with the offending name.
    pub fn restore(&self, net: &mut Network) -> Result<()> {
        let mut remaining: std::collections::HashMap<&str, &Blob> =
            self.blobs.iter().map(|b| (b.name.as_str(), b)).collect();
        let mut copy_into = |name: &str, tensor: &mut Tensor<f32>| -> Result<()> {
            let blob = remaining.remove(name).ok_or_else(|| {
                Error::checkpoint(format!("checkpoint has no tensor named {name:?}"))
            })?;
            if blob.shape != tensor.shape() {
                return Err(Error::checkpoint(format!(
                    "shape mismatch for {name:?}: checkpoint has {:?}, network needs {:?}",
                    blob.shape,
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(&blob.data);
            Ok(())
        };
        for param in net.store_mut().iter_mut() {
            let name = param.name.clone();
            copy_into(&name, &mut param.value)?;
        }
        for (name, tensor) in net.state_tensors_mut() {
            copy_into(&name, tensor)?;
        }
        if let Some(name) = remaining.keys().min() {
            return Err(Error::checkpoint(format!(
                "checkpoint tensor {name:?} has no destination in the network"
            )));
        }
        net.iteration = self.iteration;
        Ok(())
    }

    /// Builds a fresh network of the recorded architecture and restores the
    /// saved state into it.
    pub fn build_network(&self) -> Result<Network> {
        let mut net = assemble(self.arch(), 0)?;
        self.restore(&mut net)?;
        Ok(net)
    }

    fn manifest(&self) -> String {
        let mut text = String::new();
        text.push_str(&format!("variant {}\n", self.variant.cli_name()));
        text.push_str(&format!("width_multiplier {}\n", self.width_multiplier));
        text.push_str(&format!("input_side {}\n", self.input_side));
        text.push_str(&format!("iteration {}\n", self.iteration));
        text.push_str(&format!(
            "channel_means {} {} {}\n",
            self.channel_means[0], self.channel_means[1], self.channel_means[2]
        ));
        for (key, value) in &self.config_echo {
            text.push_str(&format!("config {key}={value}\n"));
        }
        let mut offset: u64 = 0;
        for blob in &self.blobs {
            let dims: Vec<String> = blob.shape.iter().map(|d| d.to_string()).collect();
            text.push_str(&format!(
                "blob {} {} f32 {offset}\n",
                blob.name,
                dims.join("x")
            ));
            offset += 4 * blob.data.len() as u64;
        }
        text
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest().into_bytes();
        let payload: usize = self.blobs.iter().map(|b| 4 * b.data.len()).sum();
        let mut bytes = Vec::with_capacity(12 + manifest.len() + payload);
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&manifest);
        for blob in &self.blobs {
            for &v in &blob.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 12 {
            return Err(Error::checkpoint(format!(
                "file is {} bytes, shorter than the 12-byte header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::checkpoint(
                "bad magic; not a checkpoint file".to_string(),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest_end = 12usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::checkpoint("truncated manifest".to_string()))?;
        let manifest = std::str::from_utf8(&bytes[12..manifest_end])
            .map_err(|_| Error::checkpoint("manifest is not UTF-8".to_string()))?;
        let payload = &bytes[manifest_end..];

        let mut checkpoint = parse_manifest(manifest)?;
        let mut expected_offset: u64 = 0;
        for (blob, offset) in checkpoint.blobs.iter_mut().zip(blob_offsets(manifest)?) {
            if offset != expected_offset {
                return Err(Error::checkpoint(format!(
                    "blob {:?} at offset {offset}, expected {expected_offset}",
                    blob.name
                )));
            }
            let count: usize = blob.shape.iter().product();
            let start = offset as usize;
            let end = start + 4 * count;
            if end > payload.len() {
                return Err(Error::checkpoint(format!(
                    "truncated payload: blob {:?} needs bytes {start}..{end} of {}",
                    blob.name,
                    payload.len()
                )));
            }
            blob.data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::checkpoint(format!(
                "payload is {} bytes but blobs account for {expected_offset}",
                payload.len()
            )));
        }
        Ok(checkpoint)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Captures and writes a network's state in one step.
pub fn save(
    net: &Network,
    channel_means: [f32; 3],
    config_echo: &[(String, String)],
    path: &Path,
) -> Result<()> {
    Checkpoint::from_network(net, channel_means, config_echo).write(path)
}

/// Reads a checkpoint file; [`Checkpoint::build_network`] turns it into a
/// live graph.
pub fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(path)
}

fn parse_manifest(manifest: &str) -> Result<Checkpoint> {
    let bad = |what: String| Error::checkpoint(format!("manifest: {what}"));
    let mut variant = None;
    let mut width_multiplier = None;
    let mut input_side = None;
    let mut iteration = None;
    let mut channel_means = None;
    let mut config_echo = Vec::new();
    let mut blobs = Vec::new();

    for line in manifest.lines() {
        let (kind, rest) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        match kind {
            "variant" => variant = Some(rest.parse::<Variant>()?),
            "width_multiplier" => {
                width_multiplier = Some(
                    rest.parse()
                        .map_err(|_| bad(format!("bad width {rest:?}")))?,
                )
            }
            "input_side" => {
                input_side = Some(
                    rest.parse()
                        .map_err(|_| bad(format!("bad input side {rest:?}")))?,
                )
            }
            "iteration" => {
                iteration = Some(
                    rest.parse()
                        .map_err(|_| bad(format!("bad iteration {rest:?}")))?,
                )
            }
            "channel_means" => {
                let values: Vec<f32> = rest
                    .split(' ')
                    .map(|f| {
                        f.parse()
                            .map_err(|_| bad(format!("bad channel mean {f:?}")))
                    })
                    .collect::<Result<_>>()?;
                let three: [f32; 3] = values
                    .try_into()
                    .map_err(|_| bad("channel_means needs exactly 3 values".to_string()))?;
                channel_means = Some(three);
            }
            "config" => {
                let (key, value) = rest
                    .split_once('=')
                    .ok_or_else(|| bad(format!("config line without '=': {rest:?}")))?;
                config_echo.push((key.to_string(), value.to_string()));
            }
            "blob" => {
                let fields: Vec<&str> = rest.split(' ').collect();
                let [name, dims, dtype, _offset] = fields[..] else {
                    return Err(bad(format!("blob line needs 4 fields: {rest:?}")));
                };
                if dtype != "f32" {
                    return Err(bad(format!("unsupported dtype {dtype:?}")));
                }
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dimension {d:?}"))))
                    .collect::<Result<_>>()?;
                blobs.push(Blob {
                    name: name.to_string(),
                    shape,
                    data: Vec::new(),
                });
            }
            _ => return Err(bad(format!("unknown record {kind:?}"))),
        }
    }

    Ok(Checkpoint {
        variant: variant.ok_or_else(|| bad("missing variant".to_string()))?,
        width_multiplier: width_multiplier
            .ok_or_else(|| bad("missing width_multiplier".to_string()))?,
        input_side: input_side.ok_or_else(|| bad("missing input_side".to_string()))?,
        iteration: iteration.ok_or_else(|| bad("missing iteration".to_string()))?,
        channel_means: channel_means.ok_or_else(|| bad("missing channel_means".to_string()))?,
        config_echo,
        blobs,
    })
}

fn blob_offsets(manifest: &str) -> Result<Vec<u64>> {
    manifest
        .lines()
        .filter_map(|line| line.strip_prefix("blob "))
        .map(|rest| {
            let offset = rest
                .rsplit(' ')
                .next()
                .ok_or_else(|| Error::checkpoint(format!("blob line {rest:?}")))?;
            offset
                .parse()
                .map_err(|_| Error::checkpoint(format!("bad blob offset {offset:?}")))
        })
        .collect()
}
