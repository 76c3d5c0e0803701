//! Parameter checkpoints: one line of JSON header, then the parameters as
//! little-endian `f32` in header tensor order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NetConfig, Network, TensorInfo};

pub const FORMAT_TAG: &str = "remask-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Generator,
    Selector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: NetConfig,
    pub tensors: Vec<TensorInfo>,
}

pub fn write_checkpoint<W: Write>(mut out: W, kind: CheckpointKind, net: &Network) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT_TAG.into(),
        version: 1,
        kind,
        config: net.config().clone(),
        tensors: net.tensor_infos(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(net.params().len() * 4);
    for &p in net.params() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(CheckpointKind, Network)> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Parse(format!("not a checkpoint (format {:?})", header.format)));
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if body.len() != expected * 4 {
        return Err(Error::Parse(format!(
            "checkpoint body holds {} bytes, header describes {} floats",
            body.len(),
            expected
        )));
    }
    let params: Vec<f64> =
        body.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    let net = Network::from_parts(header.config, params)?;
    if net.tensor_infos() != header.tensors {
        return Err(Error::Parse("checkpoint tensor table does not match its config".into()));
    }
    Ok((header.kind, net))
}

pub fn save(path: impl AsRef<Path>, kind: CheckpointKind, net: &Network) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, kind, net)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(CheckpointKind, Network)> {
    read_checkpoint(std::fs::File::open(path)?)
}

/// Loads a checkpoint and checks its kind tag.
pub fn load_kind(path: impl AsRef<Path>, kind: CheckpointKind) -> Result<Network> {
    let (found, net) = load(path)?;
    if found != kind {
        return Err(Error::Config(format!("expected a {kind:?} checkpoint, found {found:?}")));
    }
    Ok(net)
}
