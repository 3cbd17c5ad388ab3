//! Binary model container.
//!
//! Layout (all integers `u32` little-endian):
//! `"FSAT"`, version, config block `[C, Cin, n_fsat, M, groups, structure tag]`,
//! then records `{name_len, name, rank, dims[rank], f32 data}` until EOF.

use std::collections::HashSet;
use std::path::Path;

use super::{ModelParams, Network, NetworkConfig, StructureRegistry};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const MAGIC: [u8; 4] = *b"FSAT";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_model<T: Real>(
    path: &Path,
    network: &Network<T>,
    params: &ModelParams<T>,
) -> Result<()> {
    network.check_params(params)?;
    std::fs::write(path, encode(network, params))?;
    Ok(())
}

fn encode<T: Real>(network: &Network<T>, params: &ModelParams<T>) -> Vec<u8> {
    let cfg = network.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    let header = [
        FORMAT_VERSION,
        cfg.channels as u32,
        cfg.in_channels as u32,
        cfg.n_fsat as u32,
        cfg.window as u32,
        cfg.groups as u32,
        network.structure().tag(),
    ];
    for v in header {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (name, t) in params.named() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    buf
}

struct Record {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

struct Header {
    channels: usize,
    in_channels: usize,
    n_fsat: usize,
    window: usize,
    groups: usize,
    tag: u32,
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<Record>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = cur.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut field = |what| cur.u32(what).map(|v| v as usize);
    let header = Header {
        channels: field("config block")?,
        in_channels: field("config block")?,
        n_fsat: field("config block")?,
        window: field("config block")?,
        groups: field("config block")?,
        tag: cur.u32("config block")?,
    };
    let mut records = Vec::new();
    while !cur.at_end() {
        let len = cur.u32("record name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "record name")?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32(&format!("rank of `{name}`"))? as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32(&format!("dims of `{name}`"))? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * 4, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(Record { name, dims, data });
    }
    Ok((header, records))
}

/// Fills the parameter layout of `network` from decoded records.
fn assign<T: Real>(network: &Network<T>, records: Vec<Record>) -> Result<ModelParams<T>> {
    let mut params = network.zero_params();
    let mut seen = HashSet::new();
    {
        let mut slots = params.named_mut();
        for rec in records {
            let slot = slots.iter_mut().find(|(n, _)| *n == rec.name);
            let Some((_, t)) = slot else {
                return Err(Error::ParamShape {
                    name: rec.name,
                    found: format!("{:?}", rec.dims),
                    expected: "no such tensor".into(),
                });
            };
            if t.shape() != rec.dims.as_slice() {
                return Err(Error::ParamShape {
                    name: rec.name,
                    found: format!("{:?}", rec.dims),
                    expected: format!("{:?}", t.shape()),
                });
            }
            for (d, s) in t.data_mut().iter_mut().zip(&rec.data) {
                *d = T::lit(*s as f64);
            }
            seen.insert(rec.name);
        }
    }
    if let Some((name, t)) = params.named().into_iter().find(|(n, _)| !seen.contains(n)) {
        return Err(Error::ParamShape {
            name,
            found: "no such tensor".into(),
            expected: format!("{:?}", t.shape()),
        });
    }
    Ok(params)
}

/// Reads a model file, rebuilding its network configuration from the
/// header. Pre-normalization is on when the file carries norm tensors.
pub fn read_model<T: Real>(
    path: &Path,
    registry: &StructureRegistry<T>,
) -> Result<(Network<T>, ModelParams<T>)> {
    let bytes = std::fs::read(path)?;
    let (h, records) = decode(&bytes)?;
    let structure = registry.by_tag(h.tag)?;
    let config = NetworkConfig {
        channels: h.channels,
        in_channels: h.in_channels,
        n_fsat: h.n_fsat,
        window: h.window,
        groups: h.groups,
        structure: structure.name().to_string(),
        pre_norm: records.iter().any(|r| r.name.ends_with(".norm1.gamma"))
            || !structure.components().itm,
    };
    let network = Network::with_registry(config, registry)?;
    let params = assign(&network, records)?;
    Ok((network, params))
}

impl<T: Real> Network<T> {
    pub fn save(&self, path: &Path, params: &ModelParams<T>) -> Result<()> {
        write_model(path, self, params)
    }

    /// Loads a file's tensors into this network's layout; every tensor must
    /// be present with the shape this configuration expects.
    pub fn load(&self, path: &Path) -> Result<ModelParams<T>> {
        let bytes = std::fs::read(path)?;
        let (_, records) = decode(&bytes)?;
        assign(self, records)
    }
}
