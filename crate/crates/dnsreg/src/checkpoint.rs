//! Network checkpoints.
//!
//! Layout, all integers `u32` little-endian: magic `MASR`, format version,
//! metadata count, then `(key, value)` string pairs, parameter count, then
//! per parameter its name, rank, extents and `f32` values. Strings are a
//! byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use dnsreg_core::autodiff::{ParamStore, Tensor};
use dnsreg_core::masrnet::{MasrNet, NetConfig};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MASR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Parameters of `net` with its architecture in the metadata, followed
    /// by `extra` entries.
    pub fn of(net: &MasrNet, extra: &[(&str, String)]) -> Self {
        let c = net.config();
        let mut metadata = vec![
            ("widths".to_string(), c.widths.map(|w| w.to_string()).join(",")),
            ("feature_channels".to_string(), c.feature_channels.to_string()),
            ("descriptor_channels".to_string(), c.descriptor_channels.to_string()),
            ("leaky_slope".to_string(), c.leaky_slope.to_string()),
        ];
        metadata.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        Checkpoint { metadata, params: net.params().clone() }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn net_config(&self) -> std::result::Result<NetConfig, String> {
        let field = |k: &str| self.get(k).ok_or_else(|| format!("missing metadata key {k:?}"));
        let widths: Vec<usize> =
            field("widths")?.split(',').map(|w| w.trim().parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(|e| e.to_string())?;
        let widths: [usize; 4] = widths.try_into().map_err(|w: Vec<usize>| format!("{} widths, expected 4", w.len()))?;
        Ok(NetConfig {
            widths,
            feature_channels: field("feature_channels")?.parse().map_err(|e| format!("feature_channels: {e}"))?,
            descriptor_channels: field("descriptor_channels")?.parse().map_err(|e| format!("descriptor_channels: {e}"))?,
            leaky_slope: field("leaky_slope")?.parse().map_err(|e| format!("leaky_slope: {e}"))?,
        })
    }

    pub fn into_net(self, path: &Path) -> Result<MasrNet> {
        let config = self.net_config().map_err(|e| Error::format(path, e))?;
        Ok(MasrNet::from_params(config, self.params)?)
    }
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * c.params.num_values());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, c.metadata.len() as u32);
    for (k, v) in &c.metadata {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    put_u32(&mut out, c.params.len() as u32);
    for (name, t) in c.params.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len() as u32);
        for &e in t.shape() {
            put_u32(&mut out, e as u32);
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let path = self.path;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(path, "string is not UTF-8"))
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Unsupported { path: path.into(), reason: format!("checkpoint version {version}") });
    }
    let mut metadata = Vec::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        metadata.push((k, v));
    }
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| Error::format(path, "shape overflow"))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format(path, "shape overflow"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        if params.index_of(&name).is_some() {
            return Err(Error::format(path, format!("duplicate parameter {name:?}")));
        }
        params.insert(&name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { metadata, params })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    fs::write(path, encode(c)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Loads a checkpoint and rebuilds the network it describes.
pub fn load_network(path: &Path) -> Result<MasrNet> {
    load_checkpoint(path)?.into_net(path)
}
