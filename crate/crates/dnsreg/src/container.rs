//! Native volume container: a JSON sidecar `name.json` describing a raw
//! little-endian `f32` payload `name.raw`, row-major with channels last.

use std::fs;
use std::path::{Path, PathBuf};

use dnsreg_core::metrics::LabelVolume;
use dnsreg_core::{Dims, DisplacementField, FeatureField, Volume};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Intensity,
    Label,
    Displacement,
    Dsir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub channels: usize,
    /// Voxel size in millimetres.
    pub spacing: [f64; 3],
    pub kind: ValueKind,
    /// Payload file name, relative to the sidecar's directory.
    pub payload: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub legend: Vec<(u8, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub sidecar: Sidecar,
    pub data: Vec<f32>,
}

impl Container {
    fn new(dims: Dims, channels: usize, spacing: [f64; 3], kind: ValueKind, data: impl Iterator<Item = f64>) -> Self {
        Container {
            sidecar: Sidecar { dims: dims.0, channels, spacing, kind, payload: String::new(), legend: Vec::new() },
            data: data.map(|x| x as f32).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims(self.sidecar.dims)
    }

    fn expect(&self, path: &Path, kind: ValueKind, channels: Option<usize>) -> Result<()> {
        if self.sidecar.kind != kind {
            return Err(Error::format(path, format!("expected a {kind:?} container, found {:?}", self.sidecar.kind)));
        }
        if let Some(c) = channels {
            if self.sidecar.channels != c {
                return Err(Error::format(path, format!("expected {c} channels, found {}", self.sidecar.channels)));
            }
        }
        Ok(())
    }

    fn values(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }
}

/// Payload path belonging to a sidecar path.
pub fn payload_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("raw")
}

fn check_sidecar_path(path: &Path) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) != Some("json") {
        return Err(Error::Usage(format!("{}: container sidecars must end in .json", path.display())));
    }
    Ok(())
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    check_sidecar_path(path)?;
    let expected = c.sidecar.dims.iter().product::<usize>() * c.sidecar.channels;
    if c.data.len() != expected {
        return Err(Error::format(path, format!("{} values for a {expected}-value container", c.data.len())));
    }
    let payload = payload_path(path);
    let mut sidecar = c.sidecar.clone();
    sidecar.payload = payload.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let mut bytes = Vec::with_capacity(4 * c.data.len());
    for x in &c.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Sidecar { path: path.into(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    check_sidecar_path(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Sidecar { path: path.into(), source: e })?;
    if sidecar.dims.contains(&0) || sidecar.channels == 0 {
        return Err(Error::format(path, format!("non-positive shape {:?} x {}", sidecar.dims, sidecar.channels)));
    }
    let payload = match Path::new(&sidecar.payload).file_name() {
        Some(name) => path.with_file_name(name),
        None => payload_path(path),
    };
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let expected = sidecar.dims.iter().product::<usize>() * sidecar.channels * 4;
    if bytes.len() != expected {
        return Err(Error::format(&payload, format!("payload has {} bytes, expected {expected}", bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Container { sidecar, data })
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    write_container(path, &Container::new(v.dims, 1, v.spacing, ValueKind::Intensity, v.data.iter().copied()))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let c = read_container(path)?;
    c.expect(path, ValueKind::Intensity, Some(1))?;
    Ok(Volume::new(c.dims(), c.sidecar.spacing, c.values())?)
}

pub fn save_labels(path: &Path, l: &LabelVolume, spacing: [f64; 3]) -> Result<()> {
    let mut c = Container::new(l.dims, 1, spacing, ValueKind::Label, l.data.iter().map(|&x| x as f64));
    c.sidecar.legend = l.legend.clone();
    write_container(path, &c)
}

/// Labels with the voxel spacing recorded in the sidecar.
pub fn load_labels(path: &Path) -> Result<(LabelVolume, [f64; 3])> {
    let c = read_container(path)?;
    c.expect(path, ValueKind::Label, Some(1))?;
    let mut data = Vec::with_capacity(c.data.len());
    for &x in &c.data {
        if x.fract() != 0.0 || !(0.0..=255.0).contains(&x) {
            return Err(Error::format(path, format!("label value {x} is not an integer in 0..=255")));
        }
        data.push(x as u8);
    }
    let spacing = c.sidecar.spacing;
    Ok((LabelVolume::new(c.dims(), data, c.sidecar.legend)?, spacing))
}

pub fn save_field(path: &Path, phi: &DisplacementField) -> Result<()> {
    write_container(path, &Container::new(phi.dims, 3, [1.0; 3], ValueKind::Displacement, phi.data.iter().copied()))
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    let c = read_container(path)?;
    c.expect(path, ValueKind::Displacement, Some(3))?;
    Ok(DisplacementField::new(c.dims(), c.values())?)
}

pub fn save_features(path: &Path, f: &FeatureField) -> Result<()> {
    write_container(path, &Container::new(f.dims, f.channels, [1.0; 3], ValueKind::Dsir, f.data.iter().copied()))
}

pub fn load_features(path: &Path) -> Result<FeatureField> {
    let c = read_container(path)?;
    c.expect(path, ValueKind::Dsir, None)?;
    Ok(FeatureField::new(c.dims(), c.sidecar.channels, c.values())?)
}
