use std::path::Path;

use dnsreg::checkpoint::{self, Checkpoint};
use dnsreg::container::{self, read_container, write_container};
use dnsreg::nifti::{self, Datatype};
use dnsreg::Error;
use dnsreg_core::masrnet::{MasrNet, NetConfig};
use dnsreg_core::metrics::LabelVolume;
use dnsreg_core::{Dims, DisplacementField, FeatureField, Volume};

fn awkward_volume() -> Volume {
    // values that are not exactly representable in f32 and odd extents
    let dims = Dims::new(3, 4, 5);
    let v = Volume::from_fn(dims, |c| ((c[0] * 20 + c[1] * 5 + c[2]) as f64 * 0.1).sin() / 3.0);
    Volume { spacing: [0.7, 1.3, 2.5], ..v }
}

#[test]
fn container_round_trip_is_bit_exact_for_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    let v = awkward_volume();
    let path = dir.path().join("v.json");
    container::save_volume(&path, &v).unwrap();
    let first = std::fs::read(container::payload_path(&path)).unwrap();
    let back = container::load_volume(&path).unwrap();
    assert_eq!(back.dims, v.dims);
    assert_eq!(back.spacing, v.spacing);
    for (a, b) in back.data.iter().zip(&v.data) {
        assert_eq!(*a, *b as f32 as f64);
    }
    container::save_volume(&path, &back).unwrap();
    assert_eq!(std::fs::read(container::payload_path(&path)).unwrap(), first);

    let phi = DisplacementField::from_fn(v.dims, |c| [c[0] as f64 * 0.3, -1.0 / 3.0, c[2] as f64]);
    let fp = dir.path().join("phi.json");
    container::save_field(&fp, &phi).unwrap();
    let c = read_container(&fp).unwrap();
    write_container(&dir.path().join("phi2.json"), &c).unwrap();
    assert_eq!(read_container(&dir.path().join("phi2.json")).unwrap().data, c.data);
    assert_eq!(container::load_field(&fp).unwrap().data.len(), 3 * v.dims.len());

    let f = FeatureField::new(v.dims, 5, (0..v.dims.len() * 5).map(|i| i as f64 / 7.0).collect()).unwrap();
    let dp = dir.path().join("d.json");
    container::save_features(&dp, &f).unwrap();
    let g = container::load_features(&dp).unwrap();
    assert_eq!(g.channels, 5);
    assert!(g.data.iter().zip(&f.data).all(|(a, b)| *a == *b as f32 as f64));

    let legend = vec![(0, "background".to_string()), (7, "organ".to_string())];
    let labels = LabelVolume::new(v.dims, (0..v.dims.len()).map(|i| if i % 3 == 0 { 7 } else { 0 }).collect(), legend).unwrap();
    let lp = dir.path().join("l.json");
    container::save_labels(&lp, &labels, v.spacing).unwrap();
    assert_eq!(container::load_labels(&lp).unwrap(), (labels, v.spacing));
}

#[test]
fn container_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.json");
    container::save_volume(&path, &awkward_volume()).unwrap();
    assert!(container::load_field(&path).is_err());
    let raw = container::payload_path(&path);
    let mut bytes = std::fs::read(&raw).unwrap();
    bytes.truncate(bytes.len() - 2);
    std::fs::write(&raw, bytes).unwrap();
    assert!(matches!(container::load_volume(&path), Err(Error::Format { .. })));
    assert!(container::save_volume(&dir.path().join("v.raw"), &awkward_volume()).is_err());
}

/// Header bytes laid out field by field from the NIfTI-1 definition.
fn fixture(datatype: i16, bitpix: i16, magic: &[u8; 4], payload: &[u8], slope: f32, inter: f32) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    for (d, x) in [3i16, 8, 8, 8, 1, 1, 1, 1].iter().enumerate() {
        h[40 + 2 * d..42 + 2 * d].copy_from_slice(&x.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    for (d, x) in [1.0f32, 2.0, 2.0, 2.0].iter().enumerate() {
        h[76 + 4 * d..80 + 4 * d].copy_from_slice(&x.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&slope.to_le_bytes());
    h[116..120].copy_from_slice(&inter.to_le_bytes());
    h[344..348].copy_from_slice(magic);
    h.extend_from_slice(payload);
    h
}

#[test]
fn nifti_fixture_float32() {
    // value = x + 10 y + 100 z with x fastest on disk
    let mut payload = Vec::new();
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                payload.extend_from_slice(&((x + 10 * y + 100 * z) as f32).to_le_bytes());
            }
        }
    }
    let bytes = fixture(16, 32, b"n+1\0", &payload, 0.0, 0.0);
    let img = nifti::parse_nifti(Path::new("fixture.nii"), &bytes).unwrap();
    assert_eq!(img.volume.dims, Dims::cube(8));
    assert_eq!(img.volume.spacing, [2.0, 2.0, 2.0]);
    assert_eq!(img.datatype, Datatype::Float32);
    assert_eq!(img.volume.get(3, 5, 7), 753.0);
    assert!(img.warnings.is_empty());
}

#[test]
fn nifti_integer_types_are_scaled() {
    let payload: Vec<u8> = (0..512).map(|i| (i % 251) as u8).collect();
    let img = nifti::parse_nifti(Path::new("u8.nii"), &fixture(2, 8, b"n+1\0", &payload, 0.5, -1.0)).unwrap();
    assert_eq!(img.datatype, Datatype::Uint8);
    assert_eq!(img.volume.get(2, 1, 0), 0.5 * 10.0 - 1.0);
    let payload: Vec<u8> = (0..512i16).flat_map(|i| (i - 300).to_le_bytes()).collect();
    let img = nifti::parse_nifti(Path::new("i16.nii"), &fixture(4, 16, b"n+1\0", &payload, 0.0, 0.0)).unwrap();
    assert_eq!(img.volume.get(0, 0, 0), -300.0);
    assert_eq!(img.volume.get(7, 7, 7), 211.0);
}

#[test]
fn nifti_rejections() {
    let payload = vec![0u8; 512 * 4];
    let two_file = fixture(16, 32, b"ni1\0", &payload, 1.0, 0.0);
    assert!(matches!(nifti::parse_nifti(Path::new("a.nii"), &two_file), Err(Error::Unsupported { .. })));
    let bad = fixture(16, 32, b"xyz\0", &payload, 1.0, 0.0);
    assert!(matches!(nifti::parse_nifti(Path::new("b.nii"), &bad), Err(Error::Format { .. })));
    let f64_type = fixture(64, 64, b"n+1\0", &payload, 1.0, 0.0);
    assert!(matches!(nifti::parse_nifti(Path::new("c.nii"), &f64_type), Err(Error::Unsupported { .. })));
    let short = fixture(16, 32, b"n+1\0", &payload[..100], 1.0, 0.0);
    assert!(matches!(nifti::parse_nifti(Path::new("d.nii"), &short), Err(Error::Format { .. })));
}

#[test]
fn nifti_write_read() {
    let dir = tempfile::tempdir().unwrap();
    let v = awkward_volume();
    let p = dir.path().join("v.nii");
    nifti::write_nifti(&p, &v).unwrap();
    let back = nifti::read_nifti(&p).unwrap().volume;
    assert_eq!(back.dims, v.dims);
    for (a, b) in back.data.iter().zip(&v.data) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert_eq!(back.spacing, v.spacing.map(|s| s as f32 as f64));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let net = MasrNet::new(NetConfig::desk(), 5).unwrap();
    let ck = Checkpoint::of(&net, &[("steps", "12".to_string())]);
    let p = dir.path().join("a.masr");
    checkpoint::save_checkpoint(&p, &ck).unwrap();
    let first = std::fs::read(&p).unwrap();
    assert_eq!(&first[..4], b"MASR");
    let loaded = checkpoint::load_checkpoint(&p).unwrap();
    assert_eq!(loaded.get("steps"), Some("12"));
    assert_eq!(loaded.net_config().unwrap(), NetConfig::desk());
    let q = dir.path().join("b.masr");
    checkpoint::save_checkpoint(&q, &loaded).unwrap();
    assert_eq!(std::fs::read(&q).unwrap(), first);
    let rebuilt = checkpoint::load_network(&p).unwrap();
    for ((n1, t1), (n2, t2)) in rebuilt.params().iter().zip(net.params().iter()) {
        assert_eq!(n1, n2);
        assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| *a == *b as f32 as f64));
    }
}

#[test]
fn checkpoint_rejects_damage() {
    let net = MasrNet::new(NetConfig::desk(), 6).unwrap();
    let bytes = checkpoint::encode(&Checkpoint::of(&net, &[]));
    let p = Path::new("x.masr");
    assert!(checkpoint::decode(p, &bytes[..bytes.len() - 1]).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(checkpoint::decode(p, &wrong).is_err());
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(checkpoint::decode(p, &version), Err(Error::Unsupported { .. })));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(checkpoint::decode(p, &trailing).is_err());
}
