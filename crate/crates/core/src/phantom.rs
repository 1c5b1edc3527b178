//! Synthetic phantoms with ground-truth labels and deformations: a body with
//! an ellipsoidal organ, a spherical tumour inside it and a curved vessel.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augmentation::{AugmentationConfig, BezierTransform};
use crate::error::{Error, Result};
use crate::metrics::{jacobian_folding, LabelVolume};
use crate::volume::{gaussian_smooth, resample_trilinear, smooth_channels, Dims, DisplacementField, Volume};

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const TUMOUR: u8 = 2;
pub const VESSEL: u8 = 3;

/// Draws allowed before [`synth_deformation`] gives up.
pub const REJECTION_TRIES: usize = 20;

const EDGE_SIGMA: f64 = 0.8;
const NOISE_LEVEL: f64 = 0.03;
const PAIR_NOISE: f64 = 0.01;
/// Relative amplitude and approximate period in voxels of the interior
/// texture of tissue and organ.
const FINE_TEXTURE: f64 = 0.5;
const FINE_TEXTURE_PERIOD: usize = 6;

pub fn legend() -> Vec<(u8, String)> {
    vec![(BACKGROUND, "background".into()), (ORGAN, "organ".into()), (TUMOUR, "tumour".into()), (VESSEL, "vessel".into())]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub seed: u64,
}

fn check_dims(dims: Dims) -> Result<()> {
    dims.ensure_positive()?;
    if dims.0.iter().any(|&n| n % 8 != 0) {
        return Err(Error::InvalidDims { dims, reason: "phantom dimensions must be multiples of 8" });
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Smooth noise in [-1, 1]: a Gaussian lattice with `lattice` nodes per
/// axis resampled trilinearly onto `dims`.
fn lattice_noise(rng: &mut ChaCha8Rng, dims: Dims, lattice: usize) -> Result<Volume> {
    let coarse = Dims::cube(lattice);
    let data = (0..coarse.len()).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
    let v = Volume::new(coarse, [1.0; 3], data)?;
    let mut up = resample_trilinear(&v, dims)?;
    up.spacing = [1.0; 3];
    let peak = up.data.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    up.data.iter_mut().for_each(|x| *x /= peak);
    Ok(up)
}

/// A random phantom; identical for identical `(seed, dims)`.
pub fn generate(seed: u64, dims: Dims) -> Result<Phantom> {
    check_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body_axes = [uniform(&mut rng, 0.42, 0.47), uniform(&mut rng, 0.42, 0.47), uniform(&mut rng, 0.42, 0.47)];
    let tissue = uniform(&mut rng, 0.18, 0.26);
    let organ_centre = [0, 1, 2].map(|_| 0.5 + uniform(&mut rng, -0.06, 0.06));
    let organ_axes = [0, 1, 2].map(|_| uniform(&mut rng, 0.2, 0.28));
    let organ_level = uniform(&mut rng, 0.5, 0.6);
    let tumour_radius = uniform(&mut rng, 0.06, 0.09);
    let room = organ_axes.iter().cloned().fold(f64::INFINITY, f64::min) - tumour_radius;
    let dir = [0, 1, 2].map(|_| StandardNormal.sample(&mut rng));
    let norm = libm::sqrt(dir.iter().map(|d: &f64| d * d).sum::<f64>()).max(1e-12);
    let reach = 0.6 * room * uniform(&mut rng, 0.0, 1.0);
    let tumour_centre = [0, 1, 2].map(|a| organ_centre[a] + dir[a] / norm * reach);
    let tumour_level = uniform(&mut rng, 0.8, 0.95);
    let vessel_base = [uniform(&mut rng, 0.3, 0.7), uniform(&mut rng, 0.3, 0.7)];
    let vessel_amp = [uniform(&mut rng, 0.05, 0.15), uniform(&mut rng, 0.05, 0.15)];
    let vessel_phase = [uniform(&mut rng, 0.0, core::f64::consts::TAU), uniform(&mut rng, 0.0, core::f64::consts::TAU)];
    let vessel_radius = uniform(&mut rng, 0.03, 0.045);
    let vessel_level = uniform(&mut rng, 0.68, 0.78);
    let texture = lattice_noise(&mut rng, dims, 4)?;
    let fine_lattice = (dims.0.iter().copied().min().unwrap_or(8) / FINE_TEXTURE_PERIOD).max(4);
    let fine = lattice_noise(&mut rng, dims, fine_lattice)?;
    let organ_fine = lattice_noise(&mut rng, dims, fine_lattice)?;

    let scale = dims.0.map(|n| if n > 1 { (n - 1) as f64 } else { 1.0 });
    let mut labels = vec![BACKGROUND; dims.len()];
    let mut base = vec![0.0; dims.len()];
    for (idx, (label, value)) in labels.iter_mut().zip(base.iter_mut()).enumerate() {
        let c = dims.coords(idx);
        let u = [c[0] as f64 / scale[0], c[1] as f64 / scale[1], c[2] as f64 / scale[2]];
        let inside = |centre: [f64; 3], axes: [f64; 3]| -> bool {
            (0..3).map(|a| ((u[a] - centre[a]) / axes[a]) * ((u[a] - centre[a]) / axes[a])).sum::<f64>() <= 1.0
        };
        if !inside([0.5; 3], body_axes) {
            continue;
        }
        *value = tissue * (1.0 + 0.25 * texture.data[idx] + FINE_TEXTURE * fine.data[idx]);
        let t = u[2];
        let path = [0, 1].map(|a| vessel_base[a] + vessel_amp[a] * libm::sin(core::f64::consts::PI * t + vessel_phase[a]));
        let dv = (u[0] - path[0]) * (u[0] - path[0]) + (u[1] - path[1]) * (u[1] - path[1]);
        if inside(tumour_centre, [tumour_radius; 3]) {
            *label = TUMOUR;
            *value = tumour_level;
        } else if dv <= vessel_radius * vessel_radius {
            *label = VESSEL;
            *value = vessel_level;
        } else if inside(organ_centre, organ_axes) {
            *label = ORGAN;
            *value = organ_level * (1.0 + FINE_TEXTURE * organ_fine.data[idx]);
        }
    }
    // the tumour always occupies at least its centre voxel
    let tc = [0, 1, 2].map(|a| (libm::round(tumour_centre[a] * scale[a]) as usize).min(dims.0[a] - 1));
    let centre_idx = dims.index(tc[0], tc[1], tc[2]);
    labels[centre_idx] = TUMOUR;
    base[centre_idx] = tumour_level;

    let smooth = gaussian_smooth(&Volume { dims, spacing: [1.0; 3], data: base }, EDGE_SIGMA)?;
    let data = smooth
        .data
        .iter()
        .map(|&x| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (x * (1.0 + NOISE_LEVEL * n)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Phantom {
        volume: Volume::new(dims, [1.0; 3], data)?,
        labels: LabelVolume::new(dims, labels, legend())?,
        seed,
    })
}

/// Per-phantom seeds for a corpus drawn from one master seed.
pub fn corpus_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// Smooth random displacement with largest magnitude `amplitude` voxels and
/// no folding, by rejection.
pub fn synth_deformation(seed: u64, dims: Dims, amplitude: f64, sigma: f64) -> Result<DisplacementField> {
    dims.ensure_positive()?;
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!("amplitude must be >= 0, got {amplitude}")));
    }
    if amplitude == 0.0 {
        return Ok(DisplacementField::zeros(dims));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!("sigma must be >= 0, got {sigma}")));
    }
    let pad = libm::ceil(3.0 * sigma) as usize;
    let padded = Dims(dims.0.map(|n| n + 2 * pad));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..REJECTION_TRIES {
        // smoothed on a padded grid and cropped so the borders carry no
        // replication artefacts
        let noise: Vec<f64> = (0..3 * padded.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let smooth = smooth_channels(&noise, padded, 3, sigma)?;
        let mut data = Vec::with_capacity(3 * dims.len());
        for v in 0..dims.len() {
            let c = dims.coords(v);
            let src = padded.index(c[0] + pad, c[1] + pad, c[2] + pad);
            data.extend_from_slice(&smooth[3 * src..3 * src + 3]);
        }
        let field = DisplacementField { dims, data: data.clone() };
        let peak = field.max_magnitude();
        if peak <= 0.0 {
            continue;
        }
        data.iter_mut().for_each(|x| *x *= amplitude / peak);
        let field = DisplacementField::new(dims, data)?;
        if jacobian_folding(&field)?.folding_percent == 0.0 {
            return Ok(field);
        }
    }
    Err(Error::RejectionFailed(REJECTION_TRIES))
}

/// A second modality of a phantom: an inverted random Bezier intensity map
/// plus independent noise. Geometry is untouched.
pub fn make_modality_pair(ph: &Phantom, seed: u64) -> Result<(Volume, Volume)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = BezierTransform::sample(&AugmentationConfig::default(), &mut rng)?;
    let curve = BezierTransform::new(sampled.control_points().to_vec(), true)?;
    let mut second = curve.apply(&ph.volume)?;
    for x in second.data.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *x = (*x + PAIR_NOISE * n).clamp(0.0, 1.0);
    }
    Ok((ph.volume.clone(), second))
}

#[cfg(test)]
mod tests;
