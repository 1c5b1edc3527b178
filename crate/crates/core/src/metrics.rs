//! Evaluation: overlap and surface distance of label masks, Jacobian folding,
//! feature-similarity heatmaps and rotation loss landscapes.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::{spatial_gradient, trilinear_sample, warp_nearest, BinaryMask, Dims, DisplacementField, FeatureField, Volume};

/// Cosine norms below this are treated as this value.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// One small-integer label per voxel with a name for every label in use.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LabelVolume {
    pub dims: Dims,
    pub data: Vec<u8>,
    pub legend: Vec<(u8, String)>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u8>, legend: Vec<(u8, String)>) -> Result<Self> {
        dims.ensure_positive()?;
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch {
                op: "LabelVolume::new",
                detail: alloc::format!("{} labels for {} voxels", data.len(), dims.len()),
            });
        }
        if let Some(bad) = data.iter().find(|l| !legend.iter().any(|(k, _)| k == *l)) {
            return Err(Error::InvalidArgument(alloc::format!("label {bad} is not in the legend")));
        }
        Ok(LabelVolume { dims, data, legend })
    }

    pub fn mask(&self, label: u8) -> BinaryMask {
        BinaryMask { dims: self.dims, data: self.data.iter().map(|&l| l == label).collect() }
    }

    pub fn name(&self, label: u8) -> Option<&str> {
        self.legend.iter().find(|(k, _)| *k == label).map(|(_, n)| n.as_str())
    }

    /// Nearest-neighbour warp, `out(x) = labels(x + phi(x))`.
    pub fn warped(&self, phi: &DisplacementField) -> Result<LabelVolume> {
        let data = warp_nearest(&self.data, self.dims, phi)?;
        Ok(LabelVolume { dims: self.dims, data, legend: self.legend.clone() })
    }
}

/// `2|a & b| / (|a| + |b|)`; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.dims.ensure_same(b.dims)?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mask voxels with at least one background (or out-of-grid) 6-neighbour.
pub fn surface(m: &BinaryMask) -> Vec<[usize; 3]> {
    let dims = m.dims;
    let mut out = Vec::new();
    for idx in 0..dims.len() {
        if !m.data[idx] {
            continue;
        }
        let c = dims.coords(idx);
        let on_surface = (0..3).any(|a| {
            [-1isize, 1].iter().any(|&s| {
                let q = c[a] as isize + s;
                if q < 0 || q >= dims.0[a] as isize {
                    return true;
                }
                let mut n = c;
                n[a] = q as usize;
                !m.data[dims.index(n[0], n[1], n[2])]
            })
        });
        if on_surface {
            out.push(c);
        }
    }
    out
}

fn nearest_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            let best = to.iter().fold(f64::INFINITY, |best, q| {
                let d2: f64 = (0..3)
                    .map(|a| {
                        let d = (p[a] as f64 - q[a] as f64) * spacing[a];
                        d * d
                    })
                    .sum();
                best.min(d2)
            });
            libm::sqrt(best)
        })
        .collect()
}

/// 95th percentile (nearest rank) of the surface-to-surface nearest-neighbour
/// distances taken in both directions, in millimetres.
pub fn hd95(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    a.dims.ensure_same(b.dims)?;
    if a.count() == 0 {
        return Err(Error::EmptyMask("first hd95 operand"));
    }
    if b.count() == 0 {
        return Err(Error::EmptyMask("second hd95 operand"));
    }
    let (sa, sb) = (surface(a), surface(b));
    let mut d = nearest_distances(&sa, &sb, spacing);
    d.extend(nearest_distances(&sb, &sa, spacing));
    d.sort_by(f64::total_cmp);
    let rank = libm::ceil(0.95 * d.len() as f64) as usize;
    Ok(d[rank.max(1) - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianReport {
    /// `det(I + du/dx)` per voxel.
    pub determinant: Volume,
    /// Percentage of interior voxels with a non-positive determinant.
    pub folding_percent: f64,
}

/// Determinant of the deformation Jacobian and the share of folded
/// interior voxels (`det <= 0`).
pub fn jacobian_folding(phi: &DisplacementField) -> Result<JacobianReport> {
    let jac = spatial_gradient(phi)?;
    let dims = phi.dims;
    let mut det = Vec::with_capacity(dims.len());
    let (mut interior, mut folded) = (0usize, 0usize);
    for (idx, j) in jac.iter().enumerate() {
        let m = [
            [1.0 + j[0][0], j[0][1], j[0][2]],
            [j[1][0], 1.0 + j[1][1], j[1][2]],
            [j[2][0], j[2][1], 1.0 + j[2][2]],
        ];
        let d = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        det.push(d);
        if dims.is_interior(dims.coords(idx)) {
            interior += 1;
            if d <= 0.0 {
                folded += 1;
            }
        }
    }
    let folding_percent = if interior == 0 { 0.0 } else { 100.0 * folded as f64 / interior as f64 };
    Ok(JacobianReport { determinant: Volume { dims, spacing: [1.0; 3], data: det }, folding_percent })
}

/// Cosine of two vectors with norms floored at [`COSINE_NORM_FLOOR`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>()).max(COSINE_NORM_FLOOR);
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>()).max(COSINE_NORM_FLOOR);
    dot / (na * nb)
}

/// Cosine similarity between the source vector at `at` and every target vector.
pub fn similarity_heatmap(src: &FeatureField, tgt: &FeatureField, at: [usize; 3]) -> Result<Volume> {
    if src.channels != tgt.channels {
        return Err(Error::ShapeMismatch {
            op: "similarity_heatmap",
            detail: alloc::format!("{} vs {} channels", src.channels, tgt.channels),
        });
    }
    if (0..3).any(|a| at[a] >= src.dims.0[a]) {
        return Err(Error::InvalidArgument(alloc::format!("marked voxel {at:?} outside {:?}", src.dims)));
    }
    let q = src.vector(src.dims.index(at[0], at[1], at[2]));
    let data = (0..tgt.dims.len()).map(|v| cosine(q, tgt.vector(v))).collect();
    Ok(Volume { dims: tgt.dims, spacing: [1.0; 3], data })
}

fn rotation(angles_deg: [f64; 2]) -> [[f64; 3]; 3] {
    let (a, b) = (angles_deg[0].to_radians(), angles_deg[1].to_radians());
    let (sa, ca) = (libm::sin(a), libm::cos(a));
    let (sb, cb) = (libm::sin(b), libm::cos(b));
    // about axis 0 (mixing axes 1 and 2), then about axis 1 (mixing axes 0 and 2)
    let r0 = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let r1 = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| r1[i][k] * r0[k][j]).sum();
        }
    }
    r
}

/// Rotation of a volume about its centre by two angles in degrees: first
/// about axis 0, then about axis 1. Trilinear resampling with border
/// replication, clamped to the range of `v`.
pub fn rotate(v: &Volume, angles_deg: [f64; 2]) -> Volume {
    let r = rotation(angles_deg);
    let (lo, hi) = v.min_max();
    let c: Vec<f64> = v.dims.0.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect();
    let data = (0..v.dims.len())
        .map(|idx| {
            let x = v.dims.coords(idx);
            let d = [x[0] as f64 - c[0], x[1] as f64 - c[1], x[2] as f64 - c[2]];
            // inverse rotation is the transpose
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = c[a] + (0..3).map(|k| r[k][a] * d[k]).sum::<f64>();
            }
            trilinear_sample(v, p).clamp(lo, hi)
        })
        .collect();
    Volume { dims: v.dims, spacing: v.spacing, data }
}

/// Angles `min, min + step, ..., max` (inclusive).
pub fn angle_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(max >= min) {
        return Err(Error::InvalidArgument(alloc::format!("bad angle grid {min}..{max} step {step}")));
    }
    let n = libm::floor((max - min) / step + 1e-9) as usize + 1;
    Ok((0..n).map(|i| min + i as f64 * step).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandscapeRow {
    pub angle1: f64,
    pub angle2: f64,
    pub cost: f64,
}

/// Evaluates `cost` on `moving` rotated to every pair of grid angles.
pub fn loss_landscape(moving: &Volume, angles: &[f64], mut cost: impl FnMut(&Volume) -> Result<f64>) -> Result<Vec<LandscapeRow>> {
    let mut rows = Vec::with_capacity(angles.len() * angles.len());
    for &a in angles {
        for &b in angles {
            let rotated = if a == 0.0 && b == 0.0 { moving.clone() } else { rotate(moving, [a, b]) };
            rows.push(LandscapeRow { angle1: a, angle2: b, cost: cost(&rotated)? });
        }
    }
    Ok(rows)
}

/// Row with the smallest cost (first on ties).
pub fn landscape_argmin(rows: &[LandscapeRow]) -> Option<LandscapeRow> {
    rows.iter().copied().fold(None, |best: Option<LandscapeRow>, r| match best {
        Some(b) if b.cost <= r.cost => Some(b),
        _ => Some(r),
    })
}

/// Row with the largest cost (first on ties).
pub fn landscape_argmax(rows: &[LandscapeRow]) -> Option<LandscapeRow> {
    rows.iter().copied().fold(None, |best: Option<LandscapeRow>, r| match best {
        Some(b) if b.cost >= r.cost => Some(b),
        _ => Some(r),
    })
}

#[cfg(test)]
mod tests;
