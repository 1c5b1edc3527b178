//! Dense 3D containers and the geometric kernels shared by every other module:
//! trilinear sampling, warping, Gaussian smoothing, resampling and finite
//! difference gradients.
//!
//! All containers are row-major with axis 0 slowest and axis 2 fastest.
//! Multi-channel fields store their channels last, so the vector at a voxel is
//! a contiguous slice. Out-of-domain reads replicate the border.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Extents of a 3D grid, `[H, W, D]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub const fn new(h: usize, w: usize, d: usize) -> Self {
        Dims([h, w, d])
    }

    pub const fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.0[1] + j) * self.0[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.0[2];
        let rest = idx / self.0[2];
        [rest / self.0[1], rest % self.0[1], k]
    }

    /// Flat index of `c + offset`, clamped to the grid.
    #[inline]
    pub fn clamped_index(&self, c: [usize; 3], offset: [isize; 3]) -> usize {
        let mut q = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as isize + offset[a];
            q[a] = v.clamp(0, self.0[a] as isize - 1) as usize;
        }
        self.index(q[0], q[1], q[2])
    }

    /// Whether a voxel lies at least one voxel away from every face.
    #[inline]
    pub fn is_interior(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= 1 && c[a] + 1 < self.0[a])
    }

    pub fn ensure_positive(&self) -> Result<()> {
        if self.0.iter().any(|&n| n == 0) {
            return Err(Error::InvalidDims { dims: *self, reason: "zero extent" });
        }
        Ok(())
    }

    pub fn ensure_same(&self, other: Dims) -> Result<()> {
        if *self != other {
            return Err(Error::DimMismatch(*self, other));
        }
        Ok(())
    }

    /// Dims scaled by `factor`, rounded to the nearest voxel and at least 2.
    pub fn scaled(&self, factor: f64) -> Dims {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let n = libm::round(self.0[a] as f64 * factor) as usize;
            out[a] = n.max(2).min(self.0[a].max(2));
        }
        Dims(out)
    }
}

/// Scalar 3D image with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        dims.ensure_positive()?;
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch {
                op: "Volume::new",
                detail: alloc::format!("{} values for {} voxels", data.len(), dims.len()),
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("spacing must be positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Volume::new"));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume { dims, spacing: [1.0; 3], data: vec![0.0; dims.len()] }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Volume { dims, spacing: [1.0; 3], data: vec![value; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for i in 0..dims.0[0] {
            for j in 0..dims.0[1] {
                for k in 0..dims.0[2] {
                    data.push(f([i, j, k]));
                }
            }
        }
        Volume { dims, spacing: [1.0; 3], data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Min-max normalization to `[0, 1]`; a constant volume maps to zeros.
    pub fn normalized(&self) -> Volume {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume { dims: self.dims, spacing: self.spacing, data }
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

/// Per-voxel displacement in voxel units, stored as `[u0, u1, u2]` triples.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        dims.ensure_positive()?;
        if data.len() != 3 * dims.len() {
            return Err(Error::ShapeMismatch {
                op: "DisplacementField::new",
                detail: alloc::format!("{} values for {} voxels", data.len(), dims.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DisplacementField::new"));
        }
        Ok(DisplacementField { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        DisplacementField { dims, data: vec![0.0; 3 * dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * dims.len());
        for i in 0..dims.0[0] {
            for j in 0..dims.0[1] {
                for k in 0..dims.0[2] {
                    data.extend_from_slice(&f([i, j, k]));
                }
            }
        }
        DisplacementField { dims, data }
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [f64; 3] {
        [self.data[3 * idx], self.data[3 * idx + 1], self.data[3 * idx + 2]]
    }

    /// Largest Euclidean displacement magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.data
            .chunks_exact(3)
            .map(|u| libm::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]))
            .fold(0.0, f64::max)
    }

    /// Mean displacement magnitude, optionally restricted to a mask.
    pub fn mean_magnitude(&self, mask: Option<&BinaryMask>) -> f64 {
        mean_endpoint_error_impl(self, None, mask)
    }

    /// Mean Euclidean distance between two fields, optionally restricted to a mask.
    pub fn mean_endpoint_error(&self, other: &DisplacementField, mask: Option<&BinaryMask>) -> Result<f64> {
        self.dims.ensure_same(other.dims)?;
        Ok(mean_endpoint_error_impl(self, Some(other), mask))
    }

    /// Trilinear upsampling to `new_dims` with displacement values rescaled
    /// by the per-axis resolution ratio.
    pub fn resampled(&self, new_dims: Dims) -> Result<DisplacementField> {
        let mut data = resample_channels(&self.data, self.dims, 3, new_dims)?;
        let mut ratio = [1.0; 3];
        for a in 0..3 {
            if self.dims.0[a] > 1 && new_dims.0[a] > 1 {
                ratio[a] = (new_dims.0[a] - 1) as f64 / (self.dims.0[a] - 1) as f64;
            }
        }
        for u in data.chunks_exact_mut(3) {
            for a in 0..3 {
                u[a] *= ratio[a];
            }
        }
        Ok(DisplacementField { dims: new_dims, data })
    }
}

fn mean_endpoint_error_impl(a: &DisplacementField, b: Option<&DisplacementField>, mask: Option<&BinaryMask>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in 0..a.dims.len() {
        if let Some(m) = mask {
            if !m.data[v] {
                continue;
            }
        }
        let mut d2 = 0.0;
        for c in 0..3 {
            let diff = a.data[3 * v + c] - b.map_or(0.0, |b| b.data[3 * v + c]);
            d2 += diff * diff;
        }
        sum += libm::sqrt(d2);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// One boolean per voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub dims: Dims,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch {
                op: "BinaryMask::new",
                detail: alloc::format!("{} values for {} voxels", data.len(), dims.len()),
            });
        }
        Ok(BinaryMask { dims, data })
    }

    pub fn filled(dims: Dims, value: bool) -> Self {
        BinaryMask { dims, data: vec![value; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let data = (0..dims.len()).map(|v| f(dims.coords(v))).collect();
        BinaryMask { dims, data }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    /// Voxels above `threshold` after min-max normalization.
    pub fn foreground(v: &Volume, threshold: f64) -> Self {
        let n = v.normalized();
        BinaryMask { dims: v.dims, data: n.data.iter().map(|&x| x > threshold).collect() }
    }
}

/// Multi-channel field with channels last (`H x W x D x C`). Houses DSIRs and
/// MIND descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub dims: Dims,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureField {
    pub fn new(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() * channels || channels == 0 {
            return Err(Error::ShapeMismatch {
                op: "FeatureField::new",
                detail: alloc::format!("{} values for {} voxels x {} channels", data.len(), dims.len(), channels),
            });
        }
        Ok(FeatureField { dims, channels, data })
    }

    /// Builds a channels-last field from channel-first data `[C, H, W, D]`.
    pub fn from_channel_first(dims: Dims, channels: usize, data: &[f64]) -> Result<Self> {
        let n = dims.len();
        if data.len() != n * channels {
            return Err(Error::ShapeMismatch {
                op: "FeatureField::from_channel_first",
                detail: alloc::format!("{} values for {} voxels x {} channels", data.len(), n, channels),
            });
        }
        let mut out = vec![0.0; data.len()];
        for c in 0..channels {
            for v in 0..n {
                out[v * channels + c] = data[c * n + v];
            }
        }
        Ok(FeatureField { dims, channels, data: out })
    }

    #[inline]
    pub fn vector(&self, v: usize) -> &[f64] {
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    pub fn channel(&self, c: usize) -> Volume {
        let data = (0..self.dims.len()).map(|v| self.data[v * self.channels + c]).collect();
        Volume { dims: self.dims, spacing: [1.0; 3], data }
    }

    pub fn resampled(&self, new_dims: Dims) -> Result<FeatureField> {
        let data = resample_channels(&self.data, self.dims, self.channels, new_dims)?;
        Ok(FeatureField { dims: new_dims, channels: self.channels, data })
    }

    pub fn smoothed(&self, sigma: f64) -> Result<FeatureField> {
        let data = smooth_channels(&self.data, self.dims, self.channels, sigma)?;
        Ok(FeatureField { dims: self.dims, channels: self.channels, data })
    }
}

/// Eight-corner trilinear stencil at a continuous coordinate, with border
/// clamping. `dw[n][a]` is the derivative of weight `n` along axis `a`; it is
/// zero along axes where the coordinate was clamped.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 3]; 8],
}

impl Stencil {
    #[inline]
    pub fn at(dims: Dims, p: [f64; 3]) -> Stencil {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0f64; 3];
        let mut active = [0.0f64; 3];
        for a in 0..3 {
            let n = dims.0[a];
            if n == 1 {
                continue;
            }
            let max = (n - 1) as f64;
            let pa = p[a];
            let pc = if pa <= 0.0 {
                0.0
            } else if pa >= max {
                max
            } else {
                active[a] = 1.0;
                pa
            };
            let i0 = (libm::floor(pc) as usize).min(n - 2);
            lo[a] = i0;
            hi[a] = i0 + 1;
            t[a] = pc - i0 as f64;
        }
        let mut s = Stencil { idx: [0; 8], w: [0.0; 8], dw: [[0.0; 3]; 8] };
        for n in 0..8 {
            let bits = [(n >> 2) & 1, (n >> 1) & 1, n & 1];
            let mut c = [0usize; 3];
            let mut f = [0.0f64; 3];
            let mut df = [0.0f64; 3];
            for a in 0..3 {
                if bits[a] == 1 {
                    c[a] = hi[a];
                    f[a] = t[a];
                    df[a] = active[a];
                } else {
                    c[a] = lo[a];
                    f[a] = 1.0 - t[a];
                    df[a] = -active[a];
                }
            }
            s.idx[n] = dims.index(c[0], c[1], c[2]);
            s.w[n] = f[0] * f[1] * f[2];
            s.dw[n] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
        }
        s
    }

    #[inline]
    pub fn sample(&self, data: &[f64]) -> f64 {
        let mut acc = 0.0;
        for n in 0..8 {
            acc += self.w[n] * data[self.idx[n]];
        }
        acc
    }

    /// Interpolates every channel of a channels-last field into `out`, and
    /// the coordinate gradient of each channel into `grad` when given.
    #[inline]
    pub fn sample_channels(&self, data: &[f64], channels: usize, out: &mut [f64], mut grad: Option<&mut [[f64; 3]]>) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|o| *o = [0.0; 3]);
        }
        for n in 0..8 {
            let base = self.idx[n] * channels;
            let w = self.w[n];
            let src = &data[base..base + channels];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += w * v;
            }
            if let Some(g) = grad.as_deref_mut() {
                let dw = self.dw[n];
                for (gc, &v) in g.iter_mut().zip(src) {
                    gc[0] += dw[0] * v;
                    gc[1] += dw[1] * v;
                    gc[2] += dw[2] * v;
                }
            }
        }
    }
}

/// Trilinear interpolation at a continuous voxel coordinate; coordinates
/// outside the grid are clamped to the border.
pub fn trilinear_sample(v: &Volume, p: [f64; 3]) -> f64 {
    Stencil::at(v.dims, p).sample(&v.data)
}

/// `out(x) = v(x + phi(x))` with trilinear interpolation. Results are
/// clamped to the range of `v` to absorb rounding in the weights.
pub fn warp(v: &Volume, phi: &DisplacementField) -> Result<Volume> {
    v.dims.ensure_same(phi.dims)?;
    let (lo, hi) = v.min_max();
    let data = warp_channels(&v.data, v.dims, 1, phi).into_iter().map(|x| x.clamp(lo, hi)).collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, data })
}

/// Warps every channel of a channels-last field.
pub fn warp_features(f: &FeatureField, phi: &DisplacementField) -> Result<FeatureField> {
    f.dims.ensure_same(phi.dims)?;
    let data = warp_channels(&f.data, f.dims, f.channels, phi);
    Ok(FeatureField { dims: f.dims, channels: f.channels, data })
}

fn warp_channels(data: &[f64], dims: Dims, channels: usize, phi: &DisplacementField) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for v in 0..dims.len() {
        let c = dims.coords(v);
        let u = phi.at(v);
        let p = [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]];
        let s = Stencil::at(dims, p);
        s.sample_channels(data, channels, &mut out[v * channels..(v + 1) * channels], None);
    }
    out
}

/// Warped channels-last samples `data(x + phi(x))` together with, per voxel
/// and channel, the gradient of the sample w.r.t. its coordinate.
pub(crate) fn warp_with_grad(data: &[f64], dims: Dims, channels: usize, phi: &DisplacementField) -> (Vec<f64>, Vec<[f64; 3]>) {
    let mut out = vec![0.0; data.len()];
    let mut grad = vec![[0.0; 3]; data.len()];
    for v in 0..dims.len() {
        let c = dims.coords(v);
        let u = phi.at(v);
        let p = [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]];
        let range = v * channels..(v + 1) * channels;
        Stencil::at(dims, p).sample_channels(data, channels, &mut out[range.clone()], Some(&mut grad[range]));
    }
    (out, grad)
}

/// Approximate inverse of a displacement field by fixed-point iteration of
/// `psi(x) = -phi(x + psi(x))`, so that warping by `phi` then `psi` (or the
/// reverse) is close to the identity for smooth, fold-free fields.
pub fn invert_field(phi: &DisplacementField, iterations: usize) -> DisplacementField {
    let dims = phi.dims;
    let mut psi = phi.data.iter().map(|u| -u).collect::<Vec<f64>>();
    let mut sampled = [0.0; 3];
    for _ in 0..iterations {
        let mut next = vec![0.0; psi.len()];
        for v in 0..dims.len() {
            let c = dims.coords(v);
            let p = [c[0] as f64 + psi[3 * v], c[1] as f64 + psi[3 * v + 1], c[2] as f64 + psi[3 * v + 2]];
            Stencil::at(dims, p).sample_channels(&phi.data, 3, &mut sampled, None);
            for a in 0..3 {
                next[3 * v + a] = -sampled[a];
            }
        }
        psi = next;
    }
    DisplacementField { dims, data: psi }
}

/// Nearest-neighbour warp of an integer label map.
pub fn warp_nearest<T: Copy>(labels: &[T], dims: Dims, phi: &DisplacementField) -> Result<Vec<T>> {
    dims.ensure_same(phi.dims)?;
    if labels.len() != dims.len() {
        return Err(Error::ShapeMismatch { op: "warp_nearest", detail: "label count".into() });
    }
    let mut out = Vec::with_capacity(labels.len());
    for v in 0..dims.len() {
        let c = dims.coords(v);
        let u = phi.at(v);
        let mut q = [0usize; 3];
        for a in 0..3 {
            let p = libm::round(c[a] as f64 + u[a]);
            q[a] = p.clamp(0.0, (dims.0[a] - 1) as f64) as usize;
        }
        out.push(labels[dims.index(q[0], q[1], q[2])]);
    }
    Ok(out)
}

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as isize;
    let mut w: Vec<f64> = (-r..=r)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}

/// Separable Gaussian smoothing with border replication; `sigma = 0` is the identity.
pub fn gaussian_smooth(v: &Volume, sigma: f64) -> Result<Volume> {
    let data = smooth_channels(&v.data, v.dims, 1, sigma)?;
    Ok(Volume { dims: v.dims, spacing: v.spacing, data })
}

pub(crate) fn smooth_channels(data: &[f64], dims: Dims, channels: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!("smoothing sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(data.to_vec());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut cur = data.to_vec();
    let mut next = vec![0.0; data.len()];
    let strides = [dims.0[1] * dims.0[2] * channels, dims.0[2] * channels, channels];
    for axis in 0..3 {
        let n = dims.0[axis] as isize;
        let stride = strides[axis];
        for v in 0..dims.len() {
            let pos = dims.coords(v)[axis] as isize;
            let base = v * channels - pos as usize * stride;
            let out = &mut next[v * channels..(v + 1) * channels];
            out.iter_mut().for_each(|o| *o = 0.0);
            for (t, &w) in kernel.iter().enumerate() {
                let q = (pos + t as isize - r).clamp(0, n - 1) as usize;
                let src = &cur[base + q * stride..base + q * stride + channels];
                for (o, &s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        core::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Source coordinate of output index `j` when resampling `n_old -> n_new`
/// samples with aligned corners.
#[inline]
pub(crate) fn aligned_coord(j: usize, n_old: usize, n_new: usize) -> f64 {
    if n_new <= 1 || n_old <= 1 {
        0.0
    } else {
        j as f64 * (n_old - 1) as f64 / (n_new - 1) as f64
    }
}

/// Trilinear resampling onto `new_dims` with aligned corners, clamped to
/// the range of `v`.
pub fn resample_trilinear(v: &Volume, new_dims: Dims) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    let data = resample_channels(&v.data, v.dims, 1, new_dims)?.into_iter().map(|x| x.clamp(lo, hi)).collect();
    let mut spacing = v.spacing;
    for a in 0..3 {
        if v.dims.0[a] > 1 && new_dims.0[a] > 1 {
            spacing[a] *= (v.dims.0[a] - 1) as f64 / (new_dims.0[a] - 1) as f64;
        }
    }
    Ok(Volume { dims: new_dims, spacing, data })
}

pub(crate) fn resample_channels(data: &[f64], dims: Dims, channels: usize, new_dims: Dims) -> Result<Vec<f64>> {
    new_dims.ensure_positive()?;
    if new_dims == dims {
        return Ok(data.to_vec());
    }
    let mut out = vec![0.0; new_dims.len() * channels];
    for v in 0..new_dims.len() {
        let c = new_dims.coords(v);
        let p = [
            aligned_coord(c[0], dims.0[0], new_dims.0[0]),
            aligned_coord(c[1], dims.0[1], new_dims.0[1]),
            aligned_coord(c[2], dims.0[2], new_dims.0[2]),
        ];
        Stencil::at(dims, p).sample_channels(data, channels, &mut out[v * channels..(v + 1) * channels], None);
    }
    Ok(out)
}

/// Per-voxel Jacobian of a displacement field, `J[c][a] = d u_c / d x_a`,
/// in voxel units. Central differences inside, one-sided at the faces.
pub fn spatial_gradient(phi: &DisplacementField) -> Result<Vec<[[f64; 3]; 3]>> {
    let dims = phi.dims;
    if dims.0.iter().any(|&n| n < 2) {
        return Err(Error::InvalidDims { dims, reason: "spatial gradient needs at least 2 voxels per axis" });
    }
    let strides = [dims.0[1] * dims.0[2], dims.0[2], 1];
    let mut out = vec![[[0.0; 3]; 3]; dims.len()];
    for (v, jac) in out.iter_mut().enumerate() {
        let c = dims.coords(v);
        for a in 0..3 {
            let n = dims.0[a];
            let (lo, hi, h) = if c[a] == 0 {
                (v, v + strides[a], 1.0)
            } else if c[a] == n - 1 {
                (v - strides[a], v, 1.0)
            } else {
                (v - strides[a], v + strides[a], 2.0)
            };
            for comp in 0..3 {
                jac[comp][a] = (phi.data[3 * hi + comp] - phi.data[3 * lo + comp]) / h;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp(dims: Dims) -> Volume {
        Volume::from_fn(dims, |c| c[0] as f64)
    }

    #[test]
    fn sample_constant_and_ramp() {
        let v = Volume::filled(Dims::cube(4), 3.25);
        assert_abs_diff_eq!(trilinear_sample(&v, [1.3, 2.7, 0.1]), 3.25, epsilon = 1e-14);
        let r = ramp(Dims::cube(5));
        assert_abs_diff_eq!(trilinear_sample(&r, [2.5, 0.0, 0.0]), 2.5, epsilon = 1e-12);
        assert_eq!(trilinear_sample(&r, [-5.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn sample_lattice_exact() {
        let dims = Dims::new(3, 4, 5);
        let v = Volume::from_fn(dims, |c| (c[0] * 31 + c[1] * 7 + c[2]) as f64 * 0.37 - 1.1);
        for idx in 0..dims.len() {
            let c = dims.coords(idx);
            let p = [c[0] as f64, c[1] as f64, c[2] as f64];
            assert_eq!(trilinear_sample(&v, p), v.data[idx]);
        }
    }

    #[test]
    fn warp_identity_and_shift() {
        let dims = Dims::new(6, 4, 4);
        let v = ramp(dims);
        let same = warp(&v, &DisplacementField::zeros(dims)).unwrap();
        assert_eq!(same, v);
        let phi = DisplacementField::from_fn(dims, |_| [1.0, 0.0, 0.0]);
        let w = warp(&v, &phi).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(w.get(i, 2, 2), i as f64 + 1.0, epsilon = 1e-12);
        }
        assert!(warp(&v, &DisplacementField::zeros(Dims::cube(4))).is_err());
    }

    #[test]
    fn smoothing_contracts() {
        let c = Volume::filled(Dims::cube(6), 0.7);
        let s = gaussian_smooth(&c, 1.3).unwrap();
        for (a, b) in s.data.iter().zip(&c.data) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let v = Volume::from_fn(Dims::cube(5), |p| (p[0] + 2 * p[1] + 3 * p[2]) as f64);
        assert_eq!(gaussian_smooth(&v, 0.0).unwrap(), v);
        assert!(gaussian_smooth(&v, -1.0).is_err());
    }

    #[test]
    fn smoothing_impulse_center_weight() {
        // Oracle: central tap of the normalized 1D kernel, cubed.
        let r = 3i32;
        let z: f64 = (-r..=r).map(|k| (-(k * k) as f64 / 2.0).exp()).sum();
        let expected = (1.0 / z).powi(3);
        let dims = Dims::cube(9);
        let v = Volume::from_fn(dims, |c| if c == [4, 4, 4] { 1.0 } else { 0.0 });
        let s = gaussian_smooth(&v, 1.0).unwrap();
        assert_abs_diff_eq!(s.get(4, 4, 4), expected, epsilon = 1e-14);
    }

    #[test]
    fn resample_contracts() {
        let v = ramp(Dims::cube(32));
        assert_eq!(resample_trilinear(&v, v.dims).unwrap(), v);
        let c = Volume::filled(Dims::cube(8), 2.0);
        let r = resample_trilinear(&c, Dims::new(3, 5, 11)).unwrap();
        assert!(r.data.iter().all(|&x| (x - 2.0).abs() < 1e-12));
        let half = resample_trilinear(&v, Dims::cube(16)).unwrap();
        let back = resample_trilinear(&half, Dims::cube(32)).unwrap();
        let worst = back.data.iter().zip(&v.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6);
        assert!(resample_trilinear(&v, Dims::new(0, 4, 4)).is_err());
    }

    #[test]
    fn gradient_of_linear_field() {
        let dims = Dims::cube(5);
        assert!(spatial_gradient(&DisplacementField::zeros(dims)).unwrap().iter().all(|j| *j == [[0.0; 3]; 3]));
        let phi = DisplacementField::from_fn(dims, |c| [0.5 * c[0] as f64, 0.5 * c[1] as f64, 0.5 * c[2] as f64]);
        let g = spatial_gradient(&phi).unwrap();
        for v in 0..dims.len() {
            for r in 0..3 {
                for a in 0..3 {
                    let e = if r == a { 0.5 } else { 0.0 };
                    assert_abs_diff_eq!(g[v][r][a], e, epsilon = 1e-10);
                }
            }
        }
        assert!(spatial_gradient(&DisplacementField::zeros(Dims::new(1, 4, 4))).is_err());
    }

    #[test]
    fn constant_translation_survives_upsampling() {
        let phi = DisplacementField::from_fn(Dims::cube(9), |_| [1.5, -0.25, 2.0]);
        let up = phi.resampled(Dims::cube(17)).unwrap();
        for u in up.data.chunks_exact(3) {
            assert_abs_diff_eq!(u[0], 3.0, epsilon = 1e-6);
            assert_abs_diff_eq!(u[1], -0.5, epsilon = 1e-6);
            assert_abs_diff_eq!(u[2], 4.0, epsilon = 1e-6);
        }
    }
}
