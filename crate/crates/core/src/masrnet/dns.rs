//! Deep neighbourhood self-similarity over a feature map, and the channel
//! squeeze that collapses its feature axis.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Dims;

/// Floor applied to the per-voxel noise estimate.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LayoutKind {
    Direct,
    Dilated,
}

/// The six axis-aligned neighbours of a voxel and the twelve non-opposite
/// pairs among them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighbourhoodLayout {
    pub kind: LayoutKind,
    pub offsets: [[isize; 3]; 6],
    pub pairs: [(usize, usize); 12],
}

impl NeighbourhoodLayout {
    pub fn new(kind: LayoutKind) -> Self {
        let s = match kind {
            LayoutKind::Direct => 1,
            LayoutKind::Dilated => 2,
        };
        let offsets = [[s, 0, 0], [-s, 0, 0], [0, s, 0], [0, -s, 0], [0, 0, s], [0, 0, -s]];
        let mut pairs = [(0, 0); 12];
        let mut n = 0;
        for a in 0..6 {
            for b in a + 1..6 {
                // offsets 2k and 2k+1 are opposite
                if a / 2 != b / 2 {
                    pairs[n] = (a, b);
                    n += 1;
                }
            }
        }
        NeighbourhoodLayout { kind, offsets, pairs }
    }

    pub fn direct() -> Self {
        Self::new(LayoutKind::Direct)
    }

    pub fn dilated() -> Self {
        Self::new(LayoutKind::Dilated)
    }
}

/// Noise estimate from the twelve squared pair distances: their mean,
/// floored. The flag reports whether the floor was active.
#[inline]
fn noise_estimate(d: &[f64; 12]) -> (f64, bool) {
    let mean = d.iter().sum::<f64>() / 12.0;
    if mean < SIGMA_FLOOR {
        (SIGMA_FLOOR, true)
    } else {
        (mean, false)
    }
}

/// Descriptor from the twelve squared pair distances of one voxel and
/// channel: `exp(-d_j / s)` with `s` the floored mean distance. Returns the
/// noise estimate and whether the floor was active.
pub fn descriptor_from_distances(d: &[f64; 12], out: &mut [f64; 12]) -> (f64, bool) {
    let (s, floored) = noise_estimate(d);
    let inv = -1.0 / s;
    for j in 0..12 {
        out[j] = crate::math::exp_nonpositive(d[j] * inv);
    }
    (s, floored)
}

#[inline]
fn pair_distances(v: &[f64; 6], pairs: &[(usize, usize); 12], d: &mut [f64; 12]) {
    for (j, &(a, b)) in pairs.iter().enumerate() {
        let diff = v[a] - v[b];
        d[j] = diff * diff;
    }
}

#[inline]
fn neighbours(dims: Dims, c: [usize; 3], layout: &NeighbourhoodLayout) -> [usize; 6] {
    let mut idx = [0; 6];
    for (k, o) in layout.offsets.iter().enumerate() {
        idx[k] = dims.clamped_index(c, *o);
    }
    idx
}

struct DnsOp {
    channels: usize,
    dims: Dims,
    layouts: Vec<NeighbourhoodLayout>,
}

impl DnsOp {
    fn width(&self) -> usize {
        12 * self.layouts.len()
    }

    fn forward(&self, h: &[f64]) -> Vec<f64> {
        let n = self.dims.len();
        let k = self.width();
        let mut out = vec![0.0; self.channels * n * k];
        let (mut d, mut o) = ([0.0; 12], [0.0; 12]);
        for v in 0..n {
            let c3 = self.dims.coords(v);
            for (l, layout) in self.layouts.iter().enumerate() {
                let nb = neighbours(self.dims, c3, layout);
                for c in 0..self.channels {
                    let base = c * n;
                    let vals = nb.map(|i| h[base + i]);
                    pair_distances(&vals, &layout.pairs, &mut d);
                    descriptor_from_distances(&d, &mut o);
                    let dst = (base + v) * k + l * 12;
                    out[dst..dst + 12].copy_from_slice(&o);
                }
            }
        }
        out
    }
}

impl Backward for DnsOp {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let h = inputs[0].data();
        let out = output.data();
        let n = self.dims.len();
        let k = self.width();
        let mut gh = vec![0.0; h.len()];
        let mut d = [0.0; 12];
        for v in 0..n {
            let c3 = self.dims.coords(v);
            for (l, layout) in self.layouts.iter().enumerate() {
                let nb = neighbours(self.dims, c3, layout);
                for c in 0..self.channels {
                    let base = c * n;
                    let vals = nb.map(|i| h[base + i]);
                    pair_distances(&vals, &layout.pairs, &mut d);
                    let (s, floored) = noise_estimate(&d);
                    let at = (base + v) * k + l * 12;
                    let g = &grad[at..at + 12];
                    let o = &out[at..at + 12];
                    // d out_j / d d_i = -out_j / s * [i == j] + out_j d_j / s^2 * ds/dd_i
                    let mut shared = 0.0;
                    if !floored {
                        for j in 0..12 {
                            shared += g[j] * o[j] * d[j];
                        }
                        shared /= 12.0 * s * s;
                    }
                    for (j, &(a, b)) in layout.pairs.iter().enumerate() {
                        let gd = -g[j] * o[j] / s + shared;
                        let t = 2.0 * (vals[a] - vals[b]) * gd;
                        gh[base + nb[a]] += t;
                        gh[base + nb[b]] -= t;
                    }
                }
            }
        }
        vec![Some(gh)]
    }
}

/// Channel-axis squeeze `[C,H,W,D,K] -> [K,H,W,D]` with weight `[1,C]` and
/// bias `[1]`.
struct Squeeze {
    channels: usize,
    voxels: usize,
    width: usize,
}

/// Row-major `[k, n] -> [n, k]`.
fn transpose(src: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for j in 0..k {
        for (v, &x) in src[j * n..(j + 1) * n].iter().enumerate() {
            out[v * k + j] = x;
        }
    }
    out
}

impl Backward for Squeeze {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (s, w) = (inputs[0].data(), inputs[1].data());
        let block = self.voxels * self.width;
        let gt = transpose(grad, self.width, self.voxels);
        let gs = needs[0].then(|| {
            let mut gs = vec![0.0; s.len()];
            for c in 0..self.channels {
                for (o, g) in gs[c * block..(c + 1) * block].iter_mut().zip(&gt) {
                    *o = w[c] * g;
                }
            }
            gs
        });
        let gw = needs[1].then(|| {
            (0..self.channels).map(|c| s[c * block..(c + 1) * block].iter().zip(&gt).map(|(a, b)| a * b).sum()).collect()
        });
        let gb = needs[2].then(|| vec![grad.iter().sum()]);
        vec![gs, gw, gb]
    }
}

/// DNS over both layouts followed by the channel squeeze, without
/// materializing the `[C,H,W,D,24]` map. The backward pass recomputes the
/// descriptors.
struct DnsSqueeze {
    dns: DnsOp,
}

impl DnsSqueeze {
    /// Visits every (voxel, layout, channel) descriptor block, row by row.
    fn for_each(&self, h: &[f64], mut f: impl FnMut(usize, usize, usize, &[usize; 6], &[f64; 6], &[f64; 12], f64, bool, &[f64; 12])) {
        let op = &self.dns;
        let n = op.dims.len();
        let (mut d, mut o) = ([0.0; 12], [0.0; 12]);
        let [hh, ww, dd] = op.dims.0;
        // row tiles: each row's accumulator stays in cache across channels
        for i in 0..hh {
            for j in 0..ww {
                let row = (i * ww + j) * dd;
                for c in 0..op.channels {
                    let base = c * n;
                    for kk in 0..dd {
                        let c3 = [i, j, kk];
                        for (l, layout) in op.layouts.iter().enumerate() {
                            let nb = neighbours(op.dims, c3, layout);
                            let vals = nb.map(|q| h[base + q]);
                            pair_distances(&vals, &layout.pairs, &mut d);
                            let (s, floored) = descriptor_from_distances(&d, &mut o);
                            f(row + kk, l, c, &nb, &vals, &d, s, floored, &o);
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, h: &[f64], w: &[f64], b: f64) -> Vec<f64> {
        let n = self.dns.dims.len();
        let k = self.dns.width();
        let mut acc = vec![b; n * k];
        self.for_each(h, |v, l, c, _, _, _, _, _, o| {
            let dst = &mut acc[v * k + l * 12..v * k + l * 12 + 12];
            for (a, x) in dst.iter_mut().zip(o) {
                *a += w[c] * x;
            }
        });
        transpose(&acc, n, k)
    }
}

impl Backward for DnsSqueeze {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (h, w) = (inputs[0].data(), inputs[1].data());
        let n = self.dns.dims.len();
        let k = self.dns.width();
        let gt = transpose(grad, k, n);
        let mut gh = vec![0.0; h.len()];
        let mut gw = vec![0.0; w.len()];
        let pairs: Vec<[(usize, usize); 12]> = self.dns.layouts.iter().map(|l| l.pairs).collect();
        self.for_each(h, |v, l, c, nb, vals, d, s, floored, o| {
            let at = v * k + l * 12;
            let gy = &gt[at..at + 12];
            gw[c] += gy.iter().zip(o).map(|(a, b)| a * b).sum::<f64>();
            if !needs[0] {
                return;
            }
            let base = c * n;
            let wc = w[c];
            let mut shared = 0.0;
            if !floored {
                for j in 0..12 {
                    shared += gy[j] * o[j] * d[j];
                }
                shared *= wc / (12.0 * s * s);
            }
            for (j, &(a, b)) in pairs[l].iter().enumerate() {
                let gd = -wc * gy[j] * o[j] / s + shared;
                let t = 2.0 * (vals[a] - vals[b]) * gd;
                gh[base + nb[a]] += t;
                gh[base + nb[b]] -= t;
            }
        });
        let gb = needs[2].then(|| vec![grad.iter().sum()]);
        vec![needs[0].then_some(gh), needs[1].then_some(gw), gb]
    }
}

fn feature_shape(op: &'static str, shape: &[usize]) -> Result<(usize, Dims)> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch { op, detail: alloc::format!("expected [C,H,W,D], got {shape:?}") });
    }
    Ok((shape[0], Dims([shape[1], shape[2], shape[3]])))
}

impl Graph {
    /// Self-similarity of a feature map `[C,H,W,D]` under one or more layouts;
    /// output `[C,H,W,D,12 * layouts.len()]`, layouts in the given order.
    pub fn dns_layouts(&mut self, h: Var, layouts: &[NeighbourhoodLayout]) -> Result<Var> {
        let (channels, dims) = feature_shape("dns", self.shape(h))?;
        if layouts.is_empty() {
            return Err(Error::InvalidArgument("dns needs at least one layout".into()));
        }
        if self.value(h).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dns input"));
        }
        let op = DnsOp { channels, dims, layouts: layouts.to_vec() };
        let data = op.forward(self.value(h).data());
        let shape = vec![channels, dims.0[0], dims.0[1], dims.0[2], op.width()];
        self.apply(Box::new(op), &[h], Tensor::from_parts(shape, data))
    }

    pub fn dns(&mut self, h: Var, layout: &NeighbourhoodLayout) -> Result<Var> {
        self.dns_layouts(h, core::slice::from_ref(layout))
    }

    /// Direct then dilated layout: `[C,H,W,D,24]`.
    pub fn dns_dual(&mut self, h: Var) -> Result<Var> {
        self.dns_layouts(h, &[NeighbourhoodLayout::direct(), NeighbourhoodLayout::dilated()])
    }

    /// Linear collapse of the feature axis of a `[C,H,W,D,K]` map with weight
    /// `[1,C]` and bias `[1]`, giving `[K,H,W,D]`.
    pub fn squeeze_channels(&mut self, s: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(s).to_vec();
        if shape.len() != 5 || self.shape(w) != [1, shape[0]] || self.shape(b) != [1] {
            return Err(Error::ShapeMismatch {
                op: "squeeze",
                detail: alloc::format!("map {shape:?}, weight {:?}, bias {:?}", self.shape(w), self.shape(b)),
            });
        }
        let (channels, k) = (shape[0], shape[4]);
        let n = shape[1] * shape[2] * shape[3];
        let (sd, wd, bd) = (self.value(s).data(), self.value(w).data(), self.value(b).data()[0]);
        // accumulate voxel-major, then transpose to descriptor-major
        let mut acc = vec![bd; n * k];
        for c in 0..channels {
            for (a, x) in acc.iter_mut().zip(&sd[c * n * k..(c + 1) * n * k]) {
                *a += wd[c] * x;
            }
        }
        let out = transpose(&acc, n, k);
        let value = Tensor::from_parts(vec![k, shape[1], shape[2], shape[3]], out);
        self.apply(Box::new(Squeeze { channels, voxels: n, width: k }), &[s, w, b], value)
    }

    /// `squeeze_channels(dns_dual(h), w, b)` as one node: `[C,H,W,D] -> [24,H,W,D]`.
    pub fn dns_squeeze(&mut self, h: Var, w: Var, b: Var) -> Result<Var> {
        let (channels, dims) = feature_shape("dns", self.shape(h))?;
        if self.shape(w) != [1, channels] || self.shape(b) != [1] {
            return Err(Error::ShapeMismatch {
                op: "dns_squeeze",
                detail: alloc::format!("{channels} channels, weight {:?}, bias {:?}", self.shape(w), self.shape(b)),
            });
        }
        if self.value(h).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dns input"));
        }
        let layouts = vec![NeighbourhoodLayout::direct(), NeighbourhoodLayout::dilated()];
        let op = DnsSqueeze { dns: DnsOp { channels, dims, layouts } };
        let data = op.forward(self.value(h).data(), self.value(w).data(), self.value(b).data()[0]);
        let value = Tensor::from_parts(vec![op.dns.width(), dims.0[0], dims.0[1], dims.0[2]], data);
        self.apply(Box::new(op), &[h, w, b], value)
    }
}

/// DNS of a feature map outside any training graph.
pub fn dns(h: &Tensor, layout: &NeighbourhoodLayout) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let y = g.dns(x, layout)?;
    Ok(g.value(y).clone())
}

/// Both layouts concatenated on the descriptor axis.
pub fn dns_dual(h: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let y = g.dns_dual(x)?;
    Ok(g.value(y).clone())
}
